//! Binary checkpoint: magic, version, a `key=value` text header and a list
//! of named little-endian blobs.
//!
//! ```text
//! b"PMIXCKPT" | u32 version | u32 header_len | header utf-8
//! u32 blob_count | { u32 name_len | name | u32 ndim | u64 dims.. | data }*
//! ```

use std::path::Path;

use super::params::{ParamSet, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::Array;

pub const MAGIC: &[u8; 8] = b"PMIXCKPT";
pub const VERSION: u32 = 1;

/// Width of stored reals.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlobDtype {
    F32,
    F64,
}

impl BlobDtype {
    fn name(self) -> &'static str {
        match self {
            BlobDtype::F32 => "f32",
            BlobDtype::F64 => "f64",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub cfg: ViTConfig,
    pub dtype: BlobDtype,
    /// Extra header entries, kept in order.
    pub meta: Vec<(String, String)>,
    pub blobs: ParamSet,
}

impl Checkpoint {
    pub fn new(cfg: ViTConfig, dtype: BlobDtype) -> Self {
        Self {
            cfg,
            dtype,
            meta: Vec::new(),
            blobs: ParamSet::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn set_meta(&mut self, key: impl Into<String>, value: impl ToString) {
        let key = key.into();
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| *k == key) {
            Some(slot) => slot.1 = value,
            None => self.meta.push((key, value)),
        }
    }

    /// Stores every entry of `set` under `prefix/name`.
    pub fn put_set(&mut self, prefix: &str, set: &ParamSet) {
        for (name, a) in set.iter() {
            self.blobs.insert(format!("{prefix}/{name}"), a.clone());
        }
    }

    /// Entries stored under `prefix/`, with the prefix removed.
    pub fn take_set(&self, prefix: &str) -> ParamSet {
        let lead = format!("{prefix}/");
        let mut out = ParamSet::new();
        for (name, a) in self.blobs.iter() {
            if let Some(rest) = name.strip_prefix(&lead) {
                out.insert(rest, a.clone());
            }
        }
        out
    }

    fn header(&self) -> String {
        let c = &self.cfg;
        let mut h = format!(
            "patch_side={}\ndepth={}\nheads={}\ndim={}\nmlp_ratio={}\nimage_side={}\nchannels={}\nhead_hidden={}\nhead_out={}\ndtype={}\n",
            c.patch_side,
            c.depth,
            c.heads,
            c.dim,
            c.mlp_ratio,
            c.image_side,
            c.channels,
            c.head_hidden,
            c.head_out,
            self.dtype.name()
        );
        for (k, v) in &self.meta {
            h.push_str(&format!("{k}={v}\n"));
        }
        h
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let header = self.header();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        out.extend_from_slice(&(self.blobs.len() as u32).to_le_bytes());
        for (name, a) in self.blobs.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(a.ndim() as u32).to_le_bytes());
            for &d in a.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in a.data() {
                match self.dtype {
                    BlobDtype::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
                    BlobDtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0, path };
        if r.take(8)? != MAGIC {
            return Err(Error::format(path, "not a checkpoint (bad magic)"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format(
                path,
                format!("unsupported checkpoint version {version}"),
            ));
        }
        let hlen = r.u32()? as usize;
        let header = std::str::from_utf8(r.take(hlen)?)
            .map_err(|_| Error::format(path, "header is not utf-8"))?;
        let mut fields = Vec::new();
        for line in header.lines().filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::format(path, format!("bad header line {line:?}")))?;
            fields.push((k.to_string(), v.to_string()));
        }
        let mut take = |key: &str| -> Result<String> {
            let i = fields
                .iter()
                .position(|(k, _)| k == key)
                .ok_or_else(|| Error::format(path, format!("header lacks {key}")))?;
            Ok(fields.remove(i).1)
        };
        let num = |s: String, key: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::format(path, format!("header {key}={s} is not an integer")))
        };
        let cfg = ViTConfig {
            patch_side: num(take("patch_side")?, "patch_side")?,
            depth: num(take("depth")?, "depth")?,
            heads: num(take("heads")?, "heads")?,
            dim: num(take("dim")?, "dim")?,
            mlp_ratio: num(take("mlp_ratio")?, "mlp_ratio")?,
            image_side: num(take("image_side")?, "image_side")?,
            channels: num(take("channels")?, "channels")?,
            head_hidden: num(take("head_hidden")?, "head_hidden")?,
            head_out: num(take("head_out")?, "head_out")?,
        };
        let dtype = match take("dtype")?.as_str() {
            "f32" => BlobDtype::F32,
            "f64" => BlobDtype::F64,
            other => return Err(Error::format(path, format!("unknown dtype {other}"))),
        };
        let count = r.u32()? as usize;
        let mut blobs = ParamSet::new();
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| Error::format(path, "blob name is not utf-8"))?
                .to_string();
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(match dtype {
                    BlobDtype::F32 => f32::from_le_bytes(r.array()?) as f64,
                    BlobDtype::F64 => f64::from_le_bytes(r.array()?),
                });
            }
            blobs.insert(name, Array::new(&shape, data)?);
        }
        if r.pos != bytes.len() {
            return Err(Error::format(path, "trailing bytes after last blob"));
        }
        Ok(Self {
            cfg,
            dtype,
            meta: fields,
            blobs,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::format(
                self.path,
                format!("truncated at byte {} (wanted {n} more)", self.pos),
            )),
        }
    }

    fn array<const K: usize>(&mut self) -> Result<[u8; K]> {
        Ok(self.take(K)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }
}
