use std::io::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patch_ops::ImageBatch;

/// 8-bit pixels, row-major, interleaved channels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Raster {
    pub width: usize,
    pub height: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    pub pixels: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

impl Raster {
    /// Image `i` of a batch, enlarged `scale` times by pixel repetition.
    pub fn from_batch(batch: &ImageBatch, i: usize, scale: usize) -> Result<Self> {
        let (c, h, w) = (batch.channels(), batch.height(), batch.width());
        if c != 1 && c != 3 {
            return Err(Error::invalid(format!("cannot write {c}-channel images")));
        }
        let img = batch.image(i);
        let s = scale.max(1);
        let (wo, ho) = (w * s, h * s);
        let mut pixels = Vec::with_capacity(wo * ho * c);
        for y in 0..ho {
            for x in 0..wo {
                for ch in 0..c {
                    pixels.push(to_byte(img[ch * h * w + (y / s) * w + x / s]));
                }
            }
        }
        Ok(Self {
            width: wo,
            height: ho,
            channels: c,
            pixels,
        })
    }

    /// PNG or binary PPM/PGM, chosen by the file extension.
    pub fn save(&self, path: &Path) -> Result<()> {
        let ext = path.extension().and_then(|e| e.to_str()).unwrap_or("");
        match ext {
            "png" => {
                let color = if self.channels == 3 {
                    image::ExtendedColorType::Rgb8
                } else {
                    image::ExtendedColorType::L8
                };
                image::save_buffer(path, &self.pixels, self.width as u32, self.height as u32, color)
                    .map_err(|e| Error::format(path, e.to_string()))
            }
            "ppm" | "pgm" => {
                let magic = if self.channels == 3 { "P6" } else { "P5" };
                let mut bytes = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
                bytes.extend_from_slice(&self.pixels);
                let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
                f.write_all(&bytes).map_err(|e| Error::io(path, e))
            }
            other => Err(Error::Config(format!(
                "{}: unsupported image extension {other:?}; use png or ppm",
                path.display()
            ))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_layout_and_upscale() {
        let batch = ImageBatch::new(1, 3, 1, 2, vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5]).unwrap();
        let r = Raster::from_batch(&batch, 0, 2).unwrap();
        assert_eq!((r.width, r.height), (4, 2));
        assert_eq!(&r.pixels[..6], &[255, 0, 128, 255, 0, 128]);
        assert_eq!(&r.pixels[6..12], &[0, 255, 128, 0, 255, 128]);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.ppm");
        r.save(&p).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert!(bytes.starts_with(b"P6\n4 2\n255\n"));
        assert_eq!(bytes.len(), 11 + 24);
        let png = dir.path().join("x.png");
        r.save(&png).unwrap();
        assert!(std::fs::read(&png).unwrap().starts_with(&[0x89, b'P', b'N', b'G']));
        assert!(r.save(&dir.path().join("x.bmp")).is_err());
    }
}
