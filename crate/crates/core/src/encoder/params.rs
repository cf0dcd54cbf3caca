use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Backbone and head geometry.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ViTConfig {
    pub patch_side: usize,
    pub depth: usize,
    pub heads: usize,
    pub dim: usize,
    pub mlp_ratio: usize,
    pub image_side: usize,
    pub channels: usize,
    /// Hidden width of the projection and prediction heads.
    pub head_hidden: usize,
    /// Output width of both heads.
    pub head_out: usize,
}

impl ViTConfig {
    /// ViT-Tiny/2 for 32x32 inputs with the full-width heads.
    pub fn tiny() -> Self {
        Self {
            patch_side: 2,
            depth: 12,
            heads: 3,
            dim: 192,
            mlp_ratio: 4,
            image_side: 32,
            channels: 3,
            head_hidden: 4096,
            head_out: 256,
        }
    }

    /// Two-block, two-head, 32-wide model for 8x8 inputs and 256-wide heads.
    pub fn micro() -> Self {
        Self {
            patch_side: 2,
            depth: 2,
            heads: 2,
            dim: 32,
            mlp_ratio: 4,
            image_side: 8,
            channels: 3,
            head_hidden: 256,
            head_out: 256,
        }
    }

    /// Geometry checks plus `depth >= 1`.
    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be at least 1".into()));
        }
        self.validate_geometry()
    }

    /// Checks everything except depth; depth 0 is allowed for tests.
    pub fn validate_geometry(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} must be a positive multiple of heads {}",
                self.dim, self.heads
            )));
        }
        if self.patch_side == 0 || self.image_side % self.patch_side != 0 {
            return Err(Error::Config(format!(
                "image side {} must be divisible by patch side {}",
                self.image_side, self.patch_side
            )));
        }
        if self.channels == 0 || self.mlp_ratio == 0 || self.head_hidden == 0 || self.head_out == 0
        {
            return Err(Error::Config("channels, mlp ratio and head widths must be positive".into()));
        }
        Ok(())
    }

    pub fn tokens(&self) -> usize {
        let g = self.image_side / self.patch_side;
        g * g
    }

    pub fn patch_dim(&self) -> usize {
        self.channels * self.patch_side * self.patch_side
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }
}

/// Ordered named arrays.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Array)>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array) {
        let name = name.into();
        match self.entries.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = value,
            None => self.entries.push((name, value)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array> {
        self.entries.iter_mut().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    pub fn require(&self, name: &str) -> Result<&Array> {
        self.get(name)
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array)> {
        self.entries.iter().map(|(n, a)| (n.as_str(), a))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Array)> {
        self.entries.iter_mut().map(|(n, a)| (n.as_str(), a))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, a)| a.len()).sum()
    }

    /// Entries whose name satisfies `keep`, in order.
    pub fn filter(&self, keep: impl Fn(&str) -> bool) -> Self {
        Self {
            entries: self
                .entries
                .iter()
                .filter(|(n, _)| keep(n))
                .cloned()
                .collect(),
        }
    }

    pub fn same_layout(&self, other: &ParamSet) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|((na, a), (nb, b))| na == nb && a.shape() == b.shape())
    }

    pub fn all_finite(&self) -> bool {
        self.entries.iter().all(|(_, a)| a.all_finite())
    }
}

/// Prefix of prediction-head parameters, which the momentum copy omits.
pub const PREDICTION_PREFIX: &str = "pred.";

/// Base encoder: backbone, projection head and prediction head, plus
/// batch-norm running statistics.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub cfg: ViTConfig,
    pub params: ParamSet,
    pub buffers: ParamSet,
}

/// Momentum copy of the backbone and projection head.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumParams {
    pub params: ParamSet,
    pub buffers: ParamSet,
}

/// Whether `name` belongs to the subset the momentum copy tracks.
pub fn is_tracked(name: &str) -> bool {
    !name.starts_with(PREDICTION_PREFIX)
}

/// Excluded from weight decay: biases, normalization parameters, class token.
pub fn is_decay_exempt(name: &str) -> bool {
    name.ends_with(".bias")
        || name.contains("norm")
        || name.contains(".bn.")
        || name == "cls_token"
}

fn trunc_normal<R: Rng + ?Sized>(shape: &[usize], std: f64, rng: &mut R) -> Array {
    let normal = Normal::new(0.0, std).expect("positive std");
    Array::from_fn(shape, |_| loop {
        let v: f64 = normal.sample(rng);
        if v.abs() <= 2.0 * std {
            break v;
        }
    })
}

fn linear<R: Rng + ?Sized>(p: &mut ParamSet, name: &str, fan_in: usize, fan_out: usize, rng: &mut R) {
    p.insert(format!("{name}.weight"), trunc_normal(&[fan_in, fan_out], 0.02, rng));
    p.insert(format!("{name}.bias"), Array::zeros(&[fan_out]));
}

fn norm(p: &mut ParamSet, name: &str, width: usize) {
    p.insert(format!("{name}.weight"), Array::full(&[width], 1.0));
    p.insert(format!("{name}.bias"), Array::zeros(&[width]));
}

fn running_stats(b: &mut ParamSet, name: &str, width: usize) {
    b.insert(format!("{name}.running_mean"), Array::zeros(&[width]));
    b.insert(format!("{name}.running_var"), Array::full(&[width], 1.0));
}

impl EncoderParams {
    /// Truncated-normal (std 0.02) weights, zero biases, unit norms.
    pub fn init<R: Rng + ?Sized>(cfg: &ViTConfig, rng: &mut R) -> Result<Self> {
        cfg.validate_geometry()?;
        let (d, hid, out) = (cfg.dim, cfg.head_hidden, cfg.head_out);
        let mut p = ParamSet::new();
        let mut b = ParamSet::new();
        linear(&mut p, "patch_embed", cfg.patch_dim(), d, rng);
        p.insert("cls_token", trunc_normal(&[1, d], 0.02, rng));
        p.insert("pos_embed", trunc_normal(&[cfg.tokens() + 1, d], 0.02, rng));
        for blk in 0..cfg.depth {
            let pre = format!("blocks.{blk}");
            norm(&mut p, &format!("{pre}.norm1"), d);
            linear(&mut p, &format!("{pre}.attn.qkv"), d, 3 * d, rng);
            linear(&mut p, &format!("{pre}.attn.proj"), d, d, rng);
            norm(&mut p, &format!("{pre}.norm2"), d);
            linear(&mut p, &format!("{pre}.mlp.fc1"), d, d * cfg.mlp_ratio, rng);
            linear(&mut p, &format!("{pre}.mlp.fc2"), d * cfg.mlp_ratio, d, rng);
        }
        norm(&mut p, "norm", d);

        // projection: Linear+BN+ReLU, Linear+BN+ReLU, Linear+BN*
        linear(&mut p, "proj.0", d, hid, rng);
        norm(&mut p, "proj.0.bn", hid);
        running_stats(&mut b, "proj.0.bn", hid);
        linear(&mut p, "proj.1", hid, hid, rng);
        norm(&mut p, "proj.1.bn", hid);
        running_stats(&mut b, "proj.1.bn", hid);
        linear(&mut p, "proj.2", hid, out, rng);
        running_stats(&mut b, "proj.2.bn", out);

        // prediction: Linear+BN+ReLU, Linear+BN*
        linear(&mut p, "pred.0", out, hid, rng);
        norm(&mut p, "pred.0.bn", hid);
        running_stats(&mut b, "pred.0.bn", hid);
        linear(&mut p, "pred.1", hid, out, rng);
        running_stats(&mut b, "pred.1.bn", out);

        Ok(Self {
            cfg: cfg.clone(),
            params: p,
            buffers: b,
        })
    }

    /// Momentum copy initialized to the tracked subset of these parameters.
    pub fn momentum_copy(&self) -> MomentumParams {
        MomentumParams {
            params: self.params.filter(is_tracked),
            buffers: self.buffers.filter(is_tracked),
        }
    }

    /// The tracked subset, viewed as a momentum-shaped set.
    pub fn tracked(&self) -> ParamSet {
        self.params.filter(is_tracked)
    }
}
