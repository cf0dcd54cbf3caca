//! Group-wise cyclic mixing of `M` images per mixed image.
//!
//! Each image's shuffled patch sequence is cut into `M` groups. Mixed image
//! `i` takes group `m` from image `u(i, m) = (i + m) mod N`, and the shared
//! shuffle is undone afterwards so every patch returns to its spatial slot.
//! In flattened form the group gather is a single index vector
//! `q = (l + (l mod M) * M) mod L` over `L = N * M` groups.

mod oracle;
mod text;

pub use oracle::naive_mix_oracle;
pub use text::{parse_plan, write_plan};

use crate::error::{Error, Result};
use crate::patch_ops::{shuffle, unshuffle, PatchBatch, Permutation};

/// Sizes for one mixing application.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MixConfig {
    /// Images contributing to each mixed image (`M`).
    pub mix: usize,
    /// Batch size (`N`).
    pub batch: usize,
    /// Patches per image (`T`).
    pub tokens: usize,
}

impl MixConfig {
    pub fn new(batch: usize, mix: usize, tokens: usize) -> Result<Self> {
        let cfg = Self { mix, batch, tokens };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mix == 0 {
            return Err(Error::invalid("mix count M must be at least 1"));
        }
        if self.mix > self.batch {
            return Err(Error::invalid(format!(
                "mix count M={} exceeds batch size N={}: a mixed image would take two groups from one source",
                self.mix, self.batch
            )));
        }
        if self.tokens < self.mix {
            return Err(Error::invalid(format!(
                "{} patches cannot be split into M={} groups",
                self.tokens, self.mix
            )));
        }
        Ok(())
    }

    /// Number of flattened groups `L = N * M`.
    pub fn groups(&self) -> usize {
        self.batch * self.mix
    }
}

/// Everything one mixing application decided.
#[derive(Clone, Debug, PartialEq)]
pub struct MixPlan {
    pub cfg: MixConfig,
    pub perm: Permutation,
    /// `M + 1` offsets into the shuffled sequence; group `m` is
    /// `group_bounds[m]..group_bounds[m + 1]`.
    pub group_bounds: Vec<usize>,
    /// Flattened group gather: shuffled-mixed group `l` is shuffled group `q[l]`.
    pub q: Vec<usize>,
    /// `[N * T]`, row-major: source image of the patch at position `j` of mixed image `i`.
    pub source_map: Vec<usize>,
    /// `[N, M]`: the source images of each mixed image.
    pub y_mto: Vec<Vec<usize>>,
    /// `[N, 2M - 1]`: mixed images of the other view sharing a source.
    pub y_mtm: Vec<Vec<usize>>,
    /// `[N, 2M - 1]`: shared-source fraction for each `y_mtm` entry.
    pub w_mtm: Vec<Vec<f64>>,
}

impl MixPlan {
    pub fn source(&self, image: usize, position: usize) -> usize {
        self.source_map[image * self.cfg.tokens + position]
    }
}

/// A mixed patch batch with the plan that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedBatch {
    pub patches: PatchBatch,
    pub plan: MixPlan,
}

/// Group offsets over `tokens` shuffled positions. Groups hold
/// `floor(T / M)` patches, and the first `T mod M` groups hold one more so
/// no patch is left out.
pub fn group_bounds(tokens: usize, mix: usize) -> Vec<usize> {
    let (base, extra) = (tokens / mix, tokens % mix);
    let mut bounds = Vec::with_capacity(mix + 1);
    let mut at = 0;
    bounds.push(at);
    for m in 0..mix {
        at += base + usize::from(m < extra);
        bounds.push(at);
    }
    bounds
}

/// Source image of group `m` in mixed image `i`.
#[inline]
pub fn mix_source(i: usize, m: usize, batch: usize) -> usize {
    (i + m) % batch
}

/// Flattened mix index `q = (l + (l mod M) * M) mod L` for `l = 0..N*M`.
///
/// Defined for any positive `N` and `M`, including `M > N`, where it still
/// is a bijection but wraps some sources twice into one mixed image.
pub fn flat_mix_index(batch: usize, mix: usize) -> Vec<usize> {
    let total = batch * mix;
    (0..total).map(|l| (l + (l % mix) * mix) % total).collect()
}

/// Mixed images of the other view sharing at least one source with mixed
/// image `i`: `(i - M + 1 + j + N) mod N` for `j = 0..2M-1`.
pub fn mix_to_mix_targets(batch: usize, mix: usize) -> Vec<Vec<usize>> {
    let (n, m) = (batch as i64, mix as i64);
    (0..n)
        .map(|i| {
            (0..2 * m - 1)
                .map(|j| (i - m + 1 + j).rem_euclid(n) as usize)
                .collect()
        })
        .collect()
}

/// One row of mix-to-mix weights: `1 - |M - 1 - j| / M` for `j = 0..2M-1`.
pub fn mix_weight_row(mix: usize) -> Vec<f64> {
    let m = mix as f64;
    (0..2 * mix - 1)
        .map(|j| 1.0 - (m - 1.0 - j as f64).abs() / m)
        .collect()
}

/// `[N, 2M - 1]` weights, identical across rows.
pub fn mix_weights(cfg: &MixConfig) -> Vec<Vec<f64>> {
    vec![mix_weight_row(cfg.mix); cfg.batch]
}

/// Builds the full mixing record for one batch and one shared permutation.
pub fn plan_mix(cfg: MixConfig, perm: Permutation) -> Result<MixPlan> {
    cfg.validate()?;
    if perm.len() != cfg.tokens {
        return Err(Error::invalid(format!(
            "permutation length {} does not match T={}",
            perm.len(),
            cfg.tokens
        )));
    }
    let (n, m, t) = (cfg.batch, cfg.mix, cfg.tokens);
    if n <= 2 * m - 2 {
        log::warn!(
            "N={n} <= 2M-2={}: mix-to-mix target windows wrap onto themselves and repeat indices",
            2 * m - 2
        );
    }
    let bounds = group_bounds(t, m);
    let q = flat_mix_index(n, m);

    // group index of every shuffled position
    let mut group_of = vec![0; t];
    for g in 0..m {
        group_of[bounds[g]..bounds[g + 1]].fill(g);
    }
    let r = perm.inverse();
    let mut source_map = Vec::with_capacity(n * t);
    for i in 0..n {
        for &s in r.iter().take(t) {
            // position j sits at shuffled slot r(j), which belongs to group
            // group_of[r(j)] of the mixed image; q names the source group
            let g = group_of[s];
            source_map.push(q[i * m + g] / m);
        }
    }

    let y_mto = (0..n)
        .map(|i| (0..m).map(|g| q[i * m + g] / m).collect())
        .collect();

    Ok(MixPlan {
        cfg,
        perm,
        group_bounds: bounds,
        q,
        source_map,
        y_mto,
        y_mtm: mix_to_mix_targets(n, m),
        w_mtm: mix_weights(&cfg),
    })
}

/// Shuffle, gather groups by `q`, unshuffle.
pub fn apply_mix(pb: &PatchBatch, plan: &MixPlan) -> Result<MixedBatch> {
    let cfg = plan.cfg;
    if pb.len() != cfg.batch || pb.tokens() != cfg.tokens {
        return Err(Error::invalid(format!(
            "patch batch [{}, {}] does not match plan N={} T={}",
            pb.len(),
            pb.tokens(),
            cfg.batch,
            cfg.tokens
        )));
    }
    let m = cfg.mix;
    let shuffled = shuffle(pb, &plan.perm)?;
    let bounds = &plan.group_bounds;
    let mut group_of = vec![0; cfg.tokens];
    for g in 0..m {
        group_of[bounds[g]..bounds[g + 1]].fill(g);
    }
    if plan.q.len() != cfg.groups() {
        return Err(Error::invalid(format!(
            "mix index has {} entries, expected L={}",
            plan.q.len(),
            cfg.groups()
        )));
    }
    // flat group l of the mixed sequence is flat group q[l] of the shuffled one
    let mut sources = Vec::with_capacity(cfg.groups());
    for (l, &src) in plan.q.iter().enumerate() {
        let (g, sg) = (l % m, src % m);
        if src >= cfg.groups() || bounds[g + 1] - bounds[g] != bounds[sg + 1] - bounds[sg] {
            return Err(Error::invalid(format!(
                "mix index q[{l}]={src} does not name a group of matching size"
            )));
        }
        sources.push((src / m, sg));
    }
    let smix = shuffled.gather(|i, j| {
        let g = group_of[j];
        let (src_image, src_group) = sources[i * m + g];
        (src_image, bounds[src_group] + (j - bounds[g]))
    });
    let patches = unshuffle(&smix, &plan.perm)?;
    Ok(MixedBatch {
        patches,
        plan: plan.clone(),
    })
}

#[cfg(test)]
mod tests;
