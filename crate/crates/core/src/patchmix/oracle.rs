use super::{group_bounds, mix_source, plan_mix, MixConfig, MixedBatch};
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::patch_ops::{PatchBatch, Permutation};

/// Reference mixer written as explicit loops over (image, group, slot).
///
/// Copies group `m` of shuffled image `u(i, m)` into mixed image `i`, then
/// writes every shuffled slot back to the spatial position it came from.
/// It never touches the flattened mix index. The returned plan is the one
/// [`plan_mix`] builds, so callers can compare patches and metadata.
pub fn naive_mix_oracle(
    pb: &PatchBatch,
    cfg: MixConfig,
    perm: &Permutation,
) -> Result<MixedBatch> {
    cfg.validate()?;
    if pb.len() != cfg.batch || pb.tokens() != cfg.tokens || perm.len() != cfg.tokens {
        return Err(Error::invalid(format!(
            "patch batch [{}, {}] / permutation {} do not match N={} T={}",
            pb.len(),
            pb.tokens(),
            perm.len(),
            cfg.batch,
            cfg.tokens
        )));
    }
    let (n, m, t, d) = (cfg.batch, cfg.mix, cfg.tokens, pb.patch_dim());
    let k = perm.forward();
    let bounds = group_bounds(t, m);

    let mut out = vec![0.0; n * t * d];
    for i in 0..n {
        for g in 0..m {
            let src = mix_source(i, g, n);
            for slot in bounds[g]..bounds[g + 1] {
                // shuffled slot `slot` holds original patch k(slot); putting it
                // back at k(slot) is the unshuffle
                let pos = k[slot];
                out[(i * t + pos) * d..(i * t + pos + 1) * d].copy_from_slice(pb.patch(src, pos));
            }
        }
    }
    let patches = PatchBatch::from_parts(
        Array::new(&[n, t, d], out)?,
        pb.patch_side(),
        pb.grid(),
        pb.channels(),
    )?;
    Ok(MixedBatch {
        patches,
        plan: plan_mix(cfg, perm.clone())?,
    })
}
