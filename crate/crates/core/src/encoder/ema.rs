use super::params::{is_tracked, EncoderParams, MomentumParams, ParamSet};
use crate::error::{Error, Result};

fn blend(xi: &mut ParamSet, theta: &ParamSet, mu: f64) -> Result<()> {
    let tracked = theta.filter(is_tracked);
    if !xi.same_layout(&tracked) {
        return Err(Error::invalid(
            "momentum parameters do not match the tracked encoder subset",
        ));
    }
    if mu == 1.0 {
        return Ok(());
    }
    for ((_, x), (_, t)) in xi.iter_mut().zip(tracked.iter()) {
        if mu == 0.0 {
            x.data_mut().copy_from_slice(t.data());
        } else {
            for (a, b) in x.data_mut().iter_mut().zip(t.data()) {
                *a = mu * *a + (1.0 - mu) * b;
            }
        }
    }
    Ok(())
}

/// In-place `xi <- mu * xi + (1 - mu) * theta` over the tracked subset.
/// Batch-norm running statistics follow the same rule.
pub fn ema_update(theta: &EncoderParams, xi: &mut MomentumParams, mu: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&mu) {
        return Err(Error::invalid(format!("momentum {mu} outside [0, 1]")));
    }
    blend(&mut xi.params, &theta.params, mu)?;
    blend(&mut xi.buffers, &theta.buffers, mu)
}
