use crate::encoder::ParamSet;
use crate::error::{Error, Result};
use crate::numerics::Array;

/// Adam with decoupled weight decay.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Updates taken so far.
    pub t: u64,
    pub m: ParamSet,
    pub v: ParamSet,
}

impl AdamW {
    /// Zero moments shaped like `params`, betas (0.9, 0.999), eps 1e-8.
    pub fn new(params: &ParamSet) -> Self {
        let zeros = |p: &ParamSet| {
            let mut out = ParamSet::new();
            for (n, a) in p.iter() {
                out.insert(n, Array::zeros(a.shape()));
            }
            out
        };
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: zeros(params),
            v: zeros(params),
        }
    }

    /// One update. Missing gradients count as zero; parameters for which
    /// `exempt` holds skip weight decay.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &ParamSet,
        lr: f64,
        wd: f64,
        exempt: impl Fn(&str) -> bool,
    ) -> Result<()> {
        if !params.same_layout(&self.m) {
            return Err(Error::invalid("optimizer moments do not match the parameters"));
        }
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let moments = self.m.iter_mut().zip(self.v.iter_mut());
        for ((name, p), ((_, m), (_, v))) in params.iter_mut().zip(moments) {
            let decay = if exempt(name) { 0.0 } else { lr * wd };
            let g = grads.get(name);
            if let Some(g) = g {
                if g.shape() != p.shape() {
                    return Err(Error::Shape {
                        op: "optimizer step",
                        lhs: p.shape().to_vec(),
                        rhs: g.shape().to_vec(),
                    });
                }
            }
            let gd = g.map(|g| g.data());
            for k in 0..p.len() {
                let gk = gd.map_or(0.0, |d| d[k]);
                let mk = &mut m.data_mut()[k];
                *mk = b1 * *mk + (1.0 - b1) * gk;
                let vk = &mut v.data_mut()[k];
                *vk = b2 * *vk + (1.0 - b2) * gk * gk;
                let update = (m.data()[k] / bc1) / ((v.data()[k] / bc2).sqrt() + eps);
                let pk = &mut p.data_mut()[k];
                *pk -= lr * update + decay * *pk;
            }
        }
        Ok(())
    }
}

/// Scales `grads` so their global L2 norm is at most `max_norm`; returns
/// the norm before clipping.
pub fn clip_grad_norm(grads: &mut ParamSet, max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|(_, g)| g.data().iter())
        .map(|v| v * v)
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, g) in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}
