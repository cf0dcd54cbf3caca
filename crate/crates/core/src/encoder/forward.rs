use std::collections::HashMap;

use super::params::{ParamSet, ViTConfig};
use crate::error::{Error, Result};
use crate::numerics::{Array, BatchStats, Tape, Var};
use crate::patch_ops::PatchBatch;

const LN_EPS: f64 = 1e-6;
const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch in running batch-norm statistics.
pub const BN_RUNNING_MOMENTUM: f64 = 0.1;

/// Parameters registered on a tape.
#[derive(Debug)]
pub struct Bound {
    vars: HashMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid(format!("missing parameter {name}")))
    }

    /// Rebinds `name` to `var`.
    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(n, v)| (n.as_str(), *v))
    }
}

/// Records `params` on `tape`: as differentiable leaves when `trainable`,
/// otherwise as constants that never receive gradient.
pub fn bind(tape: &mut Tape, params: &ParamSet, trainable: bool) -> Bound {
    let vars = params
        .iter()
        .map(|(name, value)| {
            let v = if trainable {
                tape.leaf(value.clone())
            } else {
                tape.constant(value.clone())
            };
            (name.to_string(), v)
        })
        .collect();
    Bound { vars }
}

/// Batch-norm behaviour in the heads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; reports them for the running averages.
    Train,
    /// Running statistics.
    Eval,
}

/// Batch statistics observed per batch-norm layer during a training forward.
pub type HeadStats = Vec<(String, BatchStats)>;

/// Backbone output plus the attention probabilities of every block,
/// each `[N * heads, T + 1, T + 1]`.
#[derive(Debug)]
pub struct BackboneTrace {
    pub rep: Var,
    pub attention: Vec<Var>,
}

fn linear(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let w = p.get(&format!("{name}.weight"))?;
    let b = p.get(&format!("{name}.bias"))?;
    let y = tape.matmul(x, w)?;
    tape.add(y, b)
}

fn layer_norm(tape: &mut Tape, p: &Bound, name: &str, x: Var) -> Result<Var> {
    let y = tape.layer_norm(x, LN_EPS)?;
    let y = tape.mul(y, p.get(&format!("{name}.weight"))?)?;
    tape.add(y, p.get(&format!("{name}.bias"))?)
}

/// Class-token representation `[N, dim]` of a patch batch.
pub fn forward_backbone(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ViTConfig,
    patches: &PatchBatch,
) -> Result<Var> {
    Ok(trace_backbone(tape, p, cfg, patches)?.rep)
}

/// [`forward_backbone`] that also keeps the attention probabilities.
pub fn trace_backbone(
    tape: &mut Tape,
    p: &Bound,
    cfg: &ViTConfig,
    patches: &PatchBatch,
) -> Result<BackboneTrace> {
    let (n, t) = (patches.len(), patches.tokens());
    if t != cfg.tokens() || patches.patch_dim() != cfg.patch_dim() {
        return Err(Error::Shape {
            op: "forward_backbone",
            lhs: patches.as_array().shape().to_vec(),
            rhs: vec![n, cfg.tokens(), cfg.patch_dim()],
        });
    }
    let (d, heads, dh) = (cfg.dim, cfg.heads, cfg.head_dim());
    let t1 = t + 1;

    let x = tape.constant(patches.as_array().clone());
    let emb = linear(tape, p, "patch_embed", x)?;
    let cls = tape.broadcast_to(p.get("cls_token")?, &[n, 1, d])?;
    let mut h = tape.concat(&[cls, emb], 1)?;
    h = tape.add(h, p.get("pos_embed")?)?;

    let mut attention = Vec::with_capacity(cfg.depth);
    let scale = 1.0 / (dh as f64).sqrt();
    for blk in 0..cfg.depth {
        let pre = format!("blocks.{blk}");
        let a = layer_norm(tape, p, &format!("{pre}.norm1"), h)?;
        let qkv = linear(tape, p, &format!("{pre}.attn.qkv"), a)?;
        let qkv = tape.reshape(qkv, &[n, t1, 3, heads, dh])?;
        let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
        let qkv = tape.reshape(qkv, &[3, n * heads, t1, dh])?;
        let mut parts = [qkv; 3];
        for (i, part) in parts.iter_mut().enumerate() {
            let s = tape.slice(qkv, 0, i, 1)?;
            *part = tape.reshape(s, &[n * heads, t1, dh])?;
        }
        let [q, k, v] = parts;
        let scores = tape.batch_matmul(q, k, true)?;
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax(scores, 2)?;
        attention.push(probs);
        let ctx = tape.batch_matmul(probs, v, false)?;
        let ctx = tape.reshape(ctx, &[n, heads, t1, dh])?;
        let ctx = tape.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = tape.reshape(ctx, &[n, t1, d])?;
        let out = linear(tape, p, &format!("{pre}.attn.proj"), ctx)?;
        h = tape.add(h, out)?;

        let m = layer_norm(tape, p, &format!("{pre}.norm2"), h)?;
        let m = linear(tape, p, &format!("{pre}.mlp.fc1"), m)?;
        let m = tape.gelu(m);
        let m = linear(tape, p, &format!("{pre}.mlp.fc2"), m)?;
        h = tape.add(h, m)?;
    }
    h = layer_norm(tape, p, "norm", h)?;
    let cls_out = tape.slice(h, 1, 0, 1)?;
    let rep = tape.reshape(cls_out, &[n, d])?;
    Ok(BackboneTrace { rep, attention })
}

/// Linear, batch norm (affine unless `starred`), optional ReLU.
#[allow(clippy::too_many_arguments)]
fn linear_bn(
    tape: &mut Tape,
    p: &Bound,
    buffers: &ParamSet,
    name: &str,
    x: Var,
    relu: bool,
    starred: bool,
    mode: BnMode,
    stats: &mut HeadStats,
) -> Result<Var> {
    let y = linear(tape, p, name, x)?;
    let bn = format!("{name}.bn");
    let mut y = match mode {
        BnMode::Train => {
            let (y, s) = tape.batch_norm(y, BN_EPS)?;
            stats.push((bn.clone(), s));
            y
        }
        BnMode::Eval => {
            let mean = buffers.require(&format!("{bn}.running_mean"))?;
            let var = buffers.require(&format!("{bn}.running_var"))?;
            let inv = var.map(|v| 1.0 / (v + BN_EPS).sqrt());
            let shift = Array::from_fn(mean.shape(), |i| -mean.data()[i] * inv.data()[i]);
            let inv = tape.constant(inv);
            let shift = tape.constant(shift);
            let y = tape.mul(y, inv)?;
            tape.add(y, shift)?
        }
    };
    if !starred {
        y = tape.mul(y, p.get(&format!("{bn}.weight"))?)?;
        y = tape.add(y, p.get(&format!("{bn}.bias"))?)?;
    }
    if relu {
        y = tape.relu(y);
    }
    Ok(y)
}

/// Projection head: two `Linear + BN + ReLU` layers then `Linear + BN*`.
pub fn forward_projection(
    tape: &mut Tape,
    p: &Bound,
    buffers: &ParamSet,
    rep: Var,
    mode: BnMode,
    stats: &mut HeadStats,
) -> Result<Var> {
    let x = linear_bn(tape, p, buffers, "proj.0", rep, true, false, mode, stats)?;
    let x = linear_bn(tape, p, buffers, "proj.1", x, true, false, mode, stats)?;
    linear_bn(tape, p, buffers, "proj.2", x, false, true, mode, stats)
}

/// Prediction head: `Linear + BN + ReLU` then `Linear + BN*`.
pub fn forward_prediction(
    tape: &mut Tape,
    p: &Bound,
    buffers: &ParamSet,
    z: Var,
    mode: BnMode,
    stats: &mut HeadStats,
) -> Result<Var> {
    let x = linear_bn(tape, p, buffers, "pred.0", z, true, false, mode, stats)?;
    linear_bn(tape, p, buffers, "pred.1", x, false, true, mode, stats)
}

/// Projected `z = G(rep)` and predicted `h = H(z)`.
pub fn forward_heads(
    tape: &mut Tape,
    p: &Bound,
    buffers: &ParamSet,
    rep: Var,
    mode: BnMode,
    stats: &mut HeadStats,
) -> Result<(Var, Var)> {
    let z = forward_projection(tape, p, buffers, rep, mode, stats)?;
    let h = forward_prediction(tape, p, buffers, z, mode, stats)?;
    Ok((z, h))
}

/// Folds observed batch statistics into the running averages.
pub fn update_running_stats(buffers: &mut ParamSet, stats: &HeadStats, batch: usize) {
    let unbias = if batch > 1 {
        batch as f64 / (batch - 1) as f64
    } else {
        1.0
    };
    let keep = 1.0 - BN_RUNNING_MOMENTUM;
    for (name, s) in stats {
        if let Some(rm) = buffers.get_mut(&format!("{name}.running_mean")) {
            for (r, m) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = keep * *r + BN_RUNNING_MOMENTUM * m;
            }
        }
        if let Some(rv) = buffers.get_mut(&format!("{name}.running_var")) {
            for (r, v) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = keep * *r + BN_RUNNING_MOMENTUM * v * unbias;
            }
        }
    }
}

/// Backbone representations of a batch, without gradient tracking.
pub fn represent(params: &ParamSet, cfg: &ViTConfig, patches: &PatchBatch) -> Result<Array> {
    let mut tape = Tape::new();
    let bound = bind(&mut tape, params, false);
    let rep = forward_backbone(&mut tape, &bound, cfg, patches)?;
    Ok(tape.value(rep).clone())
}
