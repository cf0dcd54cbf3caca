//! Mix-to-origin, mix-to-mix and origin-to-origin contrastive losses.
//!
//! Every loss is a weighted negative log-likelihood over the rows of
//! `softmax(cos(h, z) / tau)`; the softmax denominator runs over all `N`
//! keys, positives included. Target-branch embeddings are cut from the
//! gradient with a stop-gradient.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::numerics::{Array, Tape, Var};
use crate::patchmix::MixPlan;

/// Temperature used for all three losses.
pub const DEFAULT_TEMPERATURE: f64 = 0.2;

/// Loss values in nats.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossReport {
    pub l_mto: f64,
    pub l_mtm: f64,
    pub l_oto: f64,
    pub l_total: f64,
}

impl LossReport {
    pub const CSV_HEADER: &'static str = "step,l_mto,l_mtm,l_oto,l_total,lr,mu,wd";

    /// One training-log line matching [`Self::CSV_HEADER`].
    pub fn csv_row(&self, step: usize, lr: f64, mu: f64, wd: f64) -> String {
        let mut s = String::new();
        write!(
            s,
            "{step},{},{},{},{},{lr},{mu},{wd}",
            self.l_mto, self.l_mtm, self.l_oto, self.l_total
        )
        .expect("writing to a String");
        s
    }
}

/// Embeddings and targets for one total-loss evaluation.
#[derive(Clone, Debug)]
pub struct ContrastBatch {
    pub h_mix1: Array,
    pub h_view2: Array,
    pub z_view1: Array,
    pub z_view2: Array,
    pub z_mix2: Array,
    pub plan: MixPlan,
    pub temperature: f64,
    /// Divide mix-to-mix weights by their row sum.
    pub normalize_mtm: bool,
}

fn check_temperature(tau: f64) -> Result<()> {
    if tau.is_finite() && tau > 0.0 {
        Ok(())
    } else {
        Err(Error::invalid(format!("temperature {tau} must be positive")))
    }
}

fn check_pair(a: &Array, b: &Array) -> Result<()> {
    if a.ndim() != 2 || a.shape() != b.shape() {
        return Err(Error::Shape {
            op: "contrastive pair",
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    for (x, tag) in [(a, "query"), (b, "key")] {
        if !x.all_finite() {
            return Err(Error::NonFinite(format!("{tag} embeddings")));
        }
    }
    Ok(())
}

/// `out[i][t] = <a_i, b_t> / (|a_i| |b_t|)`.
pub fn cosine_sim_matrix(a: &Array, b: &Array) -> Result<Array> {
    check_pair(a, b)?;
    let mut tape = Tape::new();
    let a = tape.constant(a.clone());
    let b = tape.constant(b.clone());
    let s = cosine_logits(&mut tape, a, b, 1.0)?;
    Ok(tape.value(s).clone())
}

/// `cos(h_i, z_t) / tau` as an `[N, N]` tape node.
pub fn cosine_logits(tape: &mut Tape, h: Var, z: Var, tau: f64) -> Result<Var> {
    check_temperature(tau)?;
    let hn = tape.l2_normalize(h)?;
    let zn = tape.l2_normalize(z)?;
    let zt = tape.transpose(zn)?;
    let sim = tape.matmul(hn, zt)?;
    Ok(tape.scale(sim, 1.0 / tau))
}

/// Dense `[N, N]` weight matrix; duplicate targets accumulate.
fn scatter_weights(n: usize, targets: &[Vec<usize>], weights: Option<&[Vec<f64>]>) -> Result<Array> {
    if targets.len() != n {
        return Err(Error::invalid(format!(
            "{} target rows for a batch of {n}",
            targets.len()
        )));
    }
    let mut w = Array::zeros(&[n, n]);
    for (i, row) in targets.iter().enumerate() {
        if let Some(ws) = weights {
            if ws[i].len() != row.len() {
                return Err(Error::invalid(format!(
                    "row {i}: {} weights for {} targets",
                    ws[i].len(),
                    row.len()
                )));
            }
        }
        for (j, &t) in row.iter().enumerate() {
            if t >= n {
                return Err(Error::invalid(format!("row {i}: target {t} out of range for {n} keys")));
            }
            w.row_mut(i)[t] += weights.map_or(1.0, |ws| ws[i][j]);
        }
    }
    Ok(w)
}

/// `-scale * sum_i sum_j w[i][j] log softmax_i(logits)[targets[i][j]]`.
fn weighted_nll(
    tape: &mut Tape,
    logits: Var,
    targets: &[Vec<usize>],
    weights: Option<&[Vec<f64>]>,
    scale: f64,
) -> Result<Var> {
    let n = tape.shape(logits)[0];
    if weights.is_some_and(|w| w.len() != n) {
        return Err(Error::invalid(format!("weight rows do not match batch {n}")));
    }
    let w = scatter_weights(n, targets, weights)?;
    let logp = tape.log_softmax(logits, 1)?;
    let w = tape.constant(w);
    let picked = tape.mul(logp, w)?;
    let total = tape.sum(picked);
    let loss = tape.scale(total, -scale);
    if !tape.value(loss).item().is_finite() {
        return Err(Error::NonFinite("contrastive loss".into()));
    }
    Ok(loss)
}

/// Mix-to-origin loss on tape; `z` is detached here.
pub fn mto_on_tape(tape: &mut Tape, h_mix1: Var, z_view2: Var, y_mto: &[Vec<usize>], tau: f64) -> Result<Var> {
    let z = tape.stop_gradient(z_view2);
    let logits = cosine_logits(tape, h_mix1, z, tau)?;
    let n = y_mto.len();
    let m = y_mto.first().map_or(0, Vec::len);
    if n == 0 || m == 0 {
        return Err(Error::invalid("mix-to-origin targets are empty"));
    }
    weighted_nll(tape, logits, y_mto, None, 1.0 / (n * m) as f64)
}

/// Mix-to-mix loss on tape; `z` is detached here.
pub fn mtm_on_tape(
    tape: &mut Tape,
    h_mix1: Var,
    z_mix2: Var,
    y_mtm: &[Vec<usize>],
    w_mtm: &[Vec<f64>],
    tau: f64,
) -> Result<Var> {
    let z = tape.stop_gradient(z_mix2);
    let logits = cosine_logits(tape, h_mix1, z, tau)?;
    let n = y_mtm.len();
    if n == 0 {
        return Err(Error::invalid("mix-to-mix targets are empty"));
    }
    weighted_nll(tape, logits, y_mtm, Some(w_mtm), 1.0 / n as f64)
}

/// Origin-to-origin InfoNCE on tape; `z` is detached here.
pub fn oto_on_tape(tape: &mut Tape, h_view2: Var, z_view1: Var, tau: f64) -> Result<Var> {
    let z = tape.stop_gradient(z_view1);
    let logits = cosine_logits(tape, h_view2, z, tau)?;
    let n = tape.shape(logits)[0];
    let diag: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();
    weighted_nll(tape, logits, &diag, None, 1.0 / n as f64)
}

/// Row-normalized copy of mix-to-mix weights.
pub fn normalized_weights(w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    w.iter()
        .map(|row| {
            let s: f64 = row.iter().sum();
            row.iter().map(|v| v / s).collect()
        })
        .collect()
}

/// Tape nodes of the three losses and their sum.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub l_mto: Var,
    pub l_mtm: Var,
    pub l_oto: Var,
    pub l_total: Var,
}

impl LossVars {
    pub fn report(&self, tape: &Tape) -> LossReport {
        LossReport {
            l_mto: tape.value(self.l_mto).item(),
            l_mtm: tape.value(self.l_mtm).item(),
            l_oto: tape.value(self.l_oto).item(),
            l_total: tape.value(self.l_total).item(),
        }
    }
}

/// Total objective on tape. Only the `h` inputs receive gradient.
#[allow(clippy::too_many_arguments)]
pub fn total_on_tape(
    tape: &mut Tape,
    h_mix1: Var,
    h_view2: Var,
    z_view1: Var,
    z_view2: Var,
    z_mix2: Var,
    plan: &MixPlan,
    tau: f64,
    normalize_mtm: bool,
) -> Result<LossVars> {
    let n = plan.cfg.batch;
    for v in [h_mix1, h_view2, z_view1, z_view2, z_mix2] {
        if tape.shape(v).first() != Some(&n) {
            return Err(Error::Shape {
                op: "total loss",
                lhs: tape.shape(v).to_vec(),
                rhs: vec![n],
            });
        }
    }
    let l_mto = mto_on_tape(tape, h_mix1, z_view2, &plan.y_mto, tau)?;
    let w = if normalize_mtm {
        normalized_weights(&plan.w_mtm)
    } else {
        plan.w_mtm.clone()
    };
    let l_mtm = mtm_on_tape(tape, h_mix1, z_mix2, &plan.y_mtm, &w, tau)?;
    let l_oto = oto_on_tape(tape, h_view2, z_view1, tau)?;
    let s = tape.add(l_mto, l_mtm)?;
    let l_total = tape.add(s, l_oto)?;
    Ok(LossVars {
        l_mto,
        l_mtm,
        l_oto,
        l_total,
    })
}

fn eval_pair(h: &Array, z: &Array, f: impl FnOnce(&mut Tape, Var, Var) -> Result<Var>) -> Result<f64> {
    check_pair(h, z)?;
    let mut tape = Tape::new();
    let h = tape.constant(h.clone());
    let z = tape.constant(z.clone());
    let l = f(&mut tape, h, z)?;
    Ok(tape.value(l).item())
}

pub fn loss_mto(h_mix1: &Array, z_view2: &Array, y_mto: &[Vec<usize>], tau: f64) -> Result<f64> {
    eval_pair(h_mix1, z_view2, |t, h, z| mto_on_tape(t, h, z, y_mto, tau))
}

pub fn loss_mtm(
    h_mix1: &Array,
    z_mix2: &Array,
    y_mtm: &[Vec<usize>],
    w_mtm: &[Vec<f64>],
    tau: f64,
) -> Result<f64> {
    eval_pair(h_mix1, z_mix2, |t, h, z| mtm_on_tape(t, h, z, y_mtm, w_mtm, tau))
}

pub fn loss_oto(h_view2: &Array, z_view1: &Array, tau: f64) -> Result<f64> {
    eval_pair(h_view2, z_view1, |t, h, z| oto_on_tape(t, h, z, tau))
}

pub fn loss_total(cb: &ContrastBatch) -> Result<LossReport> {
    check_pair(&cb.h_mix1, &cb.z_view2)?;
    check_pair(&cb.h_mix1, &cb.z_mix2)?;
    check_pair(&cb.h_view2, &cb.z_view1)?;
    let mut tape = Tape::new();
    let vars = [&cb.h_mix1, &cb.h_view2, &cb.z_view1, &cb.z_view2, &cb.z_mix2].map(|a| tape.constant(a.clone()));
    let out = total_on_tape(
        &mut tape,
        vars[0],
        vars[1],
        vars[2],
        vars[3],
        vars[4],
        &cb.plan,
        cb.temperature,
        cb.normalize_mtm,
    )?;
    Ok(out.report(&tape))
}
