//! Self-verification behind `oracle-check` and `grad-check`.

use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::numerics::{check_gradients, Array, Tape, Var};
use crate::objectives::{total_on_tape, LossVars};
use crate::patch_ops::{shuffle, unshuffle, PatchBatch, Permutation};
use crate::patchmix::{apply_mix, flat_mix_index, naive_mix_oracle, plan_mix, MixConfig, MixPlan};

pub const BATCHES: std::ops::RangeInclusive<usize> = 2..=6;
pub const MIXES: std::ops::RangeInclusive<usize> = 1..=4;
pub const TOKENS: [usize; 5] = [4, 8, 9, 16, 196];
pub const PERMS_PER_CELL: usize = 5;
pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const GRAD_STEP: f64 = 1e-3;

#[derive(Clone, Debug, Default)]
pub struct OracleReport {
    /// Instances compared against the reference mixer.
    pub checked: usize,
    /// Instances with `M > N` that were refused, as they should be.
    pub rejected: usize,
    /// One line per failed instance, with the parameters to reproduce it.
    pub failures: Vec<String>,
}

impl OracleReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

/// Random patch batch with a `1 x T` grid of 2x2 single-channel patches.
pub fn random_patches(n: usize, t: usize, rng: &mut ChaCha8Rng) -> PatchBatch {
    let a = Array::from_fn(&[n, t, 4], |_| rng.gen::<f64>());
    PatchBatch::from_parts(a, 2, (1, t), 1).expect("consistent patch layout")
}

fn check_instance(pb: &PatchBatch, cfg: MixConfig, perm: &Permutation, tamper: &dyn Fn(&mut MixPlan)) -> Result<Option<String>> {
    let reference = naive_mix_oracle(pb, cfg, perm)?;
    let mut plan = plan_mix(cfg, perm.clone())?;
    tamper(&mut plan);
    let mixed = match apply_mix(pb, &plan) {
        Ok(m) => m,
        Err(e) => return Ok(Some(format!("apply_mix failed: {e}"))),
    };
    if mixed.patches != reference.patches {
        return Ok(Some("mixed patches differ from the reference mixer".into()));
    }
    if mixed.plan != reference.plan {
        return Ok(Some("plan differs from the reference plan".into()));
    }
    if unshuffle(&shuffle(pb, perm)?, perm)? != *pb {
        return Ok(Some("unshuffle does not invert shuffle".into()));
    }
    let (n, t) = (cfg.batch, cfg.tokens);
    for i in 0..n {
        for j in 0..t {
            if mixed.patches.patch(i, j) != pb.patch(plan.source(i, j), j) {
                return Ok(Some(format!("patch ({i}, {j}) is not position {j} of its source")));
            }
        }
    }
    for j in 0..t {
        let key = |p: &[f64]| p.iter().map(|v| v.to_bits()).collect::<Vec<u64>>();
        let mut before: Vec<_> = (0..n).map(|i| key(pb.patch(i, j))).collect();
        let mut after: Vec<_> = (0..n).map(|i| key(mixed.patches.patch(i, j))).collect();
        before.sort();
        after.sort();
        if before != after {
            return Ok(Some(format!("position {j} does not conserve its patch multiset")));
        }
    }
    let m = cfg.mix as f64;
    for row in &plan.w_mtm {
        for (j, &w) in row.iter().enumerate() {
            let expect = 1.0 - (m - 1.0 - j as f64).abs() / m;
            if (w - expect).abs() > 1e-12 {
                return Ok(Some(format!("w_mtm[{j}]={w}, expected {expect}")));
            }
        }
        if (row.iter().sum::<f64>() - m).abs() > 1e-12 {
            return Ok(Some("w_mtm row does not sum to M".into()));
        }
    }
    Ok(None)
}

/// Runs the full grid; `tamper` edits each plan before it is applied.
pub fn oracle_grid(seed: u64, tamper: &dyn Fn(&mut MixPlan)) -> Result<OracleReport> {
    let mut report = OracleReport::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for n in BATCHES {
        for m in MIXES {
            for t in TOKENS {
                for p in 0..PERMS_PER_CELL {
                    let cfg = match MixConfig::new(n, m, t) {
                        Ok(c) if m <= n => c,
                        Ok(_) => {
                            report.failures.push(format!("N={n} M={m} T={t}: M > N was accepted"));
                            continue;
                        }
                        Err(_) if m > n => {
                            report.rejected += 1;
                            continue;
                        }
                        Err(e) => {
                            report.failures.push(format!("N={n} M={m} T={t}: {e}"));
                            continue;
                        }
                    };
                    let pb = random_patches(n, t, &mut rng);
                    let perm = Permutation::sample(t, &mut rng);
                    report.checked += 1;
                    if let Some(msg) = check_instance(&pb, cfg, &perm, tamper)? {
                        report.failures.push(format!(
                            "N={n} M={m} T={t} perm#{p} seed={seed} perm={:?}: {msg}",
                            perm.forward()
                        ));
                    }
                }
            }
        }
    }
    let want = [7usize, 8, 0, 1, 2];
    let w = [1.0 / 3.0, 2.0 / 3.0, 1.0, 2.0 / 3.0, 1.0 / 3.0];
    let plan = plan_mix(MixConfig::new(9, 3, 9)?, Permutation::identity(9))?;
    if plan.y_mtm[0] != want || plan.w_mtm[0].iter().zip(w).any(|(a, b)| (a - b).abs() > 1e-12) {
        report
            .failures
            .push(format!("N=9 M=3 row 0: y_mtm={:?} w={:?}", plan.y_mtm[0], plan.w_mtm[0]));
    }
    let q = flat_mix_index(3, 4);
    if q != [0, 5, 10, 3, 4, 9, 2, 7, 8, 1, 6, 11] {
        report.failures.push(format!("N=3 M=4 flat index {q:?}"));
    }
    Ok(report)
}

pub type LossFn<'a> = &'a dyn Fn(&mut Tape, [Var; 5], &MixPlan) -> Result<LossVars>;

#[derive(Clone, Debug)]
pub struct GradReport {
    /// Worst relative error per loss over both query-branch inputs.
    pub per_loss: Vec<(&'static str, f64)>,
    /// Largest gradient magnitude reaching any target-branch input.
    pub target_grad_max: f64,
}

impl GradReport {
    pub fn passed(&self) -> bool {
        self.per_loss.iter().all(|(_, e)| *e <= GRAD_TOLERANCE) && self.target_grad_max == 0.0
    }

    pub fn text(&self) -> String {
        let mut s = String::new();
        for (name, e) in &self.per_loss {
            writeln!(s, "{name}_max_rel_err={e:e}").expect("writing to a String");
        }
        writeln!(s, "target_branch_grad_max={:e}", self.target_grad_max).expect("writing to a String");
        s
    }
}

pub fn default_loss(tape: &mut Tape, v: [Var; 5], plan: &MixPlan) -> Result<LossVars> {
    total_on_tape(tape, v[0], v[1], v[2], v[3], v[4], plan, 0.2, false)
}

/// Finite differences of every loss w.r.t. the query-branch embeddings
/// (mixed view 1 and view 2), batch 4, width 8, step 1e-3.
pub fn grad_check(seed: u64, loss: LossFn<'_>) -> Result<GradReport> {
    grad_check_with_step(seed, GRAD_STEP, loss)
}

pub fn grad_check_with_step(seed: u64, step: f64, loss: LossFn<'_>) -> Result<GradReport> {
    let (n, d, m) = (4, 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let plan = plan_mix(MixConfig::new(n, m, 9)?, Permutation::sample(9, &mut rng))?;
    let inputs: [Array; 5] = std::array::from_fn(|_| Array::from_fn(&[n, d], |_| rng.gen::<f64>() * 2.0 - 1.0));
    let pick: [(&'static str, fn(&LossVars) -> Var); 4] = [
        ("l_mto", |l| l.l_mto),
        ("l_mtm", |l| l.l_mtm),
        ("l_oto", |l| l.l_oto),
        ("l_total", |l| l.l_total),
    ];
    let mut per_loss = Vec::new();
    for (name, sel) in pick {
        let mut worst: f64 = 0.0;
        for leaf in 0..2 {
            let f = |tape: &mut Tape, x: Var| -> Result<Var> {
                let vars: [Var; 5] =
                    std::array::from_fn(|k| if k == leaf { x } else { tape.constant(inputs[k].clone()) });
                Ok(sel(&loss(tape, vars, &plan)?))
            };
            let check = check_gradients(f, &inputs[leaf], step)?;
            worst = if check.non_finite.is_empty() {
                worst.max(check.max_rel_err)
            } else {
                f64::INFINITY
            };
        }
        per_loss.push((name, worst));
    }
    let mut tape = Tape::new();
    let vars: [Var; 5] = std::array::from_fn(|k| tape.leaf(inputs[k].clone()));
    let out = loss(&mut tape, vars, &plan)?;
    let g = tape.backward(out.l_total);
    let target_grad_max = vars[2..]
        .iter()
        .flat_map(|&v| g.wrt(v).data().to_vec())
        .fold(0.0f64, |a, v| a.max(v.abs()));
    Ok(GradReport {
        per_loss,
        target_grad_max,
    })
}
