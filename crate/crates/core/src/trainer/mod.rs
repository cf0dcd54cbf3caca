//! Pretraining loop: two augmented views, patch mixing, base and momentum
//! forward passes, the total loss, AdamW on the base encoder, then the EMA
//! update of the momentum copy.

mod optim;
mod state;

pub use optim::{clip_grad_norm, AdamW};
pub use state::{LogRow, TrainState};

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::augment::{augment_view, AugConfig, View};
use crate::encoder::{
    bind, ema_update, forward_backbone, forward_heads, forward_projection, is_decay_exempt,
    update_running_stats, BnMode, HeadStats, ParamSet, ViTConfig,
};
use crate::error::{Error, Result};
use crate::numerics::Tape;
use crate::objectives::{total_on_tape, LossReport, DEFAULT_TEMPERATURE};
use crate::patch_ops::{patchify, ImageBatch, PatchBatch, Permutation};
use crate::patchmix::{apply_mix, plan_mix, MixConfig};

/// Arithmetic width of parameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    /// Parameters are rounded to f32 after every update.
    F32,
}

/// Which losses contribute to the gradient.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LossTerms {
    pub mto: bool,
    pub mtm: bool,
    pub oto: bool,
}

impl LossTerms {
    pub const ALL: Self = Self {
        mto: true,
        mtm: true,
        oto: true,
    };
    pub const OTO_ONLY: Self = Self {
        mto: false,
        mtm: false,
        oto: true,
    };
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub model: ViTConfig,
    pub aug: AugConfig,
    pub epochs: usize,
    pub warmup_epochs: usize,
    /// Overrides `epochs * steps_per_epoch` when set.
    pub total_steps: Option<usize>,
    pub base_lr: f64,
    pub batch: usize,
    pub mix: usize,
    pub temperature: f64,
    pub wd: (f64, f64),
    pub mu: (f64, f64),
    pub seed: u64,
    pub precision: Precision,
    pub normalize_mtm: bool,
    pub grad_clip: Option<f64>,
    pub terms: LossTerms,
    /// Save a checkpoint every this many steps; 0 disables.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            model: ViTConfig::micro(),
            aug: AugConfig::default(),
            epochs: 100,
            warmup_epochs: 10,
            total_steps: None,
            base_lr: 4e-3,
            batch: 32,
            mix: 3,
            temperature: DEFAULT_TEMPERATURE,
            wd: (0.04, 0.4),
            mu: (0.996, 1.0),
            seed: 0,
            precision: Precision::F64,
            normalize_mtm: false,
            grad_clip: None,
            terms: LossTerms::ALL,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    /// 300-step run of the micro model on small synthetic images.
    pub fn smoke(seed: u64) -> Self {
        Self {
            aug: AugConfig::synthetic(),
            epochs: 38,
            warmup_epochs: 3,
            total_steps: Some(300),
            base_lr: 1e-3,
            mix: 2,
            temperature: 0.1,
            mu: (0.99, 1.0),
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.aug.validate()?;
        if self.epochs == 0 || self.warmup_epochs >= self.epochs {
            return Err(Error::Config(format!(
                "warmup epochs {} must be below epochs {}",
                self.warmup_epochs, self.epochs
            )));
        }
        MixConfig::new(self.batch, self.mix, self.model.tokens())
            .map_err(|e| Error::Config(e.to_string()))?;
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature {} must be positive", self.temperature)));
        }
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return Err(Error::Config(format!("base lr {} must be non-negative", self.base_lr)));
        }
        if self.wd.0 < 0.0 || self.wd.1 < 0.0 {
            return Err(Error::Config("weight decay must be non-negative".into()));
        }
        for m in [self.mu.0, self.mu.1] {
            if !(0.0..=1.0).contains(&m) {
                return Err(Error::Config(format!("momentum {m} outside [0, 1]")));
            }
        }
        if !(self.terms.mto || self.terms.mtm || self.terms.oto) {
            return Err(Error::Config("at least one loss term must be enabled".into()));
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("grad clip must be positive".into()));
        }
        if self.total_steps == Some(0) {
            return Err(Error::Config("total steps must be positive".into()));
        }
        Ok(())
    }

    /// `floor(dataset / batch)`.
    pub fn steps_per_epoch(&self, dataset: usize) -> Result<usize> {
        let spe = dataset / self.batch;
        if spe == 0 {
            return Err(Error::invalid(format!(
                "dataset of {dataset} images is smaller than one batch of {}",
                self.batch
            )));
        }
        Ok(spe)
    }

    pub fn total_steps(&self, dataset: usize) -> Result<usize> {
        let spe = self.steps_per_epoch(dataset)?;
        Ok(self.total_steps.unwrap_or(self.epochs * spe))
    }

    /// Warmup length in steps, scaled with `total_steps` when that is set.
    pub fn warmup_steps(&self, dataset: usize) -> Result<usize> {
        let spe = self.steps_per_epoch(dataset)?;
        Ok(match self.total_steps {
            Some(total) => total * self.warmup_epochs / self.epochs,
            None => self.warmup_epochs * spe,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScheduleKind {
    /// Linear `0 -> start` over the warmup, then half-cosine `start -> end`.
    WarmupCosine,
    /// Half-cosine `start -> end` over all steps.
    Cosine,
}

/// Scheduled value at `step` of `total`. Endpoints are exact.
pub fn schedule(step: usize, total: usize, warmup: usize, start: f64, end: f64, kind: ScheduleKind) -> f64 {
    let warmup = match kind {
        ScheduleKind::WarmupCosine => warmup.min(total),
        ScheduleKind::Cosine => 0,
    };
    if step < warmup {
        return start * step as f64 / warmup as f64;
    }
    let span = total - warmup;
    if span == 0 || step == warmup {
        return start;
    }
    if step >= total {
        return end;
    }
    let p = (step - warmup) as f64 / span as f64;
    let c = 0.5 * (1.0 + (std::f64::consts::PI * p).cos());
    start * c + end * (1.0 - c)
}

/// Learning rate, weight decay and momentum at one step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepSchedule {
    pub lr: f64,
    pub wd: f64,
    pub mu: f64,
}

impl StepSchedule {
    pub fn at(cfg: &TrainConfig, step: usize, total: usize, warmup: usize) -> Self {
        Self {
            lr: schedule(step, total, warmup, cfg.base_lr, 0.0, ScheduleKind::WarmupCosine),
            wd: schedule(step, total, 0, cfg.wd.0, cfg.wd.1, ScheduleKind::Cosine),
            mu: schedule(step, total, 0, cfg.mu.0, cfg.mu.1, ScheduleKind::Cosine),
        }
    }
}

/// Phases of one step, in the order they ran.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepEvent {
    /// Momentum parameters read for the target branch.
    MomentumForward,
    BaseForward,
    OptimizerUpdate,
    EmaUpdate,
}

#[derive(Clone, Debug)]
pub struct StepOutcome {
    pub report: LossReport,
    pub events: Vec<StepEvent>,
}

/// RNG for augmentation and mixing at `step`.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Sampling order of epoch `epoch`.
pub fn epoch_order(seed: u64, epoch: usize, len: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5e_ed0f_e90c);
    rng.set_stream(epoch as u64);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx
}

fn round_f32(set: &mut ParamSet) {
    for (_, a) in set.iter_mut() {
        a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
    }
}

/// Target-branch embeddings `G_xi(F_xi(x))` without gradient.
fn momentum_embed(state: &TrainState, cfg: &ViTConfig, pb: &PatchBatch) -> Result<crate::numerics::Array> {
    let mut tape = Tape::new();
    let p = bind(&mut tape, &state.xi.params, false);
    let rep = forward_backbone(&mut tape, &p, cfg, pb)?;
    let mut stats = HeadStats::new();
    let z = forward_projection(&mut tape, &p, &state.xi.buffers, rep, BnMode::Train, &mut stats)?;
    Ok(tape.value(z).clone())
}

/// One optimization step on `batch` at `state.step`. On error the state is
/// left untouched.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    batch: &ImageBatch,
    sched: StepSchedule,
    rng: &mut ChaCha8Rng,
) -> Result<StepOutcome> {
    let n = batch.len();
    if n != cfg.batch {
        return Err(Error::invalid(format!("batch of {n} images, expected {}", cfg.batch)));
    }
    let model = &state.theta.cfg;
    let mut events = Vec::with_capacity(4);

    let x1 = augment_view(batch, &cfg.aug, View::First, rng);
    let x2 = augment_view(batch, &cfg.aug, View::Second, rng);
    let pb1 = patchify(&x1, model.patch_side)?;
    let pb2 = patchify(&x2, model.patch_side)?;
    let mix_cfg = MixConfig::new(n, cfg.mix, pb1.tokens())?;
    let plan1 = plan_mix(mix_cfg, Permutation::sample(pb1.tokens(), rng))?;
    let plan2 = plan_mix(mix_cfg, Permutation::sample(pb2.tokens(), rng))?;
    let mix1 = apply_mix(&pb1, &plan1)?.patches;
    let mix2 = apply_mix(&pb2, &plan2)?.patches;

    let z1 = momentum_embed(state, model, &pb1)?;
    let z2 = momentum_embed(state, model, &pb2)?;
    let zmix2 = momentum_embed(state, model, &mix2)?;
    events.push(StepEvent::MomentumForward);

    let mut tape = Tape::new();
    let p = bind(&mut tape, &state.theta.params, true);
    let buffers = &state.theta.buffers;
    let mut stats_mix = HeadStats::new();
    let rep_mix = forward_backbone(&mut tape, &p, model, &mix1)?;
    let (_, h_mix1) = forward_heads(&mut tape, &p, buffers, rep_mix, BnMode::Train, &mut stats_mix)?;
    let mut stats_v2 = HeadStats::new();
    let rep2 = forward_backbone(&mut tape, &p, model, &pb2)?;
    let (_, h2) = forward_heads(&mut tape, &p, buffers, rep2, BnMode::Train, &mut stats_v2)?;
    events.push(StepEvent::BaseForward);

    let [z1, z2, zmix2] = [z1, z2, zmix2].map(|z| tape.constant(z));
    let losses = total_on_tape(
        &mut tape,
        h_mix1,
        h2,
        z1,
        z2,
        zmix2,
        &plan1,
        cfg.temperature,
        cfg.normalize_mtm,
    )?;
    let report = losses.report(&tape);
    let mut objective = None;
    for (on, v) in [
        (cfg.terms.mto, losses.l_mto),
        (cfg.terms.mtm, losses.l_mtm),
        (cfg.terms.oto, losses.l_oto),
    ] {
        if on {
            objective = Some(match objective {
                None => v,
                Some(acc) => tape.add(acc, v)?,
            });
        }
    }
    let objective = objective.ok_or_else(|| Error::Config("no loss term enabled".into()))?;
    if !tape.value(objective).item().is_finite() {
        log::error!("step {}: non-finite loss {report:?}; step skipped", state.step);
        return Err(Error::NonFinite(format!("loss at step {}", state.step)));
    }

    let mut grads_by_var = tape.backward(objective);
    let mut grads = ParamSet::new();
    for (name, _) in state.theta.params.iter() {
        if let Some(g) = grads_by_var.take(p.get(name)?) {
            grads.insert(name, g);
        }
    }
    if !grads.all_finite() {
        log::error!("step {}: non-finite gradient; step skipped", state.step);
        return Err(Error::NonFinite(format!("gradient at step {}", state.step)));
    }
    if let Some(max) = cfg.grad_clip {
        clip_grad_norm(&mut grads, max);
    }

    let mut theta = state.theta.params.clone();
    state
        .opt
        .step(&mut theta, &grads, sched.lr, sched.wd, is_decay_exempt)?;
    state.theta.params = theta;
    update_running_stats(&mut state.theta.buffers, &stats_mix, n);
    update_running_stats(&mut state.theta.buffers, &stats_v2, n);
    if cfg.precision == Precision::F32 {
        round_f32(&mut state.theta.params);
        round_f32(&mut state.theta.buffers);
    }
    events.push(StepEvent::OptimizerUpdate);

    ema_update(&state.theta, &mut state.xi, sched.mu)?;
    if cfg.precision == Precision::F32 {
        round_f32(&mut state.xi.params);
        round_f32(&mut state.xi.buffers);
    }
    events.push(StepEvent::EmaUpdate);

    state.history.push(LogRow {
        step: state.step,
        report,
        lr: sched.lr,
        mu: sched.mu,
        wd: sched.wd,
    });
    state.step += 1;
    Ok(StepOutcome { report, events })
}

/// Runs steps until `until` (or the schedule end) on `data`.
pub fn run_steps(state: &mut TrainState, cfg: &TrainConfig, data: &ImageBatch, until: Option<usize>) -> Result<()> {
    let spe = cfg.steps_per_epoch(data.len())?;
    let total = cfg.total_steps(data.len())?;
    let warmup = cfg.warmup_steps(data.len())?;
    let stop = until.map_or(total, |u| u.min(total));
    let mut order = (usize::MAX, Vec::new());
    while state.step < stop {
        let epoch = state.step / spe;
        if order.0 != epoch {
            order = (epoch, epoch_order(cfg.seed, epoch, data.len()));
        }
        let s = state.step % spe;
        let batch = data.select(&order.1[s * cfg.batch..(s + 1) * cfg.batch]);
        let sched = StepSchedule::at(cfg, state.step, total, warmup);
        let mut rng = step_rng(cfg.seed, state.step);
        let out = train_step(state, cfg, &batch, sched, &mut rng)?;
        if state.step % 50 == 0 || state.step == stop {
            log::info!("step {}/{total} l_total {:.4} lr {:.3e}", state.step, out.report.l_total, sched.lr);
        }
        state.epoch = state.step / spe;
        if cfg.checkpoint_every > 0 && state.step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &state.out_dir {
                let path = dir.join(format!("ckpt_{:06}.ckpt", state.step));
                state.to_checkpoint(cfg).save(&path)?;
            }
        }
    }
    Ok(())
}

/// Result of a pretraining run.
#[derive(Debug)]
pub struct PretrainOutcome {
    pub state: TrainState,
    pub final_checkpoint: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

/// Trains from scratch (or from `resume`) to the end of the schedule,
/// writing the CSV log and the final checkpoint into `out` when given.
pub fn pretrain(
    cfg: &TrainConfig,
    data: &ImageBatch,
    out: Option<&Path>,
    resume: Option<TrainState>,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::invalid("training data is empty"));
    }
    let mut state = match resume {
        Some(s) => s,
        None => TrainState::init(cfg)?,
    };
    if let Some(dir) = out {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        state.out_dir = Some(dir.to_path_buf());
    }
    run_steps(&mut state, cfg, data, None)?;
    let (mut final_checkpoint, mut log) = (None, None);
    if let Some(dir) = out {
        let lp = dir.join("train_log.csv");
        std::fs::write(&lp, state.csv_log()).map_err(|e| Error::io(&lp, e))?;
        let cp = dir.join("final.ckpt");
        state.to_checkpoint(cfg).save(&cp)?;
        log = Some(lp);
        final_checkpoint = Some(cp);
    }
    Ok(PretrainOutcome {
        state,
        final_checkpoint,
        log,
    })
}
