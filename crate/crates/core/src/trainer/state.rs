use std::path::PathBuf;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{AdamW, Precision, TrainConfig};
use crate::encoder::{BlobDtype, Checkpoint, EncoderParams, MomentumParams};
use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::objectives::LossReport;

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRow {
    pub step: usize,
    pub report: LossReport,
    pub lr: f64,
    pub mu: f64,
    pub wd: f64,
}

/// Everything needed to continue a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Steps completed.
    pub step: usize,
    pub epoch: usize,
    pub theta: EncoderParams,
    pub xi: MomentumParams,
    pub opt: AdamW,
    pub history: Vec<LogRow>,
    /// Directory for periodic checkpoints.
    pub out_dir: Option<PathBuf>,
}

impl TrainState {
    /// Fresh parameters from `cfg.seed`; the momentum copy starts equal to
    /// the tracked base parameters.
    pub fn init(cfg: &TrainConfig) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(u64::MAX);
        let mut theta = EncoderParams::init(&cfg.model, &mut rng)?;
        if cfg.precision == Precision::F32 {
            for (_, a) in theta.params.iter_mut() {
                a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
            }
        }
        let xi = theta.momentum_copy();
        let opt = AdamW::new(&theta.params);
        Ok(Self {
            step: 0,
            epoch: 0,
            theta,
            xi,
            opt,
            history: Vec::new(),
            out_dir: None,
        })
    }

    pub fn csv_log(&self) -> String {
        let mut s = String::from(LossReport::CSV_HEADER);
        s.push('\n');
        for r in &self.history {
            s.push_str(&r.report.csv_row(r.step, r.lr, r.mu, r.wd));
            s.push('\n');
        }
        s
    }

    pub fn to_checkpoint(&self, cfg: &TrainConfig) -> Checkpoint {
        let dtype = match cfg.precision {
            Precision::F64 => BlobDtype::F64,
            Precision::F32 => BlobDtype::F32,
        };
        let mut ck = Checkpoint::new(self.theta.cfg.clone(), dtype);
        ck.set_meta("step", self.step);
        ck.set_meta("epoch", self.epoch);
        ck.set_meta("seed", cfg.seed);
        ck.set_meta("adam_t", self.opt.t);
        ck.put_set("theta", &self.theta.params);
        ck.put_set("theta_buffers", &self.theta.buffers);
        ck.put_set("xi", &self.xi.params);
        ck.put_set("xi_buffers", &self.xi.buffers);
        ck.put_set("adam_m", &self.opt.m);
        ck.put_set("adam_v", &self.opt.v);
        let rows: Vec<f64> = self
            .history
            .iter()
            .flat_map(|r| {
                let l = r.report;
                [r.step as f64, l.l_mto, l.l_mtm, l.l_oto, l.l_total, r.lr, r.mu, r.wd]
            })
            .collect();
        let hist = Array::new(&[self.history.len(), 8], rows).expect("8 columns per row");
        ck.blobs.insert("history", hist);
        ck
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta = |key: &str| -> Result<u64> {
            ck.meta(key)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::invalid(format!("checkpoint lacks integer {key}")))
        };
        let theta = EncoderParams {
            cfg: ck.cfg.clone(),
            params: ck.take_set("theta"),
            buffers: ck.take_set("theta_buffers"),
        };
        let fresh = EncoderParams::init(&ck.cfg, &mut ChaCha8Rng::seed_from_u64(0))?;
        if !theta.params.same_layout(&fresh.params) || !theta.buffers.same_layout(&fresh.buffers) {
            return Err(Error::invalid("checkpoint parameters do not match its model config"));
        }
        let xi = MomentumParams {
            params: ck.take_set("xi"),
            buffers: ck.take_set("xi_buffers"),
        };
        let mut opt = AdamW::new(&theta.params);
        opt.t = meta("adam_t")?;
        opt.m = ck.take_set("adam_m");
        opt.v = ck.take_set("adam_v");
        if !opt.m.same_layout(&theta.params) || !opt.v.same_layout(&theta.params) {
            return Err(Error::invalid("checkpoint optimizer moments do not match parameters"));
        }
        let hist = ck.blobs.require("history")?;
        let history = (0..hist.shape()[0])
            .map(|i| {
                let r = hist.row(i);
                LogRow {
                    step: r[0] as usize,
                    report: LossReport {
                        l_mto: r[1],
                        l_mtm: r[2],
                        l_oto: r[3],
                        l_total: r[4],
                    },
                    lr: r[5],
                    mu: r[6],
                    wd: r[7],
                }
            })
            .collect();
        Ok(Self {
            step: meta("step")? as usize,
            epoch: meta("epoch")? as usize,
            theta,
            xi,
            opt,
            history,
            out_dir: None,
        })
    }
}
