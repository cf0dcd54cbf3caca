//! Command-line front end. [`run`] parses arguments, executes one command
//! and returns the process exit code.

mod checks;
mod config;
mod images;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use checks::{
    default_loss, grad_check, grad_check_with_step, oracle_grid, random_patches, GradReport, OracleReport, GRAD_STEP,
    GRAD_TOLERANCE,
};
pub use config::{DataConfig, DataSource, ImageExt, Preset, RunConfig};
pub use images::Raster;

use crate::encoder::{Checkpoint, EncoderParams};
use crate::error::{Error, Result};
use crate::evaluation::{
    attention_grid, attention_maps, extract_features, knn_classify, linear_probe, similarity_csv, FeatureBank,
};
use crate::patch_ops::{patchify, sample_permutation, shuffle, unpatchify, ImageBatch};
use crate::patchmix::{apply_mix, plan_mix, write_plan, MixConfig};
use crate::trainer::{pretrain, Precision, TrainState};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

const DEFAULT_OUT: &str = "patchmix-out";

#[derive(Parser, Debug)]
#[command(name = "patchmix", version, about = "Patch-mixing contrastive pretraining for small vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// key = value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Training seed; overrides the config file.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// key=value applied after the config file; repeatable.
    #[arg(long = "override", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train the encoder; writes the CSV log and checkpoints.
    Pretrain(Common),
    /// kNN accuracy of the encoder on the validation split.
    EvalKnn(Common),
    /// Linear probe (or fine-tuning with probe.preset=finetune).
    EvalLinear(Common),
    /// Writes original, shuffled, shuffled-mixed and mixed images plus the plan.
    MixDemo(Common),
    /// Compares the mixer against the reference implementation over a grid.
    OracleCheck(Common),
    /// Finite-difference check of every loss.
    GradCheck(Common),
    /// Writes last-block class-token attention maps.
    AttnDump(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Pretrain(c)
            | Command::EvalKnn(c)
            | Command::EvalLinear(c)
            | Command::MixDemo(c)
            | Command::OracleCheck(c)
            | Command::GradCheck(c)
            | Command::AttnDump(c) => c,
        }
    }
}

/// Resolves the configuration of one invocation.
fn resolve(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    for kv in &common.overrides {
        cfg.apply_override(kv)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

struct Io<'a> {
    out: &'a mut dyn Write,
    err: &'a mut dyn Write,
}

macro_rules! say {
    ($w:expr, $($arg:tt)*) => {
        writeln!($w, $($arg)*).map_err(|e| Error::io("<stdout>", e))?
    };
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => EXIT_USAGE,
        _ => EXIT_FAILURE,
    }
}

/// Runs the CLI on `args` (program name first).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            if code == EXIT_OK {
                let _ = write!(out, "{text}");
            } else {
                let _ = write!(err, "{text}");
            }
            return code;
        }
    };
    let mut io = Io { out, err };
    let result = resolve(cli.command.common()).and_then(|cfg| {
        for line in cfg.to_text().lines() {
            say!(io.out, "# {line}");
        }
        dispatch(&cli.command, &cfg, &mut io)
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(io.err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command, cfg: &RunConfig, io: &mut Io<'_>) -> Result<i32> {
    let out_dir = cmd.common().out.clone();
    match cmd {
        Command::Pretrain(_) => cmd_pretrain(cfg, &out_dir.unwrap_or_else(|| DEFAULT_OUT.into()), io),
        Command::EvalKnn(_) => cmd_eval_knn(cfg, out_dir.as_deref(), io),
        Command::EvalLinear(_) => cmd_eval_linear(cfg, io),
        Command::MixDemo(_) => cmd_mix_demo(cfg, &out_dir.unwrap_or_else(|| DEFAULT_OUT.into()), io),
        Command::OracleCheck(_) => cmd_oracle_check(cfg, io),
        Command::GradCheck(_) => cmd_grad_check(cfg, io),
        Command::AttnDump(_) => cmd_attn_dump(cfg, &out_dir.unwrap_or_else(|| DEFAULT_OUT.into()), io),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// The checkpointed base encoder, or the seeded initialization `pretrain`
/// would start from.
pub fn load_encoder(cfg: &RunConfig) -> Result<EncoderParams> {
    let enc = match &cfg.checkpoint {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            TrainState::from_checkpoint(&ck)?.theta
        }
        None => TrainState::init(&cfg.train)?.theta,
    };
    let m = &cfg.train.model;
    if enc.cfg.image_side != m.image_side || enc.cfg.channels != m.channels {
        return Err(Error::Config(format!(
            "checkpoint model takes {}x{} images, the data has {}x{}",
            enc.cfg.image_side, enc.cfg.image_side, m.image_side, m.image_side
        )));
    }
    Ok(enc)
}

fn cmd_pretrain(cfg: &RunConfig, out: &Path, io: &mut Io<'_>) -> Result<i32> {
    create_dir(out)?;
    write_text(&out.join("config.txt"), &cfg.to_text())?;
    let (train, _) = cfg.load_data()?;
    let resume = match &cfg.checkpoint {
        Some(p) => Some(TrainState::from_checkpoint(&Checkpoint::load(p)?)?),
        None => None,
    };
    let result = pretrain(&cfg.train, &train.images, Some(out), resume)?;
    let last = result.state.history.last();
    say!(io.out, "steps={}", result.state.step);
    if let Some(row) = last {
        say!(io.out, "final_l_total={}", row.report.l_total);
    }
    if let Some(p) = &result.log {
        say!(io.out, "log={}", p.display());
    }
    if let Some(p) = &result.final_checkpoint {
        say!(io.out, "final_checkpoint={}", p.display());
    }
    Ok(EXIT_OK)
}

fn cmd_eval_knn(cfg: &RunConfig, out: Option<&Path>, io: &mut Io<'_>) -> Result<i32> {
    let enc = load_encoder(cfg)?;
    if cfg.checkpoint.is_none() {
        say!(io.err, "note: no checkpoint given; evaluating the seeded random initialization");
    }
    let (train, val) = cfg.load_data()?;
    let ftr = extract_features(&enc, &train.images, 256)?;
    let fva = extract_features(&enc, &val.images, 256)?;
    let bank = FeatureBank::new(&ftr, train.labels.clone(), train.classes)?;
    let r = knn_classify(&bank, &fva, Some(&val.labels), cfg.knn_k, cfg.knn_tau)?;
    let acc = r.accuracy.unwrap_or(0.0);
    say!(io.out, "knn_accuracy={acc}");
    if let Some(dir) = out {
        create_dir(dir)?;
        write_text(&dir.join("knn_per_class.csv"), &r.per_class_csv(&val.labels, val.classes))?;
        let q = cfg.similarity_queries.min(val.len());
        let rows: Vec<usize> = (0..q).collect();
        let queries = crate::numerics::Array::from_fn(&[q, enc.cfg.dim], |k| fva.row(rows[k / enc.cfg.dim])[k % enc.cfg.dim]);
        write_text(&dir.join("similarity.csv"), &similarity_csv(&queries, &ftr, cfg.similarity_tau)?)?;
    }
    Ok(EXIT_OK)
}

fn cmd_eval_linear(cfg: &RunConfig, io: &mut Io<'_>) -> Result<i32> {
    let enc = load_encoder(cfg)?;
    let (train, val) = cfg.load_data()?;
    let r = linear_probe(&enc, &train, &val, &cfg.probe)?;
    say!(io.out, "train_accuracy={}", r.train_accuracy);
    say!(io.out, "linear_accuracy={}", r.val_accuracy);
    Ok(EXIT_OK)
}

fn save_batch(batch: &ImageBatch, dir: &Path, stem: &str, cfg: &RunConfig) -> Result<()> {
    for i in 0..batch.len() {
        let path = dir.join(format!("{stem}_{i}.{}", cfg.image_ext.as_str()));
        Raster::from_batch(batch, i, cfg.image_scale)?.save(&path)?;
    }
    Ok(())
}

fn cmd_mix_demo(cfg: &RunConfig, out: &Path, io: &mut Io<'_>) -> Result<i32> {
    let (train, _) = cfg.load_data()?;
    let (n, m) = (cfg.train.batch, cfg.train.mix);
    if train.len() < n {
        return Err(Error::Config(format!("mix demo needs {n} images, the data has {}", train.len())));
    }
    let images = train.images.select(&(0..n).collect::<Vec<_>>());
    let pb = patchify(&images, cfg.train.model.patch_side)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
    let perm = sample_permutation(pb.tokens(), &mut rng)?;
    let plan = plan_mix(MixConfig::new(n, m, pb.tokens()).map_err(|e| Error::Config(e.to_string()))?, perm)?;
    let mixed = apply_mix(&pb, &plan)?;
    let shuffled = shuffle(&pb, &plan.perm)?;
    let smix = shuffle(&mixed.patches, &plan.perm)?;
    create_dir(out)?;
    save_batch(&images, out, "original", cfg)?;
    save_batch(&unpatchify(&shuffled), out, "shuffled", cfg)?;
    save_batch(&unpatchify(&smix), out, "smix", cfg)?;
    save_batch(&unpatchify(&mixed.patches), out, "mixed", cfg)?;
    write_text(&out.join("plan.txt"), &write_plan(&plan))?;
    say!(io.out, "images={}", 4 * n);
    say!(io.out, "plan={}", out.join("plan.txt").display());
    Ok(EXIT_OK)
}

fn cmd_oracle_check(cfg: &RunConfig, io: &mut Io<'_>) -> Result<i32> {
    let start = std::time::Instant::now();
    let r = oracle_grid(cfg.train.seed, &|_| {})?;
    say!(io.out, "checked={}", r.checked);
    say!(io.out, "rejected_m_gt_n={}", r.rejected);
    for f in &r.failures {
        say!(io.out, "FAIL {f}");
    }
    say!(io.out, "elapsed_s={:.3}", start.elapsed().as_secs_f64());
    say!(io.out, "oracle_check={}", if r.passed() { "pass" } else { "fail" });
    Ok(if r.passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_grad_check(cfg: &RunConfig, io: &mut Io<'_>) -> Result<i32> {
    if cfg.train.precision == Precision::F32 {
        say!(io.err, "warning: precision=f32; the {GRAD_TOLERANCE:e} tolerance is only guaranteed at f64");
    }
    let r = grad_check(cfg.train.seed, &default_loss)?;
    write!(io.out, "{}", r.text()).map_err(|e| Error::io("<stdout>", e))?;
    say!(io.out, "grad_check={}", if r.passed() { "pass" } else { "fail" });
    Ok(if r.passed() { EXIT_OK } else { EXIT_FAILURE })
}

fn cmd_attn_dump(cfg: &RunConfig, out: &Path, io: &mut Io<'_>) -> Result<i32> {
    let enc = load_encoder(cfg)?;
    let (_, val) = cfg.load_data()?;
    let k = cfg.attn_images.min(val.len());
    let images = val.images.select(&(0..k).collect::<Vec<_>>());
    let maps = attention_maps(&enc, &images)?;
    create_dir(out)?;
    for (i, map) in maps.iter().enumerate() {
        let (width, height, pixels) = attention_grid(map, cfg.image_scale);
        let raster = Raster {
            width,
            height,
            channels: 1,
            pixels,
        };
        raster.save(&out.join(format!("attn_{i}.{}", cfg.image_ext.as_str())))?;
        Raster::from_batch(&images, i, cfg.image_scale)?
            .save(&out.join(format!("input_{i}.{}", cfg.image_ext.as_str())))?;
    }
    if let Some(m) = maps.first() {
        say!(io.out, "attention_shape={:?}", m.shape());
    }
    say!(io.out, "maps={k}");
    Ok(EXIT_OK)
}
