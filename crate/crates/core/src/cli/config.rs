//! `key = value` run configuration shared by every command.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::augment::ViewAug;
use crate::data::{
    load_cifar_split, split_per_class, synth_blobs, CifarVariant, LabeledDataset, Split, SynthSpec,
};
use crate::encoder::ViTConfig;
use crate::error::{Error, Result};
use crate::evaluation::{ProbeConfig, DEFAULT_K, DEFAULT_KNN_TEMPERATURE, DEFAULT_SIMILARITY_TEMPERATURE};
use crate::trainer::{LossTerms, Precision, TrainConfig};

/// Starting point that later keys modify.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    /// Micro model on synthetic 8x8 images, 300 steps.
    Smoke,
    /// ViT-Tiny/2 on CIFAR-10 with the full augmentation recipe.
    Cifar,
}

impl Preset {
    fn name(self) -> &'static str {
        match self {
            Preset::Smoke => "smoke",
            Preset::Cifar => "cifar",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic,
    Cifar(CifarVariant),
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub source: DataSource,
    /// Directory holding the CIFAR binary batches.
    pub dir: Option<PathBuf>,
    /// Keep only the first `limit` records of each split (0 keeps all).
    pub limit: usize,
    /// Generator settings; `per_class` counts training images.
    pub synth: SynthSpec,
    pub val_per_class: usize,
}

/// Image file format for demos and attention dumps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageExt {
    Png,
    Ppm,
}

impl ImageExt {
    pub fn as_str(self) -> &'static str {
        match self {
            ImageExt::Png => "png",
            ImageExt::Ppm => "ppm",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub preset: Preset,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub knn_k: usize,
    pub knn_tau: f64,
    pub similarity_tau: f64,
    /// Validation images dumped against the training bank by `eval-knn`.
    pub similarity_queries: usize,
    pub probe: ProbeConfig,
    /// Encoder to evaluate; a seeded random initialization when absent.
    pub checkpoint: Option<PathBuf>,
    pub image_ext: ImageExt,
    /// Nearest-neighbour upscaling of written images.
    pub image_scale: usize,
    pub attn_images: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset(Preset::Smoke)
    }
}

fn parse<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: {v:?} is not a bool"))),
    }
}

fn parse_opt<T: std::str::FromStr>(key: &str, v: &str) -> Result<Option<T>> {
    if v == "none" {
        Ok(None)
    } else {
        parse(key, v).map(Some)
    }
}

fn opt_text<T: std::fmt::Display>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "none".to_string(), |v| v.to_string())
}

fn parse_terms(key: &str, v: &str) -> Result<LossTerms> {
    let mut t = LossTerms {
        mto: false,
        mtm: false,
        oto: false,
    };
    for part in v.split(',').map(str::trim) {
        match part {
            "mto" => t.mto = true,
            "mtm" => t.mtm = true,
            "oto" => t.oto = true,
            _ => return Err(Error::Config(format!("{key}: unknown loss term {part:?}"))),
        }
    }
    Ok(t)
}

fn terms_text(t: LossTerms) -> String {
    let names: Vec<&str> = [(t.mto, "mto"), (t.mtm, "mtm"), (t.oto, "oto")]
        .iter()
        .filter(|(on, _)| *on)
        .map(|(_, n)| *n)
        .collect();
    names.join(",")
}

fn view_lines(out: &mut String, prefix: &str, v: &ViewAug) {
    let pair = |p: (f64, f64)| format!("{},{}", p.0, p.1);
    let lines = [
        ("crop_area", pair(v.crop_area)),
        ("crop_aspect", pair(v.crop_aspect)),
        ("flip_prob", v.flip_prob.to_string()),
        ("jitter_prob", v.jitter_prob.to_string()),
        ("brightness", v.brightness.to_string()),
        ("contrast", v.contrast.to_string()),
        ("saturation", v.saturation.to_string()),
        ("hue", v.hue.to_string()),
        ("grayscale_prob", v.grayscale_prob.to_string()),
        ("blur_prob", v.blur_prob.to_string()),
        ("blur_sigma", pair(v.blur_sigma)),
        ("solarize_prob", v.solarize_prob.to_string()),
    ];
    for (k, val) in lines {
        writeln!(out, "aug.{prefix}.{k} = {val}").expect("writing to a String");
    }
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let (train, data) = match preset {
            Preset::Smoke => (
                TrainConfig::smoke(0),
                DataConfig {
                    source: DataSource::Synthetic,
                    dir: None,
                    limit: 0,
                    synth: SynthSpec::nuisance(2, 128, 8, 0),
                    val_per_class: 64,
                },
            ),
            Preset::Cifar => (
                TrainConfig {
                    model: ViTConfig::tiny(),
                    ..TrainConfig::default()
                },
                DataConfig {
                    source: DataSource::Cifar(CifarVariant::Cifar10),
                    dir: Some(PathBuf::from("data/cifar-10-batches-bin")),
                    limit: 0,
                    synth: SynthSpec::nuisance(10, 128, 32, 0),
                    val_per_class: 64,
                },
            ),
        };
        Self {
            preset,
            train,
            data,
            knn_k: DEFAULT_K,
            knn_tau: DEFAULT_KNN_TEMPERATURE,
            similarity_tau: DEFAULT_SIMILARITY_TEMPERATURE,
            similarity_queries: 8,
            probe: ProbeConfig::linear(),
            checkpoint: None,
            image_ext: ImageExt::Png,
            image_scale: 8,
            attn_images: 4,
        }
    }

    /// Parses config text on top of the default preset. A `preset` key
    /// resets everything set before it.
    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got {line:?}", no + 1)))?;
            self.set(k.trim(), v.trim())
                .map_err(|e| Error::Config(format!("line {}: {}", no + 1, strip_config(e))))?;
        }
        Ok(())
    }

    /// Applies a `key=value` override.
    pub fn apply_override(&mut self, kv: &str) -> Result<()> {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        self.set(k.trim(), v.trim())
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let t = &mut self.train;
        match key {
            "preset" => {
                let p = match v {
                    "smoke" => Preset::Smoke,
                    "cifar" => Preset::Cifar,
                    _ => return Err(Error::Config(format!("preset: unknown preset {v:?}"))),
                };
                *self = Self::preset(p);
            }
            "seed" => t.seed = parse(key, v)?,
            "epochs" => t.epochs = parse(key, v)?,
            "warmup_epochs" => t.warmup_epochs = parse(key, v)?,
            "total_steps" => t.total_steps = parse_opt(key, v)?,
            "lr" => t.base_lr = parse(key, v)?,
            "batch" => t.batch = parse(key, v)?,
            "mix" => t.mix = parse(key, v)?,
            "temperature" => t.temperature = parse(key, v)?,
            "wd_start" => t.wd.0 = parse(key, v)?,
            "wd_end" => t.wd.1 = parse(key, v)?,
            "mu_start" => t.mu.0 = parse(key, v)?,
            "mu_end" => t.mu.1 = parse(key, v)?,
            "precision" => {
                t.precision = match v {
                    "f64" => Precision::F64,
                    "f32" => Precision::F32,
                    _ => return Err(Error::Config(format!("precision: expected f64 or f32, got {v:?}"))),
                }
            }
            "normalize_mtm" => t.normalize_mtm = parse_bool(key, v)?,
            "grad_clip" => t.grad_clip = parse_opt(key, v)?,
            "terms" => t.terms = parse_terms(key, v)?,
            "checkpoint_every" => t.checkpoint_every = parse(key, v)?,
            "model.patch_side" => t.model.patch_side = parse(key, v)?,
            "model.depth" => t.model.depth = parse(key, v)?,
            "model.heads" => t.model.heads = parse(key, v)?,
            "model.dim" => t.model.dim = parse(key, v)?,
            "model.mlp_ratio" => t.model.mlp_ratio = parse(key, v)?,
            "model.image_side" => t.model.image_side = parse(key, v)?,
            "model.channels" => t.model.channels = parse(key, v)?,
            "model.head_hidden" => t.model.head_hidden = parse(key, v)?,
            "model.head_out" => t.model.head_out = parse(key, v)?,
            "data.source" => {
                self.data.source = match v {
                    "synthetic" => DataSource::Synthetic,
                    other => DataSource::Cifar(CifarVariant::parse(other).map_err(|e| Error::Config(e.to_string()))?),
                }
            }
            "data.dir" => self.data.dir = if v == "none" { None } else { Some(PathBuf::from(v)) },
            "data.limit" => self.data.limit = parse(key, v)?,
            "data.classes" => self.data.synth.classes = parse(key, v)?,
            "data.train_per_class" => self.data.synth.per_class = parse(key, v)?,
            "data.val_per_class" => self.data.val_per_class = parse(key, v)?,
            "data.image_side" => self.data.synth.image_side = parse(key, v)?,
            "data.patch_structured" => self.data.synth.patch_structured = parse_bool(key, v)?,
            "data.noise" => self.data.synth.noise = parse(key, v)?,
            "data.max_shift" => self.data.synth.max_shift = parse(key, v)?,
            "data.offset" => self.data.synth.offset = parse(key, v)?,
            "data.seed" => self.data.synth.seed = parse(key, v)?,
            "knn.k" => self.knn_k = parse(key, v)?,
            "knn.tau" => self.knn_tau = parse(key, v)?,
            "similarity.tau" => self.similarity_tau = parse(key, v)?,
            "similarity.queries" => self.similarity_queries = parse(key, v)?,
            "probe.preset" => {
                let seed = self.probe.seed;
                self.probe = match v {
                    "linear" => ProbeConfig::linear(),
                    "finetune" => ProbeConfig::finetune(),
                    _ => return Err(Error::Config(format!("probe.preset: expected linear or finetune, got {v:?}"))),
                };
                self.probe.seed = seed;
            }
            "probe.epochs" => self.probe.epochs = parse(key, v)?,
            "probe.lr" => self.probe.lr = parse(key, v)?,
            "probe.weight_decay" => self.probe.weight_decay = parse(key, v)?,
            "probe.batch" => self.probe.batch = parse(key, v)?,
            "probe.unfreeze_backbone" => self.probe.unfreeze_backbone = parse_bool(key, v)?,
            "probe.seed" => self.probe.seed = parse(key, v)?,
            "checkpoint" => self.checkpoint = if v == "none" { None } else { Some(PathBuf::from(v)) },
            "image_ext" => {
                self.image_ext = match v {
                    "png" => ImageExt::Png,
                    "ppm" => ImageExt::Ppm,
                    _ => return Err(Error::Config(format!("image_ext: expected png or ppm, got {v:?}"))),
                }
            }
            "image_scale" => self.image_scale = parse(key, v)?,
            "attn.images" => self.attn_images = parse(key, v)?,
            _ => {
                let known = match key.strip_prefix("aug.") {
                    Some(k) => t.aug.set(k, v)?,
                    None => false,
                };
                if !known {
                    return Err(Error::Config(format!("unknown key {key:?}")));
                }
            }
        }
        Ok(())
    }

    /// Every key in a form [`RunConfig::from_text`] reads back unchanged.
    pub fn to_text(&self) -> String {
        let t = &self.train;
        let m = &t.model;
        let d = &self.data;
        let mut s = String::new();
        let mut kv = |k: &str, v: String| writeln!(s, "{k} = {v}").expect("writing to a String");
        kv("preset", self.preset.name().into());
        kv("seed", t.seed.to_string());
        kv("epochs", t.epochs.to_string());
        kv("warmup_epochs", t.warmup_epochs.to_string());
        kv("total_steps", opt_text(&t.total_steps));
        kv("lr", t.base_lr.to_string());
        kv("batch", t.batch.to_string());
        kv("mix", t.mix.to_string());
        kv("temperature", t.temperature.to_string());
        kv("wd_start", t.wd.0.to_string());
        kv("wd_end", t.wd.1.to_string());
        kv("mu_start", t.mu.0.to_string());
        kv("mu_end", t.mu.1.to_string());
        kv(
            "precision",
            match t.precision {
                Precision::F64 => "f64",
                Precision::F32 => "f32",
            }
            .into(),
        );
        kv("normalize_mtm", t.normalize_mtm.to_string());
        kv("grad_clip", opt_text(&t.grad_clip));
        kv("terms", terms_text(t.terms));
        kv("checkpoint_every", t.checkpoint_every.to_string());
        kv("model.patch_side", m.patch_side.to_string());
        kv("model.depth", m.depth.to_string());
        kv("model.heads", m.heads.to_string());
        kv("model.dim", m.dim.to_string());
        kv("model.mlp_ratio", m.mlp_ratio.to_string());
        kv("model.image_side", m.image_side.to_string());
        kv("model.channels", m.channels.to_string());
        kv("model.head_hidden", m.head_hidden.to_string());
        kv("model.head_out", m.head_out.to_string());
        kv("aug.color", t.aug.color.to_string());
        kv("aug.solarize_threshold", t.aug.solarize_threshold.to_string());
        kv(
            "data.source",
            match &d.source {
                DataSource::Synthetic => "synthetic".into(),
                DataSource::Cifar(v) => v.name().into(),
            },
        );
        kv("data.dir", d.dir.as_ref().map_or("none".into(), |p| p.display().to_string()));
        kv("data.limit", d.limit.to_string());
        kv("data.classes", d.synth.classes.to_string());
        kv("data.train_per_class", d.synth.per_class.to_string());
        kv("data.val_per_class", d.val_per_class.to_string());
        kv("data.image_side", d.synth.image_side.to_string());
        kv("data.patch_structured", d.synth.patch_structured.to_string());
        kv("data.noise", d.synth.noise.to_string());
        kv("data.max_shift", d.synth.max_shift.to_string());
        kv("data.offset", d.synth.offset.to_string());
        kv("data.seed", d.synth.seed.to_string());
        kv("knn.k", self.knn_k.to_string());
        kv("knn.tau", self.knn_tau.to_string());
        kv("similarity.tau", self.similarity_tau.to_string());
        kv("similarity.queries", self.similarity_queries.to_string());
        kv("probe.epochs", self.probe.epochs.to_string());
        kv("probe.lr", self.probe.lr.to_string());
        kv("probe.weight_decay", self.probe.weight_decay.to_string());
        kv("probe.batch", self.probe.batch.to_string());
        kv("probe.unfreeze_backbone", self.probe.unfreeze_backbone.to_string());
        kv("probe.seed", self.probe.seed.to_string());
        kv("checkpoint", self.checkpoint.as_ref().map_or("none".into(), |p| p.display().to_string()));
        kv("image_ext", self.image_ext.as_str().into());
        kv("image_scale", self.image_scale.to_string());
        kv("attn.images", self.attn_images.to_string());
        view_lines(&mut s, "view1", &t.aug.view1);
        view_lines(&mut s, "view2", &t.aug.view2);
        s
    }

    pub fn validate(&self) -> Result<()> {
        let cfg = |e: Error| Error::Config(strip_config(e));
        self.train.validate().map_err(cfg)?;
        self.train.model.validate().map_err(cfg)?;
        self.train.aug.validate().map_err(cfg)?;
        let m = &self.train.model;
        let (side, channels) = match self.data.source {
            DataSource::Synthetic => (self.data.synth.image_side, 3),
            DataSource::Cifar(_) => (32, 3),
        };
        if m.image_side != side || m.channels != channels {
            return Err(Error::Config(format!(
                "model expects {}x{} images with {} channels but the data has {side}x{side} with {channels}",
                m.image_side, m.image_side, m.channels
            )));
        }
        if self.knn_k == 0 || !(self.knn_tau > 0.0) || !(self.similarity_tau > 0.0) {
            return Err(Error::Config("knn.k must be positive and temperatures above 0".into()));
        }
        if self.probe.batch == 0 || self.image_scale == 0 {
            return Err(Error::Config("probe.batch and image_scale must be positive".into()));
        }
        if let DataSource::Synthetic = self.data.source {
            if self.data.val_per_class == 0 {
                return Err(Error::Config("data.val_per_class must be positive".into()));
            }
        }
        Ok(())
    }

    /// Training and validation splits described by the data section.
    pub fn load_data(&self) -> Result<(LabeledDataset, LabeledDataset)> {
        let truncate = |ds: LabeledDataset| {
            if self.data.limit == 0 || ds.len() <= self.data.limit {
                ds
            } else {
                ds.select(&(0..self.data.limit).collect::<Vec<_>>())
            }
        };
        match &self.data.source {
            DataSource::Synthetic => {
                let mut spec = self.data.synth.clone();
                spec.per_class += self.data.val_per_class;
                let all = synth_blobs(&spec)?;
                let (tr, va) = split_per_class(&all, self.data.val_per_class, spec.seed)?;
                Ok((truncate(tr), truncate(va)))
            }
            DataSource::Cifar(variant) => {
                let dir = self
                    .data
                    .dir
                    .as_ref()
                    .ok_or_else(|| Error::Config("data.dir is required for CIFAR data".into()))?;
                let tr = load_cifar_split(dir, *variant, Split::Train)?;
                let va = load_cifar_split(dir, *variant, Split::Val)?;
                Ok((truncate(tr), truncate(va)))
            }
        }
    }
}

fn strip_config(e: Error) -> String {
    match e {
        Error::Config(msg) => msg,
        other => other.to_string(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_text("lr = 0.002\nterms = oto, mto\naug.view2.crop_area = 0.3,0.9\ngrad_clip = 1.5\n")
            .unwrap();
        let back = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        let cifar = RunConfig::from_text("preset = cifar").unwrap();
        assert_eq!(RunConfig::from_text(&cifar.to_text()).unwrap(), cifar);
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::from_text("# header\n\nmix = 3   # trailing\n  batch=16\n").unwrap();
        assert_eq!((cfg.train.mix, cfg.train.batch), (3, 16));
        let mut cfg = RunConfig::default();
        cfg.apply_override("knn.k=5").unwrap();
        assert_eq!(cfg.knn_k, 5);
        assert!(cfg.apply_override("knn.k").is_err());
    }

    #[test]
    fn errors_name_the_line() {
        let err = RunConfig::from_text("lr = 1e-3\nbogus = 1\n").unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("line 2") && m.contains("bogus")), "{err}");
        let err = RunConfig::from_text("\nlr = fast\n").unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
        let err = RunConfig::from_text("just words\n").unwrap_err();
        assert!(err.to_string().contains("line 1"), "{err}");
        assert!(RunConfig::from_text("data.source = imagenet").is_err());
    }

    #[test]
    fn validation_catches_mismatched_geometry() {
        let mut cfg = RunConfig::default();
        cfg.validate().unwrap();
        cfg.set("model.image_side", "16").unwrap();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.set("mix", "40").unwrap();
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn synthetic_splits_are_disjoint_and_sized() {
        let cfg = RunConfig::default();
        let (tr, va) = cfg.load_data().unwrap();
        assert_eq!((tr.len(), va.len()), (256, 128));
        assert_eq!(tr.labels.iter().filter(|&&l| l == 1).count(), 128);
        let (tr2, _) = cfg.load_data().unwrap();
        assert_eq!(tr, tr2);
    }
}
