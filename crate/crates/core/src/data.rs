//! CIFAR binary reader/writer and a seeded synthetic dataset.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::patch_ops::ImageBatch;

/// Image side of CIFAR records.
pub const CIFAR_SIDE: usize = 32;
/// Pixel bytes per record, three planes.
pub const CIFAR_PIXELS: usize = 3 * CIFAR_SIDE * CIFAR_SIDE;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
}

/// Images with integer labels in `0..classes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledDataset {
    pub images: ImageBatch,
    pub labels: Vec<usize>,
    pub classes: usize,
    pub split: Split,
}

impl LabeledDataset {
    pub fn new(images: ImageBatch, labels: Vec<usize>, classes: usize, split: Split) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::invalid(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {bad} outside 0..{classes}")));
        }
        if images.as_array().data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("image values must lie in [0, 1]"));
        }
        Ok(Self {
            images,
            labels,
            classes,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn select(&self, indices: &[usize]) -> Self {
        Self {
            images: self.images.select(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            classes: self.classes,
            split: self.split,
        }
    }
}

/// CIFAR binary flavour.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CifarVariant {
    Cifar10,
    /// Coarse and fine label bytes; the fine label is used.
    Cifar100,
}

impl CifarVariant {
    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "cifar10" | "cifar-10" => Ok(Self::Cifar10),
            "cifar100" | "cifar-100" => Ok(Self::Cifar100),
            n if n.contains("imagenet") => Err(Error::Config(
                "ImageNet ingestion is out of scope; use cifar10, cifar100 or synthetic data".into(),
            )),
            other => Err(Error::Config(format!("unknown dataset variant {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Cifar10 => "cifar10",
            Self::Cifar100 => "cifar100",
        }
    }

    fn label_bytes(self) -> usize {
        match self {
            Self::Cifar10 => 1,
            Self::Cifar100 => 2,
        }
    }

    pub fn record_bytes(self) -> usize {
        self.label_bytes() + CIFAR_PIXELS
    }

    pub fn classes(self) -> usize {
        match self {
            Self::Cifar10 => 10,
            Self::Cifar100 => 100,
        }
    }

    /// File names of a split inside the extracted archive directory.
    pub fn split_files(self, split: Split) -> Vec<&'static str> {
        match (self, split) {
            (Self::Cifar10, Split::Train) => vec![
                "data_batch_1.bin",
                "data_batch_2.bin",
                "data_batch_3.bin",
                "data_batch_4.bin",
                "data_batch_5.bin",
            ],
            (Self::Cifar10, Split::Val) => vec!["test_batch.bin"],
            (Self::Cifar100, Split::Train) => vec!["train.bin"],
            (Self::Cifar100, Split::Val) => vec!["test.bin"],
        }
    }
}

/// Parses CIFAR records from memory. `path` only labels errors.
pub fn parse_cifar(bytes: &[u8], variant: CifarVariant, split: Split, path: &Path) -> Result<LabeledDataset> {
    let rec = variant.record_bytes();
    if bytes.is_empty() || bytes.len() % rec != 0 {
        let whole = bytes.len() / rec;
        return Err(Error::format(
            path,
            format!(
                "expected a multiple of {rec} bytes per record, got {} bytes: record {} is cut at byte {} (record boundary {}, expected {} bytes in total)",
                bytes.len(),
                whole,
                bytes.len(),
                whole * rec,
                (whole + 1) * rec
            ),
        ));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * CIFAR_PIXELS);
    for r in bytes.chunks_exact(rec) {
        let label = r[variant.label_bytes() - 1] as usize;
        if label >= variant.classes() {
            return Err(Error::format(
                path,
                format!("label {label} at record {} exceeds {} classes", labels.len(), variant.classes()),
            ));
        }
        labels.push(label);
        pixels.extend(r[variant.label_bytes()..].iter().map(|&b| b as f64 / 255.0));
    }
    let images = ImageBatch::new(n, 3, CIFAR_SIDE, CIFAR_SIDE, pixels)?;
    LabeledDataset::new(images, labels, variant.classes(), split)
}

/// Reads one CIFAR binary file.
pub fn load_cifar_binary(path: &Path, variant: CifarVariant, split: Split) -> Result<LabeledDataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar(&bytes, variant, split, path)
}

/// Reads and concatenates every file of a split from `dir`.
pub fn load_cifar_split(dir: &Path, variant: CifarVariant, split: Split) -> Result<LabeledDataset> {
    let mut bytes = Vec::new();
    for name in variant.split_files(split) {
        let p: PathBuf = dir.join(name);
        let chunk = std::fs::read(&p).map_err(|e| Error::io(&p, e))?;
        if chunk.len() % variant.record_bytes() != 0 {
            return parse_cifar(&chunk, variant, split, &p);
        }
        bytes.extend_from_slice(&chunk);
    }
    parse_cifar(&bytes, variant, split, dir)
}

/// Serializes 3x32x32 images in the CIFAR layout; pixels are rounded to bytes.
pub fn cifar_bytes(ds: &LabeledDataset, variant: CifarVariant) -> Result<Vec<u8>> {
    let im = &ds.images;
    if im.channels() != 3 || im.height() != CIFAR_SIDE || im.width() != CIFAR_SIDE {
        return Err(Error::invalid(format!(
            "CIFAR records hold 3x32x32 images, got {}x{}x{}",
            im.channels(),
            im.height(),
            im.width()
        )));
    }
    let mut out = Vec::with_capacity(ds.len() * variant.record_bytes());
    for (i, &label) in ds.labels.iter().enumerate() {
        let byte = u8::try_from(label)
            .ok()
            .filter(|_| label < variant.classes())
            .ok_or_else(|| Error::invalid(format!("label {label} does not fit {variant:?}")))?;
        if variant == CifarVariant::Cifar100 {
            out.push(0);
        }
        out.push(byte);
        out.extend(im.image(i).iter().map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8));
    }
    Ok(out)
}

pub fn write_cifar_binary(ds: &LabeledDataset, variant: CifarVariant, path: &Path) -> Result<()> {
    std::fs::write(path, cifar_bytes(ds, variant)?).map_err(|e| Error::io(path, e))
}

/// Synthetic dataset parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub classes: usize,
    pub per_class: usize,
    pub image_side: usize,
    /// Template cells coincide with 2x2-pixel patches; otherwise the
    /// template is shifted by one pixel so cells straddle patch borders.
    pub patch_structured: bool,
    /// Standard deviation of the Gaussian pixel noise.
    pub noise: f64,
    /// Per-image circular translation drawn uniformly from
    /// `-max_shift..=max_shift` pixels on each axis.
    pub max_shift: usize,
    /// Per-image intensity offset drawn uniformly from `[-offset, offset]`.
    pub offset: f64,
    pub seed: u64,
}

impl SynthSpec {
    pub fn new(classes: usize, per_class: usize, image_side: usize, patch_structured: bool, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            image_side,
            patch_structured,
            noise: 0.1,
            max_shift: 0,
            offset: 0.0,
            seed,
        }
    }

    /// Noisier images with a one-pixel random translation and an intensity
    /// offset, so class identity is not the dominant raw-pixel factor.
    pub fn nuisance(classes: usize, per_class: usize, image_side: usize, seed: u64) -> Self {
        Self {
            noise: 0.3,
            max_shift: 1,
            offset: 0.25,
            ..Self::new(classes, per_class, image_side, true, seed)
        }
    }
}

/// Grid of template cells per side.
pub const TEMPLATE_GRID: usize = 4;
/// Intensity of dark and bright template cells.
pub const TEMPLATE_LEVELS: (f64, f64) = (0.25, 0.75);

/// Half-bright `TEMPLATE_GRID x TEMPLATE_GRID` cell patterns, one per class.
///
/// Class 0 is a horizontal band over the middle rows, class 1 the matching
/// vertical band; both are unchanged by a horizontal flip and share the same
/// mean intensity. Further classes are seeded random balanced patterns that
/// differ from every earlier template in at least [`MIN_CELL_DISTANCE`] cells.
pub fn class_templates(classes: usize, seed: u64) -> Result<Vec<Vec<bool>>> {
    let g = TEMPLATE_GRID;
    let band = |horizontal: bool| -> Vec<bool> {
        (0..g * g)
            .map(|k| {
                let (r, c) = (k / g, k % g);
                let pos = if horizontal { r } else { c };
                pos == 1 || pos == 2
            })
            .collect()
    };
    let mut out = vec![band(true), band(false)];
    out.truncate(classes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7465_6d70);
    let mut attempts = 0;
    while out.len() < classes {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "cannot place {classes} templates at cell distance {MIN_CELL_DISTANCE}"
            )));
        }
        let mut cand: Vec<bool> = (0..g * g).map(|k| k < g * g / 2).collect();
        cand.shuffle(&mut rng);
        let far = out
            .iter()
            .all(|t| t.iter().zip(&cand).filter(|(a, b)| a != b).count() >= MIN_CELL_DISTANCE);
        if far {
            out.push(cand);
        }
    }
    Ok(out)
}

/// Minimum number of differing cells between two templates.
pub const MIN_CELL_DISTANCE: usize = 4;

/// Per-class templates plus Gaussian noise, clamped to `[0, 1]`; labels are
/// class-major. Deterministic in `spec.seed`.
pub fn synth_blobs(spec: &SynthSpec) -> Result<LabeledDataset> {
    let side = spec.image_side;
    if spec.classes == 0 || spec.per_class == 0 {
        return Err(Error::invalid("synthetic dataset needs classes and images"));
    }
    if side == 0 || side % TEMPLATE_GRID != 0 {
        return Err(Error::invalid(format!(
            "image side {side} must be a positive multiple of {TEMPLATE_GRID}"
        )));
    }
    if !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(Error::invalid(format!("noise {} must be non-negative", spec.noise)));
    }
    if !(spec.offset >= 0.0 && spec.offset.is_finite()) {
        return Err(Error::invalid(format!("offset {} must be non-negative", spec.offset)));
    }
    if spec.max_shift >= side {
        return Err(Error::invalid(format!("max_shift {} must be below the image side", spec.max_shift)));
    }
    let templates = class_templates(spec.classes, spec.seed)?;
    let cell = side / TEMPLATE_GRID;
    let shift = usize::from(!spec.patch_structured);
    let (lo, hi) = TEMPLATE_LEVELS;
    let n = spec.classes * spec.per_class;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("valid std");
    let plane = side * side;
    let mut data = Vec::with_capacity(n * 3 * plane);
    let mut labels = Vec::with_capacity(n);
    for (class, t) in templates.iter().enumerate() {
        for _ in 0..spec.per_class {
            labels.push(class);
            let ms = spec.max_shift as i64;
            let (dy, dx) = if ms > 0 {
                (rng.gen_range(-ms..=ms), rng.gen_range(-ms..=ms))
            } else {
                (0, 0)
            };
            let off = if spec.offset > 0.0 {
                rng.gen_range(-spec.offset..=spec.offset)
            } else {
                0.0
            };
            let wrap = |p: usize, d: i64| (p as i64 + shift as i64 + d).rem_euclid(side as i64) as usize;
            for _ch in 0..3 {
                for y in 0..side {
                    for x in 0..side {
                        let (cy, cx) = (wrap(y, dy) / cell, wrap(x, dx) / cell);
                        let base = off + if t[cy * TEMPLATE_GRID + cx] { hi } else { lo };
                        let noise = if spec.noise > 0.0 { normal.sample(&mut rng) } else { 0.0 };
                        data.push((base + noise).clamp(0.0, 1.0));
                    }
                }
            }
        }
    }
    let images = ImageBatch::new(n, 3, side, side, data)?;
    LabeledDataset::new(images, labels, spec.classes, Split::Train)
}

/// Seeded disjoint train/val split with `val` images per class.
pub fn split_per_class(ds: &LabeledDataset, val: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut tr, mut va) = (Vec::new(), Vec::new());
    for c in 0..ds.classes {
        let mut idx: Vec<usize> = (0..ds.len()).filter(|&i| ds.labels[i] == c).collect();
        if idx.len() < val {
            return Err(Error::invalid(format!("class {c} has {} images, fewer than {val}", idx.len())));
        }
        idx.shuffle(&mut rng);
        va.extend_from_slice(&idx[..val]);
        tr.extend_from_slice(&idx[val..]);
    }
    tr.shuffle(&mut rng);
    va.sort_unstable();
    let mut train = ds.select(&tr);
    let mut valid = ds.select(&va);
    train.split = Split::Train;
    valid.split = Split::Val;
    Ok((train, valid))
}

/// Random draw helper used by tests and the CLI: a uniformly random label
/// permutation of `ds`.
pub fn shuffled_labels<R: Rng + ?Sized>(ds: &LabeledDataset, rng: &mut R) -> LabeledDataset {
    let mut out = ds.clone();
    out.labels.shuffle(rng);
    out
}
