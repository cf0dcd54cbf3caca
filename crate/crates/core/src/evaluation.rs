//! kNN and linear-probe protocols, normalized similarity scores and
//! class-token attention maps.

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::LabeledDataset;
use crate::encoder::{bind, is_decay_exempt, represent, trace_backbone, EncoderParams, ParamSet};
use crate::error::{Error, Result};
use crate::numerics::{Array, Tape};
use crate::patch_ops::{patchify, ImageBatch};
use crate::trainer::AdamW;

pub const DEFAULT_K: usize = 20;
pub const DEFAULT_KNN_TEMPERATURE: f64 = 0.07;
pub const DEFAULT_SIMILARITY_TEMPERATURE: f64 = 0.07;

fn normalize_rows(features: &Array) -> Result<Array> {
    if features.ndim() != 2 {
        return Err(Error::invalid(format!("features must be 2-D, got {:?}", features.shape())));
    }
    let mut out = features.clone();
    for i in 0..features.shape()[0] {
        let row = out.row_mut(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 || !norm.is_finite() {
            return Err(Error::invalid(format!("feature row {i} has norm {norm}")));
        }
        row.iter_mut().for_each(|v| *v /= norm);
    }
    Ok(out)
}

/// Unit-norm features with labels.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBank {
    features: Array,
    labels: Vec<usize>,
    classes: usize,
}

impl FeatureBank {
    /// Normalizes each row of `features`.
    pub fn new(features: &Array, labels: Vec<usize>, classes: usize) -> Result<Self> {
        let features = normalize_rows(features)?;
        if features.shape()[0] != labels.len() {
            return Err(Error::invalid(format!(
                "{} feature rows but {} labels",
                features.shape()[0],
                labels.len()
            )));
        }
        if let Some(l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid(format!("label {l} outside 0..{classes}")));
        }
        Ok(Self {
            features,
            labels,
            classes,
        })
    }

    pub fn features(&self) -> &Array {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }
}

/// Backbone features of a whole dataset, computed in chunks.
pub fn extract_features(enc: &EncoderParams, images: &ImageBatch, chunk: usize) -> Result<Array> {
    let n = images.len();
    let mut data = Vec::with_capacity(n * enc.cfg.dim);
    let idx: Vec<usize> = (0..n).collect();
    for part in idx.chunks(chunk.max(1)) {
        let pb = patchify(&images.select(part), enc.cfg.patch_side)?;
        data.extend(represent(&enc.params, &enc.cfg, &pb)?.into_data());
    }
    Array::new(&[n, enc.cfg.dim], data)
}

pub fn feature_bank(enc: &EncoderParams, ds: &LabeledDataset) -> Result<FeatureBank> {
    FeatureBank::new(&extract_features(enc, &ds.images, 256)?, ds.labels.clone(), ds.classes)
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnnResult {
    pub predictions: Vec<usize>,
    /// Fraction correct when labels were supplied.
    pub accuracy: Option<f64>,
}

impl KnnResult {
    /// `class,correct,total,accuracy` rows.
    pub fn per_class_csv(&self, labels: &[usize], classes: usize) -> String {
        let mut hit = vec![0usize; classes];
        let mut tot = vec![0usize; classes];
        for (&p, &l) in self.predictions.iter().zip(labels) {
            tot[l] += 1;
            hit[l] += usize::from(p == l);
        }
        let mut s = String::from("class,correct,total,accuracy\n");
        for c in 0..classes {
            let acc = if tot[c] > 0 { hit[c] as f64 / tot[c] as f64 } else { 0.0 };
            writeln!(s, "{c},{},{},{acc}", hit[c], tot[c]).expect("writing to a String");
        }
        s
    }
}

/// Similarity-weighted vote of the `k` nearest bank rows; weights are
/// `exp(sim / tau)` and ties go to the smaller class index.
pub fn knn_classify(
    bank: &FeatureBank,
    queries: &Array,
    labels: Option<&[usize]>,
    k: usize,
    tau: f64,
) -> Result<KnnResult> {
    if bank.is_empty() {
        return Err(Error::invalid("kNN bank is empty"));
    }
    if k == 0 || k > bank.len() {
        return Err(Error::invalid(format!("k={k} must be in 1..={}", bank.len())));
    }
    if !(tau > 0.0) {
        return Err(Error::invalid(format!("kNN temperature {tau} must be positive")));
    }
    let q = normalize_rows(queries)?;
    let d = bank.features.shape()[1];
    if q.shape()[1] != d {
        return Err(Error::Shape {
            op: "knn_classify",
            lhs: q.shape().to_vec(),
            rhs: bank.features.shape().to_vec(),
        });
    }
    let nq = q.shape()[0];
    let mut predictions = Vec::with_capacity(nq);
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(bank.len());
    for i in 0..nq {
        let qi = q.row(i);
        order.clear();
        order.extend((0..bank.len()).map(|j| {
            let s: f64 = qi.iter().zip(bank.features.row(j)).map(|(a, b)| a * b).sum();
            (s, j)
        }));
        order.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes = vec![0.0; bank.classes];
        // subtracting the top similarity keeps exp finite for small tau
        let top = order[0].0;
        for &(s, j) in &order[..k] {
            votes[bank.labels[j]] += ((s - top) / tau).exp();
        }
        let mut best = 0;
        for c in 1..votes.len() {
            if votes[c] > votes[best] {
                best = c;
            }
        }
        predictions.push(best);
    }
    let accuracy = match labels {
        Some(l) if l.len() == nq => {
            Some(predictions.iter().zip(l).filter(|(p, t)| p == t).count() as f64 / nq.max(1) as f64)
        }
        Some(l) => {
            return Err(Error::invalid(format!("{} labels for {nq} queries", l.len())));
        }
        None => None,
    };
    Ok(KnnResult {
        predictions,
        accuracy,
    })
}

/// `exp(sim(a, b_j) / tau) / exp(1 / tau)` for each key row; inputs are
/// normalized first.
pub fn similarity_scores(query: &[f64], keys: &Array, tau: f64) -> Result<Vec<f64>> {
    let q = normalize_rows(&Array::new(&[1, query.len()], query.to_vec())?)?;
    let k = normalize_rows(keys)?;
    if k.shape()[1] != query.len() {
        return Err(Error::Shape {
            op: "similarity_scores",
            lhs: vec![query.len()],
            rhs: keys.shape().to_vec(),
        });
    }
    Ok((0..k.shape()[0])
        .map(|j| {
            let s: f64 = q.row(0).iter().zip(k.row(j)).map(|(a, b)| a * b).sum();
            similarity_score(s, tau)
        })
        .collect())
}

/// Normalized score of one cosine similarity.
pub fn similarity_score(sim: f64, tau: f64) -> f64 {
    ((sim - 1.0) / tau).exp()
}

/// `query_id,key_id,score` rows for every query against every key.
pub fn similarity_csv(queries: &Array, keys: &Array, tau: f64) -> Result<String> {
    let mut s = String::from("query_id,key_id,score\n");
    for i in 0..queries.shape()[0] {
        for (j, v) in similarity_scores(queries.row(i), keys, tau)?.iter().enumerate() {
            writeln!(s, "{i},{j},{v}").expect("writing to a String");
        }
    }
    Ok(s)
}

/// Linear classifier training on top of the backbone.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub batch: usize,
    /// Also update the backbone (fine-tuning).
    pub unfreeze_backbone: bool,
    pub seed: u64,
}

impl ProbeConfig {
    /// Frozen backbone.
    pub fn linear() -> Self {
        Self {
            epochs: 100,
            lr: 1e-2,
            weight_decay: 0.0,
            batch: 64,
            unfreeze_backbone: false,
            seed: 0,
        }
    }

    /// Backbone trained jointly with the classifier.
    pub fn finetune() -> Self {
        Self {
            epochs: 20,
            lr: 1e-3,
            weight_decay: 0.05,
            batch: 32,
            unfreeze_backbone: true,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub val_accuracy: f64,
    pub val_predictions: Vec<usize>,
}

const HEAD_W: &str = "probe.weight";
const HEAD_B: &str = "probe.bias";

fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / labels.len().max(1) as f64
}

/// Softmax-regression on precomputed features. Features are standardized
/// with training statistics.
pub fn train_linear(
    train: &Array,
    train_labels: &[usize],
    val: &Array,
    val_labels: &[usize],
    classes: usize,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    let (n, d) = (train.shape()[0], train.shape()[1]);
    if n == 0 || train_labels.len() != n || val.shape()[1] != d || val_labels.len() != val.shape()[0] {
        return Err(Error::invalid("probe features and labels disagree"));
    }
    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    for i in 0..n {
        for ((s, v), m) in std.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));
    let standardize = |a: &Array| {
        let cols = a.shape()[1];
        Array::from_fn(a.shape(), |k| (a.data()[k] - mean[k % cols]) / std[k % cols])
    };
    let (xtr, xva) = (standardize(train), standardize(val));

    let mut head = ParamSet::new();
    head.insert(HEAD_W, Array::zeros(&[d, classes]));
    head.insert(HEAD_B, Array::zeros(&[classes]));
    let mut opt = AdamW::new(&head);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for part in idx.chunks(cfg.batch.max(1)) {
            let x = Array::from_fn(&[part.len(), d], |k| xtr.row(part[k / d])[k % d]);
            let y: Vec<usize> = part.iter().map(|&i| train_labels[i]).collect();
            let mut tape = Tape::new();
            let p = bind(&mut tape, &head, true);
            let xv = tape.constant(x);
            let loss = classifier_loss(&mut tape, &p, xv, &y, classes)?;
            let mut g = tape.backward(loss);
            let mut grads = ParamSet::new();
            for name in [HEAD_W, HEAD_B] {
                if let Some(a) = g.take(p.get(name)?) {
                    grads.insert(name, a);
                }
            }
            opt.step(&mut head, &grads, cfg.lr, cfg.weight_decay, is_decay_exempt)?;
        }
    }
    let predict = |x: &Array| -> Result<Vec<usize>> {
        let mut tape = Tape::new();
        let p = bind(&mut tape, &head, false);
        let xv = tape.constant(x.clone());
        let logits = linear_head(&mut tape, &p, xv)?;
        Ok(argmax_rows(tape.value(logits)))
    };
    let train_pred = predict(&xtr)?;
    let val_predictions = predict(&xva)?;
    Ok(ProbeReport {
        train_accuracy: accuracy(&train_pred, train_labels),
        val_accuracy: accuracy(&val_predictions, val_labels),
        val_predictions,
    })
}

fn linear_head(tape: &mut Tape, p: &crate::encoder::Bound, x: crate::numerics::Var) -> Result<crate::numerics::Var> {
    let y = tape.matmul(x, p.get(HEAD_W)?)?;
    tape.add(y, p.get(HEAD_B)?)
}

fn classifier_loss(
    tape: &mut Tape,
    p: &crate::encoder::Bound,
    x: crate::numerics::Var,
    labels: &[usize],
    classes: usize,
) -> Result<crate::numerics::Var> {
    let logits = linear_head(tape, p, x)?;
    let logp = tape.log_softmax(logits, 1)?;
    let n = labels.len();
    let onehot = Array::from_fn(&[n, classes], |k| {
        if labels[k / classes] == k % classes {
            -1.0 / n as f64
        } else {
            0.0
        }
    });
    let w = tape.constant(onehot);
    let picked = tape.mul(logp, w)?;
    Ok(tape.sum(picked))
}

fn argmax_rows(a: &Array) -> Vec<usize> {
    (0..a.shape()[0])
        .map(|i| {
            let r = a.row(i);
            (1..r.len()).fold(0, |best, c| if r[c] > r[best] { c } else { best })
        })
        .collect()
}

/// Linear probe (or fine-tuning when `cfg.unfreeze_backbone`) of `enc`
/// on labelled data; returns train and validation accuracy. The encoder
/// passed in is never modified.
pub fn linear_probe(
    enc: &EncoderParams,
    train: &LabeledDataset,
    val: &LabeledDataset,
    cfg: &ProbeConfig,
) -> Result<ProbeReport> {
    if !cfg.unfreeze_backbone {
        let ftr = extract_features(enc, &train.images, 256)?;
        let fva = extract_features(enc, &val.images, 256)?;
        return train_linear(&ftr, &train.labels, &fva, &val.labels, train.classes, cfg);
    }
    let classes = train.classes;
    let mut params = enc.params.filter(|n| !n.starts_with("proj.") && !n.starts_with("pred."));
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = rand_distr::Normal::new(0.0, 0.02).expect("valid std");
    params.insert(
        HEAD_W,
        Array::from_fn(&[enc.cfg.dim, classes], |_| rand_distr::Distribution::sample(&normal, &mut rng)),
    );
    params.insert(HEAD_B, Array::zeros(&[classes]));
    let mut opt = AdamW::new(&params);
    let mut idx: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        idx.shuffle(&mut rng);
        for part in idx.chunks(cfg.batch.max(1)) {
            let pb = patchify(&train.images.select(part), enc.cfg.patch_side)?;
            let y: Vec<usize> = part.iter().map(|&i| train.labels[i]).collect();
            let mut tape = Tape::new();
            let p = bind(&mut tape, &params, true);
            let rep = crate::encoder::forward_backbone(&mut tape, &p, &enc.cfg, &pb)?;
            let loss = classifier_loss(&mut tape, &p, rep, &y, classes)?;
            let mut g = tape.backward(loss);
            let mut grads = ParamSet::new();
            for (name, _) in params.iter() {
                if let Some(a) = g.take(p.get(name)?) {
                    grads.insert(name, a);
                }
            }
            opt.step(&mut params, &grads, cfg.lr, cfg.weight_decay, is_decay_exempt)?;
        }
    }
    let predict = |images: &ImageBatch| -> Result<Vec<usize>> {
        let mut out = Vec::with_capacity(images.len());
        let idx: Vec<usize> = (0..images.len()).collect();
        for part in idx.chunks(256) {
            let pb = patchify(&images.select(part), enc.cfg.patch_side)?;
            let mut tape = Tape::new();
            let p = bind(&mut tape, &params, false);
            let rep = crate::encoder::forward_backbone(&mut tape, &p, &enc.cfg, &pb)?;
            let logits = linear_head(&mut tape, &p, rep)?;
            out.extend(argmax_rows(tape.value(logits)));
        }
        Ok(out)
    };
    let train_pred = predict(&train.images)?;
    let val_predictions = predict(&val.images)?;
    Ok(ProbeReport {
        train_accuracy: accuracy(&train_pred, &train.labels),
        val_accuracy: accuracy(&val_predictions, &val.labels),
        val_predictions,
    })
}

/// Last-block attention from the class token to every patch, per head, as
/// `[heads, grid_h, grid_w]` for each image.
pub fn attention_maps(enc: &EncoderParams, images: &ImageBatch) -> Result<Vec<Array>> {
    let pb = patchify(images, enc.cfg.patch_side)?;
    let (gh, gw) = pb.grid();
    let mut tape = Tape::new();
    let p = bind(&mut tape, &enc.params, false);
    let trace = trace_backbone(&mut tape, &p, &enc.cfg, &pb)?;
    let last = trace
        .attention
        .last()
        .ok_or_else(|| Error::invalid("attention maps need at least one block"))?;
    let probs = tape.value(*last);
    let heads = enc.cfg.heads;
    let t1 = pb.tokens() + 1;
    Ok((0..images.len())
        .map(|i| {
            Array::from_fn(&[heads, gh, gw], |k| {
                let (h, tok) = (k / (gh * gw), k % (gh * gw));
                probs.data()[((i * heads + h) * t1) * t1 + 1 + tok]
            })
        })
        .collect())
}

/// Tiles per-head maps side by side, each rescaled to `[0, 1]` and
/// enlarged by `scale`, as a grayscale `(width, height, pixels)` image.
pub fn attention_grid(map: &Array, scale: usize) -> (usize, usize, Vec<u8>) {
    let (heads, gh, gw) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let scale = scale.max(1);
    let gap = 1;
    let width = heads * gw * scale + (heads.saturating_sub(1)) * gap;
    let height = gh * scale;
    let mut px = vec![0u8; width * height];
    for h in 0..heads {
        let cell = &map.data()[h * gh * gw..(h + 1) * gh * gw];
        let lo = cell.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = cell.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let range = if hi > lo { hi - lo } else { 1.0 };
        for y in 0..height {
            for x in 0..gw * scale {
                let v = (cell[(y / scale) * gw + x / scale] - lo) / range;
                px[y * width + h * (gw * scale + gap) + x] = (v * 255.0).round() as u8;
            }
        }
    }
    (width, height, px)
}
