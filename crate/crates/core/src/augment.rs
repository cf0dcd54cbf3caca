//! Stochastic view pipelines: resized crop, flip, colour jitter, grayscale,
//! Gaussian blur and solarization, applied per image in that order.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::patch_ops::ImageBatch;

/// Which of the two view pipelines to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    First,
    Second,
}

/// Settings of one view pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewAug {
    /// Crop area as a fraction of the image, sampled uniformly.
    pub crop_area: (f64, f64),
    /// Crop aspect ratio, sampled log-uniformly.
    pub crop_aspect: (f64, f64),
    pub flip_prob: f64,
    pub jitter_prob: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: (f64, f64),
    pub solarize_prob: f64,
}

impl ViewAug {
    /// Identity pipeline: every random step off, full-image crop.
    pub fn identity() -> Self {
        Self {
            crop_area: (1.0, 1.0),
            crop_aspect: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            grayscale_prob: 0.0,
            blur_prob: 0.0,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.0,
        }
    }

    fn validate(&self) -> Result<()> {
        let probs = [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
            ("blur_prob", self.blur_prob),
            ("solarize_prob", self.solarize_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!("{name}={p} is not a probability")));
            }
        }
        let ranges = [
            ("crop_area", self.crop_area, 0.0, 1.0),
            ("crop_aspect", self.crop_aspect, 0.0, f64::INFINITY),
            ("blur_sigma", self.blur_sigma, 0.0, f64::INFINITY),
        ];
        for (name, (lo, hi), min, max) in ranges {
            if !(lo > min && lo <= hi && hi <= max) {
                return Err(Error::Config(format!("{name}=[{lo}, {hi}] is not a valid range")));
            }
        }
        let strengths = [
            ("brightness", self.brightness, f64::INFINITY),
            ("contrast", self.contrast, f64::INFINITY),
            ("saturation", self.saturation, f64::INFINITY),
            ("hue", self.hue, 0.5),
        ];
        for (name, v, max) in strengths {
            if !(0.0..=max).contains(&v) {
                return Err(Error::Config(format!("{name}={v} is out of range")));
            }
        }
        Ok(())
    }
}

/// Both view pipelines plus shared settings.
#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub view1: ViewAug,
    pub view2: ViewAug,
    pub solarize_threshold: f64,
    /// Disables jitter and grayscale for data without colour semantics.
    pub color: bool,
}

impl Default for AugConfig {
    /// CIFAR settings: blur always and never solarize in view 1, blur 0.1 and
    /// solarize 0.2 in view 2.
    fn default() -> Self {
        let base = ViewAug {
            crop_area: (0.1, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.2,
            hue: 0.1,
            grayscale_prob: 0.2,
            blur_prob: 1.0,
            blur_sigma: (0.1, 2.0),
            solarize_prob: 0.0,
        };
        let view2 = ViewAug {
            blur_prob: 0.1,
            solarize_prob: 0.2,
            ..base.clone()
        };
        Self {
            view1: base,
            view2,
            solarize_threshold: 0.5,
            color: true,
        }
    }
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.trim()
        .parse()
        .map_err(|_| Error::Config(format!("{key}: {v:?} is not a number")))
}

fn parse_range(key: &str, v: &str) -> Result<(f64, f64)> {
    let (a, b) = v
        .split_once(',')
        .ok_or_else(|| Error::Config(format!("{key}: expected `lo,hi`, got {v:?}")))?;
    Ok((parse_f64(key, a)?, parse_f64(key, b)?))
}

fn set_view(view: &mut ViewAug, key: &str, full_key: &str, v: &str) -> Result<bool> {
    match key {
        "crop_area" => view.crop_area = parse_range(full_key, v)?,
        "crop_aspect" => view.crop_aspect = parse_range(full_key, v)?,
        "flip_prob" => view.flip_prob = parse_f64(full_key, v)?,
        "jitter_prob" => view.jitter_prob = parse_f64(full_key, v)?,
        "brightness" => view.brightness = parse_f64(full_key, v)?,
        "contrast" => view.contrast = parse_f64(full_key, v)?,
        "saturation" => view.saturation = parse_f64(full_key, v)?,
        "hue" => view.hue = parse_f64(full_key, v)?,
        "grayscale_prob" => view.grayscale_prob = parse_f64(full_key, v)?,
        "blur_prob" => view.blur_prob = parse_f64(full_key, v)?,
        "blur_sigma" => view.blur_sigma = parse_range(full_key, v)?,
        "solarize_prob" => view.solarize_prob = parse_f64(full_key, v)?,
        _ => return Ok(false),
    }
    Ok(true)
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        self.view1.validate()?;
        self.view2.validate()?;
        if !(0.0..=1.0).contains(&self.solarize_threshold) {
            return Err(Error::Config(format!(
                "solarize_threshold={} outside [0, 1]",
                self.solarize_threshold
            )));
        }
        Ok(())
    }

    /// Identity pipelines for both views.
    pub fn identity() -> Self {
        Self {
            view1: ViewAug::identity(),
            view2: ViewAug::identity(),
            solarize_threshold: 0.5,
            color: true,
        }
    }

    /// Small grayscale-like images: crops of at least 60% area and flips,
    /// with colour, blur and solarization off.
    pub fn synthetic() -> Self {
        let view = ViewAug {
            crop_area: (0.6, 1.0),
            crop_aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            ..ViewAug::identity()
        };
        Self {
            view1: view.clone(),
            view2: view,
            solarize_threshold: 0.5,
            color: false,
        }
    }

    pub fn view(&self, view: View) -> &ViewAug {
        match view {
            View::First => &self.view1,
            View::Second => &self.view2,
        }
    }

    /// Applies one `key=value` setting. Plain keys set both views;
    /// `view1.` / `view2.` prefixes set one. Returns `false` for unknown keys.
    pub fn set(&mut self, key: &str, value: &str) -> Result<bool> {
        match key {
            "solarize_threshold" => {
                self.solarize_threshold = parse_f64(key, value)?;
                return Ok(true);
            }
            "color" => {
                self.color = value
                    .trim()
                    .parse()
                    .map_err(|_| Error::Config(format!("color: {value:?} is not a bool")))?;
                return Ok(true);
            }
            _ => {}
        }
        if let Some(k) = key.strip_prefix("view1.") {
            return set_view(&mut self.view1, k, key, value);
        }
        if let Some(k) = key.strip_prefix("view2.") {
            return set_view(&mut self.view2, k, key, value);
        }
        let hit = set_view(&mut self.view1, key, key, value)?;
        set_view(&mut self.view2, key, key, value)?;
        Ok(hit)
    }
}

/// Blur kernel width: a tenth of the image side rounded to odd, at least 3.
pub fn blur_kernel_size(side: usize) -> usize {
    let k = (side as f64 / 10.0).round() as usize;
    let k = if k % 2 == 0 { k + 1 } else { k };
    k.max(3)
}

/// `v` below the threshold, `1 - v` otherwise.
pub fn solarize_value(v: f64, threshold: f64) -> f64 {
    if v < threshold {
        v
    } else {
        1.0 - v
    }
}

/// Runs the `view` pipeline on every image. Output keeps the shape and
/// lies in `[0, 1]`.
pub fn augment_view<R: Rng + ?Sized>(
    batch: &ImageBatch,
    cfg: &AugConfig,
    view: View,
    rng: &mut R,
) -> ImageBatch {
    let v = cfg.view(view);
    let (c, h, w) = (batch.channels(), batch.height(), batch.width());
    let mut out = batch.clone();
    for i in 0..batch.len() {
        let img = out.image_mut(i);
        let mut buf = random_resized_crop(img, c, h, w, v, rng);
        if rng.gen_bool(v.flip_prob) {
            flip(&mut buf, c, h, w);
        }
        let rgb = cfg.color && c == 3;
        if rgb && rng.gen_bool(v.jitter_prob) {
            jitter(&mut buf, h * w, v, rng);
        }
        if rgb && rng.gen_bool(v.grayscale_prob) {
            grayscale(&mut buf, h * w);
        }
        if rng.gen_bool(v.blur_prob) {
            let sigma = rng.gen_range(v.blur_sigma.0..=v.blur_sigma.1);
            blur(&mut buf, c, h, w, sigma);
        }
        if rng.gen_bool(v.solarize_prob) {
            for x in buf.iter_mut() {
                *x = solarize_value(*x, cfg.solarize_threshold);
            }
        }
        for (dst, src) in img.iter_mut().zip(&buf) {
            *dst = src.clamp(0.0, 1.0);
        }
    }
    out
}

fn random_resized_crop<R: Rng + ?Sized>(
    img: &[f64],
    c: usize,
    h: usize,
    w: usize,
    v: &ViewAug,
    rng: &mut R,
) -> Vec<f64> {
    let area = (h * w) as f64;
    let (log_lo, log_hi) = (v.crop_aspect.0.ln(), v.crop_aspect.1.ln());
    let mut crop = None;
    for _ in 0..10 {
        let target = area * rng.gen_range(v.crop_area.0..=v.crop_area.1);
        let ratio = rng.gen_range(log_lo..=log_hi).exp();
        let cw = (target * ratio).sqrt().round() as usize;
        let ch = (target / ratio).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.gen_range(0..=h - ch);
            let left = rng.gen_range(0..=w - cw);
            crop = Some((top, left, ch, cw));
            break;
        }
    }
    let (top, left, ch, cw) = crop.unwrap_or((0, 0, h, w));
    let sy = ch as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(ch - 1);
        let ay = fy - y0 as f64;
        for x in 0..w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(cw - 1);
            let ax = fx - x0 as f64;
            for ch_i in 0..c {
                let at = |yy: usize, xx: usize| img[ch_i * h * w + (top + yy) * w + left + xx];
                let mut val = at(y0, x0);
                if ax != 0.0 || ay != 0.0 {
                    val = (1.0 - ay) * ((1.0 - ax) * at(y0, x0) + ax * at(y0, x1))
                        + ay * ((1.0 - ax) * at(y1, x0) + ax * at(y1, x1));
                }
                out[ch_i * h * w + y * w + x] = val;
            }
        }
    }
    out
}

fn flip(buf: &mut [f64], c: usize, h: usize, w: usize) {
    for row in buf.chunks_mut(w).take(c * h) {
        row.reverse();
    }
}

fn luma(buf: &[f64], px: usize, k: usize) -> f64 {
    0.299 * buf[k] + 0.587 * buf[px + k] + 0.114 * buf[2 * px + k]
}

fn grayscale(buf: &mut [f64], px: usize) {
    for k in 0..px {
        let l = luma(buf, px, k);
        for ch in 0..3 {
            buf[ch * px + k] = l;
        }
    }
}

fn clamp_all(buf: &mut [f64]) {
    buf.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
}

fn jitter<R: Rng + ?Sized>(buf: &mut [f64], px: usize, v: &ViewAug, rng: &mut R) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 if v.brightness > 0.0 => {
                let f = rng.gen_range((1.0 - v.brightness).max(0.0)..=1.0 + v.brightness);
                buf.iter_mut().for_each(|x| *x *= f);
            }
            1 if v.contrast > 0.0 => {
                let f = rng.gen_range((1.0 - v.contrast).max(0.0)..=1.0 + v.contrast);
                let mean = (0..px).map(|k| luma(buf, px, k)).sum::<f64>() / px as f64;
                buf.iter_mut().for_each(|x| *x = mean + f * (*x - mean));
            }
            2 if v.saturation > 0.0 => {
                let f = rng.gen_range((1.0 - v.saturation).max(0.0)..=1.0 + v.saturation);
                for k in 0..px {
                    let l = luma(buf, px, k);
                    for ch in 0..3 {
                        let x = &mut buf[ch * px + k];
                        *x = l + f * (*x - l);
                    }
                }
            }
            3 if v.hue > 0.0 => {
                let shift = rng.gen_range(-v.hue..=v.hue);
                for k in 0..px {
                    let (hh, s, val) = rgb_to_hsv(buf[k], buf[px + k], buf[2 * px + k]);
                    let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), s, val);
                    buf[k] = r;
                    buf[px + k] = g;
                    buf[2 * px + k] = b;
                }
            }
            _ => {}
        }
        clamp_all(buf);
    }
}

/// Hue in `[0, 1)`.
fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let s = if max > 0.0 { d / max } else { 0.0 };
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let sector = h6.floor();
    let f = h6 - sector;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match sector as i64 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

/// Separable Gaussian blur with reflected borders.
fn blur(buf: &mut [f64], c: usize, h: usize, w: usize, sigma: f64) {
    let k = blur_kernel_size(h.max(w));
    let r = (k / 2) as isize;
    let mut kernel: Vec<f64> = (-r..=r)
        .map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|v| *v /= s);
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        if n == 1 {
            return 0;
        }
        let period = 2 * (n - 1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let mut tmp = vec![0.0; h * w];
    for plane in buf.chunks_mut(h * w).take(c) {
        for y in 0..h {
            for x in 0..w {
                tmp[y * w + x] = (-r..=r)
                    .zip(&kernel)
                    .map(|(d, kv)| kv * plane[y * w + reflect(x as isize + d, w)])
                    .sum();
            }
        }
        for y in 0..h {
            for x in 0..w {
                plane[y * w + x] = (-r..=r)
                    .zip(&kernel)
                    .map(|(d, kv)| kv * tmp[reflect(y as isize + d, h) * w + x])
                    .sum();
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn batch(n: usize, side: usize, seed: u64) -> ImageBatch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * side * side).map(|_| rng.gen::<f64>()).collect();
        ImageBatch::new(n, 3, side, side, data).unwrap()
    }

    #[test]
    fn defaults_match_table() {
        let cfg = AugConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.view1.crop_area, (0.1, 1.0));
        assert_eq!(cfg.view1.blur_prob, 1.0);
        assert_eq!(cfg.view2.blur_prob, 0.1);
        assert_eq!(cfg.view1.solarize_prob, 0.0);
        assert_eq!(cfg.view2.solarize_prob, 0.2);
        assert_eq!(cfg.view2.grayscale_prob, 0.2);
        assert_eq!((cfg.view2.brightness, cfg.view2.saturation, cfg.view2.hue), (0.4, 0.2, 0.1));
    }

    #[test]
    fn disabled_pipeline_is_identity() {
        let b = batch(4, 8, 1);
        let cfg = AugConfig::identity();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for view in [View::First, View::Second] {
            assert_eq!(augment_view(&b, &cfg, view, &mut rng), b);
        }
    }

    #[test]
    fn seeded_runs_are_identical_and_bounded() {
        let b = batch(6, 16, 3);
        let cfg = AugConfig::default();
        for view in [View::First, View::Second] {
            let a = augment_view(&b, &cfg, view, &mut ChaCha8Rng::seed_from_u64(4));
            let c = augment_view(&b, &cfg, view, &mut ChaCha8Rng::seed_from_u64(4));
            assert_eq!(a.as_array().data(), c.as_array().data());
            assert_eq!(a.as_array().shape(), b.as_array().shape());
            assert!(a.as_array().data().iter().all(|v| (0.0..=1.0).contains(v)));
            assert_ne!(a, b);
        }
    }

    #[test]
    fn solarize_definition() {
        assert_eq!(solarize_value(0.3, 0.5), 0.3);
        assert_eq!(solarize_value(0.5, 0.5), 0.5);
        assert_eq!(solarize_value(0.8, 0.5), 1.0 - 0.8);
        let b = batch(2, 4, 5);
        let cfg = AugConfig {
            view2: ViewAug {
                solarize_prob: 1.0,
                ..ViewAug::identity()
            },
            ..AugConfig::identity()
        };
        let out = augment_view(&b, &cfg, View::Second, &mut ChaCha8Rng::seed_from_u64(0));
        for (o, i) in out.as_array().data().iter().zip(b.as_array().data()) {
            assert_eq!(*o, solarize_value(*i, 0.5));
        }
    }

    #[test]
    fn flip_only_mirrors_rows() {
        let b = batch(1, 4, 6);
        let cfg = AugConfig {
            view1: ViewAug {
                flip_prob: 1.0,
                ..ViewAug::identity()
            },
            ..AugConfig::identity()
        };
        let out = augment_view(&b, &cfg, View::First, &mut ChaCha8Rng::seed_from_u64(0));
        let (src, dst) = (b.image(0), out.image(0));
        for ch in 0..3 {
            for y in 0..4 {
                for x in 0..4 {
                    assert_eq!(dst[ch * 16 + y * 4 + x], src[ch * 16 + y * 4 + 3 - x]);
                }
            }
        }
    }

    #[test]
    fn grayscale_equalizes_channels() {
        let b = batch(2, 4, 7);
        let cfg = AugConfig {
            view1: ViewAug {
                grayscale_prob: 1.0,
                ..ViewAug::identity()
            },
            ..AugConfig::identity()
        };
        let out = augment_view(&b, &cfg, View::First, &mut ChaCha8Rng::seed_from_u64(0));
        let img = out.image(1);
        for k in 0..16 {
            assert_eq!(img[k], img[16 + k]);
            assert_eq!(img[k], img[32 + k]);
        }
        let mut off = cfg.clone();
        off.color = false;
        assert_eq!(augment_view(&b, &off, View::First, &mut ChaCha8Rng::seed_from_u64(0)), b);
    }

    #[test]
    fn blur_preserves_constant_images() {
        let data = vec![0.37; 3 * 10 * 10];
        let b = ImageBatch::new(1, 3, 10, 10, data).unwrap();
        let cfg = AugConfig {
            view1: ViewAug {
                blur_prob: 1.0,
                ..ViewAug::identity()
            },
            ..AugConfig::identity()
        };
        let out = augment_view(&b, &cfg, View::First, &mut ChaCha8Rng::seed_from_u64(1));
        assert!(out.as_array().max_abs_diff(b.as_array()) < 1e-15);
    }

    #[test]
    fn kernel_sizes() {
        assert_eq!(blur_kernel_size(8), 3);
        assert_eq!(blur_kernel_size(32), 3);
        assert_eq!(blur_kernel_size(50), 5);
        assert_eq!(blur_kernel_size(224), 23);
    }

    #[test]
    fn hsv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..1000 {
            let (r, g, b) = (rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>());
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-12 && (g - g2).abs() < 1e-12 && (b - b2).abs() < 1e-12);
        }
    }

    #[test]
    fn config_keys() {
        let mut cfg = AugConfig::default();
        assert!(cfg.set("view2.blur_prob", "0.5").unwrap());
        assert_eq!((cfg.view1.blur_prob, cfg.view2.blur_prob), (1.0, 0.5));
        assert!(cfg.set("crop_area", "0.2, 0.9").unwrap());
        assert_eq!(cfg.view2.crop_area, (0.2, 0.9));
        assert!(!cfg.set("nonsense", "1").unwrap());
        assert!(cfg.set("flip_prob", "abc").is_err());
        cfg.set("flip_prob", "1.5").unwrap();
        assert!(cfg.validate().is_err());
    }
}
