//! Image batches, patch sequences, and batch-shared patch permutations.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::Array;

/// `[N, C, H, W]` pixel values.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBatch {
    data: Array,
}

impl ImageBatch {
    pub fn new(n: usize, c: usize, h: usize, w: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 || c == 0 || h == 0 || w == 0 {
            return Err(Error::invalid(format!(
                "image batch dimensions must be positive, got [{n}, {c}, {h}, {w}]"
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("pixel {pos} of image batch")));
        }
        Ok(Self {
            data: Array::new(&[n, c, h, w], data)?,
        })
    }

    pub fn from_array(data: Array) -> Result<Self> {
        let s = data.shape().to_vec();
        if s.len() != 4 {
            return Err(Error::invalid(format!("image batch must have 4 axes, got {s:?}")));
        }
        Self::new(s[0], s[1], s[2], s[3], data.into_data())
    }

    pub fn len(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn height(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[3]
    }

    pub fn image_len(&self) -> usize {
        self.channels() * self.height() * self.width()
    }

    pub fn as_array(&self) -> &Array {
        &self.data
    }

    pub fn into_array(self) -> Array {
        self.data
    }

    pub fn image(&self, i: usize) -> &[f64] {
        let len = self.image_len();
        &self.data.data()[i * len..(i + 1) * len]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f64] {
        let len = self.image_len();
        &mut self.data.data_mut()[i * len..(i + 1) * len]
    }

    /// Images at `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let s = self.data.shape();
        Self {
            data: Array::new(&[indices.len(), s[1], s[2], s[3]], data).unwrap(),
        }
    }
}

/// `[N, T, D]` patch sequences with `D = C * P * P`, patches in row-major
/// grid order and values within a patch ordered (channel, row, column).
#[derive(Clone, Debug, PartialEq)]
pub struct PatchBatch {
    patches: Array,
    patch_side: usize,
    grid: (usize, usize),
    channels: usize,
}

impl PatchBatch {
    pub fn from_parts(
        patches: Array,
        patch_side: usize,
        grid: (usize, usize),
        channels: usize,
    ) -> Result<Self> {
        let s = patches.shape();
        if s.len() != 3
            || s[1] != grid.0 * grid.1
            || s[2] != channels * patch_side * patch_side
            || s[1] == 0
        {
            return Err(Error::invalid(format!(
                "patch array {s:?} inconsistent with grid {grid:?}, side {patch_side}, {channels} channels"
            )));
        }
        Ok(Self {
            patches,
            patch_side,
            grid,
            channels,
        })
    }

    pub fn len(&self) -> usize {
        self.patches.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Patches per image.
    pub fn tokens(&self) -> usize {
        self.patches.shape()[1]
    }

    /// Values per patch.
    pub fn patch_dim(&self) -> usize {
        self.patches.shape()[2]
    }

    pub fn patch_side(&self) -> usize {
        self.patch_side
    }

    pub fn grid(&self) -> (usize, usize) {
        self.grid
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn as_array(&self) -> &Array {
        &self.patches
    }

    pub fn patch(&self, image: usize, token: usize) -> &[f64] {
        let d = self.patch_dim();
        let start = (image * self.tokens() + token) * d;
        &self.patches.data()[start..start + d]
    }

    fn with_patches(&self, patches: Array) -> Self {
        Self {
            patches,
            patch_side: self.patch_side,
            grid: self.grid,
            channels: self.channels,
        }
    }

    /// Builds a batch of the same geometry where patch `(i, j)` is copied
    /// from `source(i, j)`.
    pub(crate) fn gather(&self, source: impl Fn(usize, usize) -> (usize, usize)) -> Self {
        let (n, t, d) = (self.len(), self.tokens(), self.patch_dim());
        let mut data = Vec::with_capacity(n * t * d);
        for i in 0..n {
            for j in 0..t {
                let (si, sj) = source(i, j);
                data.extend_from_slice(self.patch(si, sj));
            }
        }
        self.with_patches(Array::new(&[n, t, d], data).unwrap())
    }
}

/// A bijection `k` on `0..T` and its inverse `r = argsort(k)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Permutation {
    forward: Vec<usize>,
    inverse: Vec<usize>,
}

impl Permutation {
    pub fn identity(len: usize) -> Self {
        let forward: Vec<usize> = (0..len).collect();
        Self {
            inverse: forward.clone(),
            forward,
        }
    }

    pub fn from_forward(forward: Vec<usize>) -> Result<Self> {
        let mut inverse = vec![usize::MAX; forward.len()];
        for (j, &k) in forward.iter().enumerate() {
            if k >= forward.len() || inverse[k] != usize::MAX {
                return Err(Error::invalid(format!(
                    "not a permutation of 0..{}: entry {k} at position {j}",
                    forward.len()
                )));
            }
            inverse[k] = j;
        }
        Ok(Self { forward, inverse })
    }

    /// Uniformly random permutation (Fisher–Yates).
    pub fn sample<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Self {
        let mut forward: Vec<usize> = (0..len).collect();
        forward.shuffle(rng);
        Self::from_forward(forward).expect("shuffle of 0..len is a permutation")
    }

    pub fn forward(&self) -> &[usize] {
        &self.forward
    }

    pub fn inverse(&self) -> &[usize] {
        &self.inverse
    }

    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }
}

/// Uniformly random permutation of `0..len`; deterministic for a seeded `rng`.
pub fn sample_permutation<R: Rng + ?Sized>(len: usize, rng: &mut R) -> Result<Permutation> {
    if len == 0 {
        return Err(Error::invalid("permutation length must be at least 1"));
    }
    Ok(Permutation::sample(len, rng))
}

/// Splits every image into non-overlapping `patch_side` squares.
pub fn patchify(batch: &ImageBatch, patch_side: usize) -> Result<PatchBatch> {
    if patch_side == 0 {
        return Err(Error::invalid("patch side must be positive"));
    }
    let (n, c, h, w) = (batch.len(), batch.channels(), batch.height(), batch.width());
    if h % patch_side != 0 {
        return Err(Error::invalid(format!(
            "height {h} is not divisible by patch side {patch_side}"
        )));
    }
    if w % patch_side != 0 {
        return Err(Error::invalid(format!(
            "width {w} is not divisible by patch side {patch_side}"
        )));
    }
    let p = patch_side;
    let (gh, gw) = (h / p, w / p);
    let t = gh * gw;
    let d = c * p * p;
    let src = batch.as_array().data();
    let mut data = Vec::with_capacity(n * t * d);
    for i in 0..n {
        let img = &src[i * c * h * w..(i + 1) * c * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                for ch in 0..c {
                    for py in 0..p {
                        let row = ch * h * w + (gy * p + py) * w + gx * p;
                        data.extend_from_slice(&img[row..row + p]);
                    }
                }
            }
        }
    }
    PatchBatch::from_parts(Array::new(&[n, t, d], data)?, p, (gh, gw), c)
}

/// Inverse of [`patchify`].
pub fn unpatchify(pb: &PatchBatch) -> ImageBatch {
    let (n, c, p) = (pb.len(), pb.channels(), pb.patch_side());
    let (gh, gw) = pb.grid();
    let (h, w) = (gh * p, gw * p);
    let mut data = vec![0.0; n * c * h * w];
    for i in 0..n {
        let img = &mut data[i * c * h * w..(i + 1) * c * h * w];
        for gy in 0..gh {
            for gx in 0..gw {
                let patch = pb.patch(i, gy * gw + gx);
                for ch in 0..c {
                    for py in 0..p {
                        let row = ch * h * w + (gy * p + py) * w + gx * p;
                        let off = (ch * p + py) * p;
                        img[row..row + p].copy_from_slice(&patch[off..off + p]);
                    }
                }
            }
        }
    }
    ImageBatch {
        data: Array::new(&[n, c, h, w], data).unwrap(),
    }
}

fn check_len(pb: &PatchBatch, perm: &Permutation) -> Result<()> {
    if perm.len() != pb.tokens() {
        return Err(Error::invalid(format!(
            "permutation length {} does not match {} patches per image",
            perm.len(),
            pb.tokens()
        )));
    }
    Ok(())
}

/// `out[i][j] = pb[i][k(j)]` with one permutation shared by every image.
pub fn shuffle(pb: &PatchBatch, perm: &Permutation) -> Result<PatchBatch> {
    check_len(pb, perm)?;
    let k = perm.forward();
    Ok(pb.gather(|i, j| (i, k[j])))
}

/// `out[i][j] = pb[i][r(j)]`, restoring the order [`shuffle`] disturbed.
pub fn unshuffle(pb: &PatchBatch, perm: &Permutation) -> Result<PatchBatch> {
    check_len(pb, perm)?;
    let r = perm.inverse();
    Ok(pb.gather(|i, j| (i, r[j])))
}
