//! Reverse-mode differentiation over dense arrays.
//!
//! Operations are recorded on a [`Tape`] in execution order. Node ids are
//! therefore already a topological order, and [`Tape::backward`] walks them
//! once in reverse, accumulating adjoints additively where a value fans out.

use super::array::{gemm, lanes, Array};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Batch statistics computed by [`Tape::batch_norm`].
#[derive(Clone, Debug)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    BroadcastTo(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LayerNorm { x: Var, rstd: Vec<f64> },
    BatchNorm { x: Var, rstd: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Gelu(Var),
    Relu(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. Single owner during forward and backward.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Array>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when no gradient reached it.
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Adjoint of `v`, materializing zeros when no gradient reached it.
    pub fn wrt(&self, v: Var) -> Array {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Array::zeros(&self.shapes[v.0]))
    }

    pub fn take(&mut self, v: Var) -> Option<Array> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn suffix_broadcastable(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Array, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives gradient.
    pub fn constant(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Same value as `x`; contributes nothing to the backward pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let value = self.value(x).clone();
        self.constant(value)
    }

    fn binary(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Array> {
        let (av, bv) = (self.value(a), self.value(b));
        if !suffix_broadcastable(av.shape(), bv.shape()) {
            return Err(Error::Shape {
                op,
                lhs: av.shape().to_vec(),
                rhs: bv.shape().to_vec(),
            });
        }
        let nb = bv.len().max(1);
        let bd = bv.data();
        let data = av
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, bd[i % nb]))
            .collect();
        Array::new(av.shape(), data)
    }

    /// `a + b`, with `b` repeated over the leading axes of `a` when its shape
    /// is a suffix of `a`'s.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    /// Elementwise product with the same broadcasting rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let out = self.value(x).map(|v| v * factor);
        self.push_op(out, Op::Scale(x, factor), &[x])
    }

    /// `[.., k] x [k, n] -> [.., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let rows = av.len() / k.max(1);
        let mut out_shape = sa.to_vec();
        *out_shape.last_mut().unwrap() = n;
        let mut out = vec![0.0; rows * n];
        gemm(
            rows,
            k,
            n,
            av.data(),
            k as isize,
            1,
            bv.data(),
            n as isize,
            1,
            &mut out,
            false,
        );
        let out = Array::new(&out_shape, out)?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched `[B, m, k] x [B, k, n]`, or `[B, m, k] x [B, n, k]ᵀ` when
    /// `trans_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        let err = || Error::Shape {
            op: "batch_matmul",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, n) = if trans_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if kb != k {
            return Err(err());
        }
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            gemm(
                m,
                k,
                n,
                &av.data()[bi * m * k..(bi + 1) * m * k],
                k as isize,
                1,
                &bv.data()[bi * k * n..(bi + 1) * k * n],
                rsb,
                csb,
                &mut out[bi * m * n..(bi + 1) * m * n],
                false,
            );
        }
        let out = Array::new(&[batch, m, n], out)?;
        Ok(self.push_op(out, Op::BatchMatMul { a, b, trans_b }, &[a, b]))
    }

    /// Reorders axes: output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = vec![false; axes.len()];
        let valid = axes.len() == xv.ndim()
            && axes.iter().all(|&a| a < seen.len() && !std::mem::replace(&mut seen[a], true));
        if !valid {
            return Err(Error::Shape {
                op: "permute",
                lhs: xv.shape().to_vec(),
                rhs: axes.to_vec(),
            });
        }
        let out = permute_array(xv, axes);
        Ok(self.push_op(out, Op::Permute(x, axes.to_vec()), &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.value(x).ndim();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 1, nd - 2);
        self.permute(x, &axes)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    /// Repeats `x` over new leading axes so it takes `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if !suffix_broadcastable(shape, xv.shape()) {
            return Err(Error::Shape {
                op: "broadcast_to",
                lhs: xv.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let reps = shape.iter().product::<usize>() / xv.len().max(1);
        let mut data = Vec::with_capacity(reps * xv.len());
        for _ in 0..reps {
            data.extend_from_slice(xv.data());
        }
        let out = Array::new(shape, data)?;
        Ok(self.push_op(out, Op::BroadcastTo(x), &[x]))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::invalid(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = lanes(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let n = pv.shape()[axis];
                data.extend_from_slice(&pv.data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let out = Array::new(&shape, data)?;
        Ok(self.push_op(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::Shape {
                op: "slice",
                lhs: s.to_vec(),
                rhs: vec![axis, start, len],
            });
        }
        let (outer, n, inner) = lanes(s, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.to_vec();
        shape[axis] = len;
        let out = Array::new(&shape, data)?;
        Ok(self.push_op(out, Op::Slice { x, axis, start }, &[x]))
    }

    fn check_axis(&self, op: &'static str, x: Var, axis: usize) -> Result<()> {
        if axis >= self.value(x).ndim() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(x).to_vec(),
                rhs: vec![axis],
            });
        }
        Ok(())
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("softmax", x, axis)?;
        let xv = self.value(x);
        let mut out = xv.clone();
        for_each_lane(xv.shape(), axis, |idx| {
            let m = idx.clone().map(|i| xv.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for i in idx.clone() {
                let e = (xv.data()[i] - m).exp();
                out.data_mut()[i] = e;
                z += e;
            }
            for i in idx {
                out.data_mut()[i] /= z;
            }
        });
        Ok(self.push_op(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.check_axis("log_softmax", x, axis)?;
        let xv = self.value(x);
        let mut out = xv.clone();
        for_each_lane(xv.shape(), axis, |idx| {
            let m = idx.clone().map(|i| xv.data()[i]).fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = idx.clone().map(|i| (xv.data()[i] - m).exp()).sum();
            let lse = m + z.ln();
            for i in idx {
                out.data_mut()[i] = xv.data()[i] - lse;
            }
        });
        Ok(self.push_op(out, Op::LogSoftmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis to zero mean and unit variance. No affine.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let d = xv.shape()[xv.ndim() - 1];
        let rows = xv.len() / d.max(1);
        let mut out = xv.clone();
        let mut rstd = Vec::with_capacity(rows);
        for (src, dst) in xv.data().chunks(d).zip(out.data_mut().chunks_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            for (o, s) in dst.iter_mut().zip(src) {
                *o = (s - mean) * r;
            }
            rstd.push(r);
        }
        Ok(self.push_op(out, Op::LayerNorm { x, rstd }, &[x]))
    }

    /// Normalizes each column of an `[N, F]` array with batch statistics. No affine.
    pub fn batch_norm(&mut self, x: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let xv = self.value(x);
        if xv.ndim() != 2 || xv.shape()[0] == 0 {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (n, f) = (xv.shape()[0], xv.shape()[1]);
        let mut mean = vec![0.0; f];
        let mut var = vec![0.0; f];
        for row in xv.data().chunks(f) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        for row in xv.data().chunks(f) {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s /= n as f64);
        let rstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(f) {
            for ((o, m), r) in row.iter_mut().zip(&mean).zip(&rstd) {
                *o = (*o - m) * r;
            }
        }
        let v = self.push_op(out, Op::BatchNorm { x, rstd }, &[x]);
        Ok((v, BatchStats { mean, var }))
    }

    /// Scales each lane along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() == 0 {
            return Err(Error::Shape {
                op: "l2_normalize",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let d = xv.shape()[xv.ndim() - 1];
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(xv.len() / d.max(1));
        for (row, chunk) in out.data_mut().chunks_mut(d).enumerate() {
            let norm = chunk.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::invalid(format!("l2_normalize: row {row} has zero norm")));
            }
            chunk.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        Ok(self.push_op(out, Op::L2Normalize { x, norms }, &[x]))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self
            .value(x)
            .map(|v| 0.5 * v * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2)));
        self.push_op(out, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x), &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::abs);
        self.push_op(out, Op::Abs(x), &[x])
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::exp);
        self.push_op(out, Op::Exp(x), &[x])
    }

    pub fn log(&mut self, x: Var) -> Var {
        let out = self.value(x).map(f64::ln);
        self.push_op(out, Op::Log(x), &[x])
    }

    /// Sum of all elements as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let out = Array::scalar(self.value(x).sum());
        self.push_op(out, Op::Sum(x), &[x])
    }

    /// Mean of all elements as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let out = Array::scalar(v.sum() / v.len() as f64);
        self.push_op(out, Op::Mean(x), &[x])
    }

    /// Propagates adjoints from `output`, seeded with ones.
    pub fn backward(&self, output: Var) -> Gradients {
        let mut grads: Vec<Option<Array>> = Vec::new();
        grads.resize_with(output.0 + 1, || None);
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        if self.nodes[output.0].needs_grad {
            grads[output.0] = Some(Array::full(self.shape(output), 1.0));
        }
        for id in (0..=output.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Gradients { grads, shapes }
    }

    fn propagate(&self, id: usize, g: &Array, grads: &mut [Option<Array>]) {
        let node = &self.nodes[id];
        let y = &node.value;
        let mut acc = |v: Var, delta: Array| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone());
                let bs = self.shape(*b);
                acc(*b, reduce_leading(g, bs));
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone());
                let neg = g.map(|v| -v);
                acc(*b, reduce_leading(&neg, self.shape(*b)));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let nb = bv.len().max(1);
                let da = Array::from_fn(g.shape(), |i| g.data()[i] * bv.data()[i % nb]);
                let prod = Array::from_fn(g.shape(), |i| g.data()[i] * av.data()[i]);
                acc(*a, da);
                acc(*b, reduce_leading(&prod, bv.shape()));
            }
            Op::Scale(x, f) => acc(*x, g.map(|v| v * f)),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (k, n) = (bv.shape()[0], bv.shape()[1]);
                let rows = av.len() / k.max(1);
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; rows * k];
                    gemm(rows, n, k, g.data(), n as isize, 1, bv.data(), 1, n as isize, &mut da, false);
                    acc(*a, Array::new(av.shape(), da).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; k * n];
                    gemm(k, rows, n, av.data(), 1, k as isize, g.data(), n as isize, 1, &mut db, false);
                    acc(*b, Array::new(bv.shape(), db).unwrap());
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (batch, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = y.shape()[2];
                if self.nodes[a.0].needs_grad {
                    let mut da = vec![0.0; batch * m * k];
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            &g.data()[bi * m * n..(bi + 1) * m * n],
                            n as isize,
                            1,
                            &bv.data()[bi * k * n..(bi + 1) * k * n],
                            rs,
                            cs,
                            &mut da[bi * m * k..(bi + 1) * m * k],
                            false,
                        );
                    }
                    acc(*a, Array::new(av.shape(), da).unwrap());
                }
                if self.nodes[b.0].needs_grad {
                    let mut db = vec![0.0; batch * k * n];
                    for bi in 0..batch {
                        let ga = &g.data()[bi * m * n..(bi + 1) * m * n];
                        let aa = &av.data()[bi * m * k..(bi + 1) * m * k];
                        let out = &mut db[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm(n, m, k, ga, 1, n as isize, aa, k as isize, 1, out, false);
                        } else {
                            gemm(k, m, n, aa, 1, k as isize, ga, n as isize, 1, out, false);
                        }
                    }
                    acc(*b, Array::new(bv.shape(), db).unwrap());
                }
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                acc(*x, permute_array(g, &inverse));
            }
            Op::Reshape(x) => acc(*x, g.clone().reshape(self.shape(*x)).unwrap()),
            Op::BroadcastTo(x) => acc(*x, reduce_leading(g, self.shape(*x))),
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = lanes(g.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p);
                    let n = ps[*axis];
                    let mut data = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let base = o * total * inner + offset * inner;
                        data.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    acc(p, Array::new(ps, data).unwrap());
                    offset += n;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.shape(*x);
                let (outer, n, inner) = lanes(xs, *axis);
                let len = g.shape()[*axis];
                let mut dx = Array::zeros(xs);
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    dx.data_mut()[base..base + len * inner]
                        .copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let mut dx = Array::zeros(y.shape());
                for_each_lane(y.shape(), *axis, |idx| {
                    let dot: f64 = idx.clone().map(|i| g.data()[i] * y.data()[i]).sum();
                    for i in idx {
                        dx.data_mut()[i] = y.data()[i] * (g.data()[i] - dot);
                    }
                });
                acc(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let mut dx = Array::zeros(y.shape());
                for_each_lane(y.shape(), *axis, |idx| {
                    let total: f64 = idx.clone().map(|i| g.data()[i]).sum();
                    for i in idx {
                        dx.data_mut()[i] = g.data()[i] - y.data()[i].exp() * total;
                    }
                });
                acc(*x, dx);
            }
            Op::LayerNorm { x, rstd } => {
                let d = y.shape()[y.ndim() - 1];
                let mut dx = Array::zeros(y.shape());
                for (((gy, yy), out), r) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .zip(rstd)
                {
                    let mg = gy.iter().sum::<f64>() / d as f64;
                    let mgy = gy.iter().zip(yy).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for ((o, a), b) in out.iter_mut().zip(gy).zip(yy) {
                        *o = r * (a - mg - b * mgy);
                    }
                }
                acc(*x, dx);
            }
            Op::BatchNorm { x, rstd } => {
                let (n, f) = (y.shape()[0], y.shape()[1]);
                let mut mg = vec![0.0; f];
                let mut mgy = vec![0.0; f];
                for (gy, yy) in g.data().chunks(f).zip(y.data().chunks(f)) {
                    for c in 0..f {
                        mg[c] += gy[c];
                        mgy[c] += gy[c] * yy[c];
                    }
                }
                let mut dx = Array::zeros(y.shape());
                for ((gy, yy), out) in g
                    .data()
                    .chunks(f)
                    .zip(y.data().chunks(f))
                    .zip(dx.data_mut().chunks_mut(f))
                {
                    for c in 0..f {
                        out[c] = rstd[c] * (gy[c] - mg[c] / n as f64 - yy[c] * mgy[c] / n as f64);
                    }
                }
                acc(*x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let d = y.shape()[y.ndim() - 1];
                let mut dx = Array::zeros(y.shape());
                for (((gy, yy), out), norm) in g
                    .data()
                    .chunks(d)
                    .zip(y.data().chunks(d))
                    .zip(dx.data_mut().chunks_mut(d))
                    .zip(norms)
                {
                    let dot: f64 = gy.iter().zip(yy).map(|(a, b)| a * b).sum();
                    for ((o, a), b) in out.iter_mut().zip(gy).zip(yy) {
                        *o = (a - b * dot) / norm;
                    }
                }
                acc(*x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let dx = Array::from_fn(g.shape(), |i| {
                    let v = xv.data()[i];
                    let cdf = 0.5 * (1.0 + libm::erf(v * std::f64::consts::FRAC_1_SQRT_2));
                    let pdf = (-0.5 * v * v).exp() / (2.0 * std::f64::consts::PI).sqrt();
                    g.data()[i] * (cdf + v * pdf)
                });
                acc(*x, dx);
            }
            Op::Relu(x) => {
                let xv = self.value(*x);
                let dx = Array::from_fn(g.shape(), |i| {
                    if xv.data()[i] > 0.0 {
                        g.data()[i]
                    } else {
                        0.0
                    }
                });
                acc(*x, dx);
            }
            Op::Abs(x) => {
                let xv = self.value(*x);
                let dx = Array::from_fn(g.shape(), |i| {
                    let v = xv.data()[i];
                    let s = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    g.data()[i] * s
                });
                acc(*x, dx);
            }
            Op::Exp(x) => acc(*x, Array::from_fn(g.shape(), |i| g.data()[i] * y.data()[i])),
            Op::Log(x) => {
                let xv = self.value(*x);
                acc(*x, Array::from_fn(g.shape(), |i| g.data()[i] / xv.data()[i]));
            }
            Op::Sum(x) => acc(*x, Array::full(self.shape(*x), g.item())),
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                acc(*x, Array::full(self.shape(*x), g.item() / n));
            }
        }
    }
}

/// Sums `g` over the leading axes it has beyond `shape`.
fn reduce_leading(g: &Array, shape: &[usize]) -> Array {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Array::zeros(shape);
    let n = out.len().max(1);
    for (chunk_start, v) in g.data().iter().enumerate() {
        out.data_mut()[chunk_start % n] += v;
    }
    out
}

fn permute_array(x: &Array, axes: &[usize]) -> Array {
    let in_shape = x.shape();
    let nd = in_shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * in_shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut data = Vec::with_capacity(x.len());
    if nd == 0 {
        return x.clone();
    }
    if x.is_empty() {
        return Array::new(&out_shape, data).unwrap();
    }
    let mut idx = vec![0usize; nd];
    let mut offset = 0usize;
    let last = nd - 1;
    loop {
        // innermost axis as a strided run
        let (len, stride) = (out_shape[last], strides[last]);
        for t in 0..len {
            data.push(x.data()[offset + t * stride]);
        }
        let mut d = last;
        loop {
            if d == 0 {
                return Array::new(&out_shape, data).unwrap();
            }
            d -= 1;
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
}

/// Calls `f` with the flat indices of every lane along `axis`.
fn for_each_lane(
    shape: &[usize],
    axis: usize,
    mut f: impl FnMut(std::iter::StepBy<std::ops::Range<usize>>),
) {
    let (outer, n, inner) = lanes(shape, axis);
    if inner == 0 {
        return;
    }
    for o in 0..outer {
        for i in 0..inner {
            let start = o * n * inner + i;
            f((start..start + n * inner).step_by(inner));
        }
    }
}
