//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward operation appends a node to the [`Tape`]; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. One training step on
//! one sample uses one tape, so a step is logically single-threaded even when
//! the kernels below parallelize internally (row-parallel only, which keeps
//! results bit-identical regardless of thread count).

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::Tensor;
use rayon::prelude::*;

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

/// Parallelize a matmul only when it is big enough to amortize the fork.
const PAR_FLOP_THRESHOLD: usize = 1 << 20;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `[R x C] + [C]`, bias broadcast over rows.
    AddRowVec(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatCols(Var, Var),
    SliceCols { x: Var, start: usize, len: usize },
    GatherRows { x: Var, idx: Vec<u32> },
    Scale(Var, f64),
    /// `x [R x C]` scaled per row by `s [R x 1]`.
    ScaleRows { x: Var, s: Var },
    Softmax { x: Var, axis: usize },
    SumAxis { x: Var, axis: usize },
    SumAll(Var),
    Gelu(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var },
    Sqrt(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    /// True when any ancestor is a grad-requiring leaf; prunes backward work.
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient buffer for `v`, if any was accumulated.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Insert a tensor; it participates in gradients iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Leaf, needs)
    }

    /// Insert a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add: shape mismatch");
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x - y);
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = T::of(c);
        let data = self.value(a).data().iter().map(|&x| x * k).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Scale(a, c), self.needs(a))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| gelu(x)).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Gelu(a), self.needs(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|&x| x.sqrt()).collect();
        let t = Tensor::new(self.shape(a).to_vec(), data).unwrap();
        self.push(t, Op::Sqrt(a), self.needs(a))
    }

    // ---- broadcast ----

    /// `a [R x C] + bias [C]`.
    pub fn add_row_vec(&mut self, a: Var, bias: Var) -> Var {
        let (r, c) = dims2(self.shape(a));
        assert_eq!(self.shape(bias), &[c], "add_row_vec: bias width mismatch");
        let av = self.value(a).data();
        let bv = self.value(bias).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            for j in 0..c {
                data.push(av[i * c + j] + bv[j]);
            }
        }
        let t = Tensor::matrix(r, c, data).unwrap();
        self.push(t, Op::AddRowVec(a, bias), self.needs(a) || self.needs(bias))
    }

    /// Scale row `i` of `x [R x C]` by `s[i]`, `s` shaped `[R x 1]` or `[R]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Var {
        let (r, c) = dims2(self.shape(x));
        assert_eq!(self.value(s).len(), r, "scale_rows: length mismatch");
        let xv = self.value(x).data();
        let sv = self.value(s).data();
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let k = sv[i];
            for j in 0..c {
                data.push(xv[i * c + j] * k);
            }
        }
        let t = Tensor::matrix(r, c, data).unwrap();
        self.push(t, Op::ScaleRows { x, s }, self.needs(x) || self.needs(s))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = dims2(self.shape(a));
        let (k2, n) = dims2(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dimension mismatch");
        let out = gemm_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::matrix(m, n, out).unwrap();
        self.push(t, Op::MatMul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (r, c) = dims2(self.shape(a));
        let av = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = av[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data).unwrap();
        self.push(t, Op::Transpose(a), self.needs(a))
    }

    // ---- shape ----

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Var {
        let n: usize = shape.iter().product();
        assert_eq!(n, self.value(a).len(), "reshape: element count mismatch");
        let t = Tensor::new(shape, self.value(a).data().to_vec()).unwrap();
        self.push(t, Op::Reshape(a), self.needs(a))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Var {
        let (r, ca) = dims2(self.shape(a));
        let (rb, cb) = dims2(self.shape(b));
        assert_eq!(r, rb, "concat_cols: row count mismatch");
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut data = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            data.extend_from_slice(&av[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&bv[i * cb..(i + 1) * cb]);
        }
        let t = Tensor::matrix(r, ca + cb, data).unwrap();
        self.push(t, Op::ConcatCols(a, b), self.needs(a) || self.needs(b))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let (r, c) = dims2(self.shape(x));
        assert!(start + len <= c, "slice_cols: out of range");
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&xv[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, data).unwrap();
        self.push(t, Op::SliceCols { x, start, len }, self.needs(x))
    }

    /// `out[r] = x[idx[r]]` for 2-D `x`; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[u32]) -> Var {
        let (r, c) = dims2(self.shape(x));
        let xv = self.value(x).data();
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            let i = i as usize;
            assert!(i < r, "gather_rows: index out of range");
            data.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let t = Tensor::matrix(idx.len(), c, data).unwrap();
        self.push(t, Op::GatherRows { x, idx: idx.to_vec() }, self.needs(x))
    }

    // ---- reductions and normalizations ----

    pub fn softmax(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "softmax: axis out of range");
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut m = xv[base];
                for l in 1..len {
                    m = m.max(xv[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (xv[base + l * inner] - m).exp();
                    data[base + l * inner] = e;
                    sum += e;
                }
                for l in 0..len {
                    data[base + l * inner] = data[base + l * inner] / sum;
                }
            }
        }
        let t = Tensor::new(shape, data).unwrap();
        self.push(t, Op::Softmax { x, axis }, self.needs(x))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Var {
        let shape = self.shape(x).to_vec();
        assert!(axis < shape.len(), "sum_axis: axis out of range");
        let (outer, len, inner) = axis_split(&shape, axis);
        let xv = self.value(x).data();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += xv[(o * len + l) * inner + i];
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].to_vec();
        out_shape.extend_from_slice(&shape[axis + 1..]);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, data).unwrap();
        self.push(t, Op::SumAxis { x, axis }, self.needs(x))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), self.needs(x))
    }

    /// Layer normalization over the last dimension with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = dims2(self.shape(x));
        assert_eq!(self.value(gamma).len(), c, "layer_norm: gamma width");
        assert_eq!(self.value(beta).len(), c, "layer_norm: beta width");
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let eps = T::of(LN_EPS);
        let inv_c = T::of(1.0 / c as f64);
        let mut data = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let inv_std = T::one() / (var + eps).sqrt();
            for j in 0..c {
                data.push((row[j] - mean) * inv_std * gv[j] + bv[j]);
            }
        }
        let t = Tensor::matrix(r, c, data).unwrap();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        self.push(t, Op::LayerNorm { x, gamma, beta }, needs)
    }

    // ---- reverse pass ----

    /// Accumulate adjoints of `loss` (a scalar) with respect to every
    /// grad-requiring node. Nodes that do not influence the loss keep `None`.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::argument(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(grads: &mut [Option<Vec<T>>], v: Var, len: usize, f: impl FnOnce(&mut [T])) {
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut Vec<Option<Vec<T>>>) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.len(), |d| axpy(d, g, T::one()));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.len(), |d| axpy(d, g, T::one()));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.len(), |d| axpy(d, g, T::one()));
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, g.len(), |d| axpy(d, g, -T::one()));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let bv = self.value(*b).data();
                    Self::accumulate(grads, *a, g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * bv[i];
                        }
                    });
                }
                if self.needs(*b) {
                    let av = self.value(*a).data();
                    Self::accumulate(grads, *b, g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * av[i];
                        }
                    });
                }
            }
            Op::AddRowVec(a, bias) => {
                let (r, c) = dims2(self.shape(*a));
                if self.needs(*a) {
                    Self::accumulate(grads, *a, r * c, |d| axpy(d, g, T::one()));
                }
                if self.needs(*bias) {
                    Self::accumulate(grads, *bias, c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[j] += g[i * c + j];
                            }
                        }
                    });
                }
            }
            Op::MatMul(a, b) => {
                let (m, k) = dims2(self.shape(*a));
                let n = self.shape(*b)[1];
                if self.needs(*a) {
                    let da = gemm_nt(g, self.value(*b).data(), m, n, k);
                    Self::accumulate(grads, *a, m * k, |d| axpy(d, &da, T::one()));
                }
                if self.needs(*b) {
                    let db = gemm_tn(self.value(*a).data(), g, m, k, n);
                    Self::accumulate(grads, *b, k * n, |d| axpy(d, &db, T::one()));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a));
                if self.needs(*a) {
                    Self::accumulate(grads, *a, r * c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[j * r + i];
                            }
                        }
                    });
                }
            }
            Op::Reshape(a) => {
                if self.needs(*a) {
                    Self::accumulate(grads, *a, g.len(), |d| axpy(d, g, T::one()));
                }
            }
            Op::ConcatCols(a, b) => {
                let (r, ca) = dims2(self.shape(*a));
                let cb = self.shape(*b)[1];
                let c = ca + cb;
                if self.needs(*a) {
                    Self::accumulate(grads, *a, r * ca, |d| {
                        for i in 0..r {
                            for j in 0..ca {
                                d[i * ca + j] += g[i * c + j];
                            }
                        }
                    });
                }
                if self.needs(*b) {
                    Self::accumulate(grads, *b, r * cb, |d| {
                        for i in 0..r {
                            for j in 0..cb {
                                d[i * cb + j] += g[i * c + ca + j];
                            }
                        }
                    });
                }
            }
            Op::SliceCols { x, start, len } => {
                let (r, c) = dims2(self.shape(*x));
                if self.needs(*x) {
                    Self::accumulate(grads, *x, r * c, |d| {
                        for i in 0..r {
                            for j in 0..*len {
                                d[i * c + start + j] += g[i * len + j];
                            }
                        }
                    });
                }
            }
            Op::GatherRows { x, idx } => {
                let (r, c) = dims2(self.shape(*x));
                if self.needs(*x) {
                    Self::accumulate(grads, *x, r * c, |d| {
                        for (out_row, &src) in idx.iter().enumerate() {
                            let src = src as usize;
                            for j in 0..c {
                                d[src * c + j] += g[out_row * c + j];
                            }
                        }
                    });
                }
            }
            Op::Scale(a, cst) => {
                if self.needs(*a) {
                    let k = T::of(*cst);
                    Self::accumulate(grads, *a, g.len(), |d| axpy(d, g, k));
                }
            }
            Op::ScaleRows { x, s } => {
                let (r, c) = dims2(self.shape(*x));
                if self.needs(*x) {
                    let sv = self.value(*s).data();
                    Self::accumulate(grads, *x, r * c, |d| {
                        for i in 0..r {
                            for j in 0..c {
                                d[i * c + j] += g[i * c + j] * sv[i];
                            }
                        }
                    });
                }
                if self.needs(*s) {
                    let xv = self.value(*x).data();
                    Self::accumulate(grads, *s, r, |d| {
                        for i in 0..r {
                            let mut acc = T::zero();
                            for j in 0..c {
                                acc += g[i * c + j] * xv[i * c + j];
                            }
                            d[i] += acc;
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                if self.needs(*x) {
                    let shape = self.shape(id_var(id)).to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    let yv = self.nodes[id].value.data();
                    Self::accumulate(grads, *x, yv.len(), |d| {
                        for o in 0..outer {
                            for i in 0..inner {
                                let base = o * len * inner + i;
                                let mut dot = T::zero();
                                for l in 0..len {
                                    let p = base + l * inner;
                                    dot += g[p] * yv[p];
                                }
                                for l in 0..len {
                                    let p = base + l * inner;
                                    d[p] += yv[p] * (g[p] - dot);
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAxis { x, axis } => {
                if self.needs(*x) {
                    let shape = self.shape(*x).to_vec();
                    let (outer, len, inner) = axis_split(&shape, *axis);
                    Self::accumulate(grads, *x, outer * len * inner, |d| {
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    d[(o * len + l) * inner + i] += g[o * inner + i];
                                }
                            }
                        }
                    });
                }
            }
            Op::SumAll(x) => {
                if self.needs(*x) {
                    let n = self.value(*x).len();
                    let g0 = g[0];
                    Self::accumulate(grads, *x, n, |d| {
                        for v in d.iter_mut() {
                            *v += g0;
                        }
                    });
                }
            }
            Op::Gelu(a) => {
                if self.needs(*a) {
                    let av = self.value(*a).data();
                    Self::accumulate(grads, *a, g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * gelu_grad(av[i]);
                        }
                    });
                }
            }
            Op::Sqrt(a) => {
                if self.needs(*a) {
                    let yv = self.nodes[id].value.data();
                    let half = T::of(0.5);
                    Self::accumulate(grads, *a, g.len(), |d| {
                        for i in 0..g.len() {
                            d[i] += g[i] * half / yv[i];
                        }
                    });
                }
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (r, c) = dims2(self.shape(*x));
                let xv = self.value(*x).data();
                let gv = self.value(*gamma).data();
                let eps = T::of(LN_EPS);
                let inv_c = T::of(1.0 / c as f64);
                // Recompute row statistics; cheaper than storing them.
                let mut xhat = vec![T::zero(); c];
                let needs_x = self.needs(*x);
                let needs_g = self.needs(*gamma);
                let needs_b = self.needs(*beta);
                let mut dx = if needs_x { vec![T::zero(); r * c] } else { Vec::new() };
                let mut dg = if needs_g { vec![T::zero(); c] } else { Vec::new() };
                let mut db = if needs_b { vec![T::zero(); c] } else { Vec::new() };
                for i in 0..r {
                    let row = &xv[i * c..(i + 1) * c];
                    let mean = row.iter().copied().sum::<T>() * inv_c;
                    let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
                    let inv_std = T::one() / (var + eps).sqrt();
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv_std;
                    }
                    let grow = &g[i * c..(i + 1) * c];
                    if needs_g {
                        for j in 0..c {
                            dg[j] += grow[j] * xhat[j];
                        }
                    }
                    if needs_b {
                        for j in 0..c {
                            db[j] += grow[j];
                        }
                    }
                    if needs_x {
                        let mut mean_gg = T::zero();
                        let mut mean_ggx = T::zero();
                        for j in 0..c {
                            let gg = grow[j] * gv[j];
                            mean_gg += gg;
                            mean_ggx += gg * xhat[j];
                        }
                        mean_gg = mean_gg * inv_c;
                        mean_ggx = mean_ggx * inv_c;
                        for j in 0..c {
                            let gg = grow[j] * gv[j];
                            dx[i * c + j] += (gg - mean_gg - xhat[j] * mean_ggx) * inv_std;
                        }
                    }
                }
                if needs_x {
                    Self::accumulate(grads, *x, r * c, |d| axpy(d, &dx, T::one()));
                }
                if needs_g {
                    Self::accumulate(grads, *gamma, c, |d| axpy(d, &dg, T::one()));
                }
                if needs_b {
                    Self::accumulate(grads, *beta, c, |d| axpy(d, &db, T::one()));
                }
            }
        }
    }
}

fn id_var(id: usize) -> Var {
    Var(id)
}

fn dims2(shape: &[usize]) -> (usize, usize) {
    assert_eq!(shape.len(), 2, "expected 2-D tensor, got shape {shape:?}");
    (shape[0], shape[1])
}

/// Split a shape at `axis` into (outer, axis length, inner) strides.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn zip_map<T: Real>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect()
}

fn axpy<T: Real>(dst: &mut [T], src: &[T], k: T) {
    for (d, &s) in dst.iter_mut().zip(src.iter()) {
        *d += s * k;
    }
}

/// tanh-approximation GELU; smooth, so finite differences agree with the
/// analytic derivative below.
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::of(0.7978845608028654); // sqrt(2/pi)
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + a * x.powi(3));
    half * x * (T::one() + inner.tanh())
}

pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::of(0.7978845608028654);
    let a = T::of(0.044715);
    let half = T::of(0.5);
    let three = T::of(3.0);
    let inner = c * (x + a * x.powi(3));
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x.powi(2))
}

// ---- matmul kernels ----
//
// All three access patterns keep a fixed per-row evaluation order, so
// parallelizing over output rows cannot change results.

/// `C[m x n] = A[m x k] * B[k x n]`.
pub fn gemm_nn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * n];
    let body = |i: usize, row: &mut [T]| {
        for p in 0..k {
            let aip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += aip * brow[j];
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `C[m x k] = A[m x n] * B[k x n]^T` (rows of A dotted with rows of B).
pub fn gemm_nt<T: Real>(a: &[T], b: &[T], m: usize, n: usize, k: usize) -> Vec<T> {
    let mut out = vec![T::zero(); m * k];
    let body = |i: usize, row: &mut [T]| {
        let arow = &a[i * n..(i + 1) * n];
        for (p, slot) in row.iter_mut().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for j in 0..n {
                acc += arow[j] * brow[j];
            }
            *slot = acc;
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(k).enumerate().for_each(|(i, row)| body(i, row));
    } else {
        for (i, row) in out.chunks_mut(k).enumerate() {
            body(i, row);
        }
    }
    out
}

/// `C[k x n] = A[m x k]^T * B[m x n]`.
pub fn gemm_tn<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); k * n];
    let body = |p: usize, row: &mut [T]| {
        for i in 0..m {
            let coef = a[i * k + p];
            let brow = &b[i * n..(i + 1) * n];
            for j in 0..n {
                row[j] += coef * brow[j];
            }
        }
    };
    if m * n * k >= PAR_FLOP_THRESHOLD {
        out.par_chunks_mut(n).enumerate().for_each(|(p, row)| body(p, row));
    } else {
        for (p, row) in out.chunks_mut(n).enumerate() {
            body(p, row);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf64(tape: &mut Tape<f64>, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(Tensor::new(shape, data).unwrap().with_grad(true))
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let w = leaf64(&mut tape, vec![3], vec![1.0, -2.0, 3.0]);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_quadratic() {
        let mut tape = Tape::new();
        let w = leaf64(&mut tape, vec![3], vec![1.0, -2.0, 3.0]);
        let sq = tape.mul(w, w);
        let loss = tape.sum_all(sq);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(w).unwrap(), &[2.0, -4.0, 6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::new();
        let w = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        assert!(tape.backward(w).is_err());
    }

    #[test]
    fn unused_leaf_gets_no_gradient() {
        let mut tape = Tape::new();
        let w = leaf64(&mut tape, vec![2], vec![1.0, 2.0]);
        let u = leaf64(&mut tape, vec![2], vec![5.0, 6.0]);
        let loss = tape.sum_all(w);
        let grads = tape.backward(loss).unwrap();
        assert!(grads.get(u).is_none());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1., 2., 3., 4., 5., 6.]).unwrap());
        let b = tape.constant(Tensor::matrix(3, 2, vec![7., 8., 9., 10., 11., 12.]).unwrap());
        let c = tape.matmul(a, b);
        assert_eq!(tape.value(c).data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn gemm_variants_agree() {
        // A[2x3], B[3x4]; nt and tn are checked against nn on transposed data.
        let a = vec![1., 2., 3., 4., 5., 6.];
        let b = vec![0.5, -1., 2., 0., 1.5, 2.5, -0.5, 1., 0., 3., 1., -2.];
        let c = gemm_nn::<f64>(&a, &b, 2, 3, 4);
        // B^T is [4x3]; nt with B^T should reproduce c.
        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        assert_eq!(gemm_nt::<f64>(&a, &bt, 2, 3, 4), c);
        // A^T is [3x2]; tn with A^T should reproduce c.
        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        assert_eq!(gemm_tn::<f64>(&at, &b, 3, 2, 4), c);
    }

    /// Central finite differences over every op used by the model.
    #[test]
    fn finite_difference_all_primitives() {
        let h = 1e-6;
        let tol = 1e-7;
        let base: Vec<f64> = vec![0.31, -0.62, 0.17, 0.88, -0.21, 0.44];

        // Each case builds a scalar loss from a [2x3] leaf.
        type Build = fn(&mut Tape<f64>, Var) -> Var;
        let cases: Vec<(&str, Build)> = vec![
            ("sum", |t, x| t.sum_all(x)),
            ("mul_self", |t, x| {
                let y = t.mul(x, x);
                t.sum_all(y)
            }),
            ("gelu", |t, x| {
                let y = t.gelu(x);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
            ("softmax_axis0", |t, x| {
                let y = t.softmax(x, 0);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
            ("softmax_axis1", |t, x| {
                let y = t.softmax(x, 1);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
            ("transpose_matmul", |t, x| {
                let xt = t.transpose(x);
                let p = t.matmul(x, xt);
                t.sum_all(p)
            }),
            ("layer_norm", |t, x| {
                let gamma = t.leaf(Tensor::vector(vec![1.1, 0.9, 1.3]).with_grad(true));
                let beta = t.leaf(Tensor::vector(vec![0.1, -0.2, 0.05]).with_grad(true));
                let y = t.layer_norm(x, gamma, beta);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
            ("gather_scale_rows", |t, x| {
                let g = t.gather_rows(x, &[1, 0, 1, 1]);
                let s = t.constant(Tensor::matrix(4, 1, vec![0.5, -1.0, 2.0, 0.25]).unwrap());
                let y = t.scale_rows(g, s);
                let y2 = t.mul(y, y);
                t.sum_all(y2)
            }),
            ("slice_concat", |t, x| {
                let a = t.slice_cols(x, 0, 2);
                let b = t.slice_cols(x, 1, 2);
                let c = t.concat_cols(a, b);
                let y = t.mul(c, c);
                t.sum_all(y)
            }),
            ("reshape_sum_axis", |t, x| {
                let r = t.reshape(x, vec![3, 2, 1]);
                let s = t.sum_axis(r, 1);
                let y = t.mul(s, s);
                t.sum_all(y)
            }),
            ("sqrt_of_square_sum", |t, x| {
                let y = t.mul(x, x);
                let s = t.sum_all(y);
                t.sqrt(s)
            }),
        ];

        for (name, build) in cases {
            let eval = |data: &[f64]| -> f64 {
                let mut tape = Tape::new();
                let x = tape
                    .leaf(Tensor::matrix(2, 3, data.to_vec()).unwrap().with_grad(true));
                let loss = build(&mut tape, x);
                tape.value(loss).data()[0]
            };
            let mut tape = Tape::new();
            let x = tape
                .leaf(Tensor::matrix(2, 3, base.clone()).unwrap().with_grad(true));
            let loss = build(&mut tape, x);
            let grads = tape.backward(loss).unwrap();
            let analytic = grads.get(x).unwrap();

            for i in 0..base.len() {
                let mut plus = base.clone();
                plus[i] += h;
                let mut minus = base.clone();
                minus[i] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let denom = fd.abs().max(analytic[i].abs()).max(1e-8);
                let rel = (fd - analytic[i]).abs() / denom;
                assert!(
                    rel < tol || (fd - analytic[i]).abs() < 1e-9,
                    "{name}: grad[{i}] analytic={} fd={} rel={}",
                    analytic[i],
                    fd,
                    rel
                );
            }
        }
    }
}
