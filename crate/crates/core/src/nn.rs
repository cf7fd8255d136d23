//! Shared neural primitives: named parameter sets, MLPs, softmax, and
//! multi-head self-attention.
//!
//! Parameters live in a [`ParamSet`] keyed by path-like names
//! (`"block.2.local.w_k"`). A forward pass binds the set onto a tape with
//! [`bind_params`] and addresses parameters through the returned map, so the
//! same parameter values can back any number of tapes.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Named map from parameter path to tensor. Paths are unique by construction
/// (`BTreeMap` keys), and iteration order is deterministic.
#[derive(Clone, Debug, Default)]
pub struct ParamSet<T> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn new() -> Self {
        ParamSet { params: BTreeMap::new() }
    }

    pub fn insert(&mut self, path: impl Into<String>, t: Tensor<T>) {
        let path = path.into();
        let prev = self.params.insert(path.clone(), t.with_grad(true));
        assert!(prev.is_none(), "duplicate parameter path '{path}'");
    }

    pub fn get(&self, path: &str) -> Option<&Tensor<T>> {
        self.params.get(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total scalar count across all parameters.
    pub fn num_values(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor<T>)> {
        self.params.iter_mut()
    }

    pub fn paths(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Zero-valued set with the same paths and shapes.
    pub fn zeros_like(&self) -> ParamSet<T> {
        ParamSet {
            params: self
                .params
                .iter()
                .map(|(k, v)| (k.clone(), Tensor::zeros(v.shape().to_vec())))
                .collect(),
        }
    }
}

/// Tape-bound parameter handles for one forward pass.
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, path: &str) -> Var {
        *self
            .vars
            .get(path)
            .unwrap_or_else(|| panic!("parameter '{path}' not bound"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

/// Insert every parameter of `params` as a grad-requiring leaf.
pub fn bind_params<T: Real>(tape: &mut Tape<T>, params: &ParamSet<T>) -> BoundParams {
    let vars = params
        .iter()
        .map(|(k, v)| (k.clone(), tape.leaf(v.clone())))
        .collect();
    BoundParams { vars }
}

/// Collect gradients for every bound parameter. Parameters the loss never
/// touched get zeros, matching their shape.
pub fn extract_grads<T: Real>(
    tape: &Tape<T>,
    grads: &crate::tape::Gradients<T>,
    bound: &BoundParams,
    params: &ParamSet<T>,
) -> ParamSet<T> {
    let mut out = ParamSet::new();
    for (path, var) in bound.iter() {
        let shape = tape.shape(*var).to_vec();
        let t = match grads.get(*var) {
            Some(g) => Tensor::new(shape, g.to_vec()).unwrap(),
            None => Tensor::zeros(shape),
        };
        out.insert(path.clone(), t);
    }
    debug_assert_eq!(out.len(), params.len());
    out
}

// ---- initialization ----

/// Deterministic RNG for parameter initialization.
pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform init in +-sqrt(1/fan_in). Draws happen in f64 so f32 and f64
/// models built from the same seed agree to rounding.
pub fn init_affine<T: Real>(
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet<T>,
    prefix: &str,
    fan_in: usize,
    fan_out: usize,
    bias: bool,
) {
    let bound = (1.0 / fan_in as f64).sqrt();
    let w: Vec<T> = (0..fan_in * fan_out)
        .map(|_| T::of(rng.random_range(-bound..bound)))
        .collect();
    params.insert(format!("{prefix}.w"), Tensor::matrix(fan_in, fan_out, w).unwrap());
    if bias {
        let b: Vec<T> = (0..fan_out).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        params.insert(format!("{prefix}.b"), Tensor::vector(b));
    }
}

/// Layer-norm affine parameters: gamma = 1, beta = 0.
pub fn init_layer_norm<T: Real>(params: &mut ParamSet<T>, prefix: &str, width: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::vector(vec![T::one(); width]));
    params.insert(format!("{prefix}.beta"), Tensor::vector(vec![T::zero(); width]));
}

// ---- MLP ----

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Gelu,
}

/// Layer widths plus activation for a plain MLP. Affine layers interleave
/// with the activation; the final layer stays linear.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub bias: bool,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 {
            return Err(Error::argument(format!(
                "MLP needs at least input and output widths, got {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::argument(format!("zero width in MLP spec {widths:?}")));
        }
        Ok(MlpSpec { widths, activation: Activation::Gelu, bias: true })
    }

    /// The default two-affine, one-activation block used throughout the model.
    pub fn two_layer(input: usize, hidden: usize, output: usize) -> Self {
        MlpSpec::new(vec![input, hidden, output]).unwrap()
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Create all parameters of an MLP under `prefix.<layer>`.
pub fn init_mlp<T: Real>(
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet<T>,
    prefix: &str,
    spec: &MlpSpec,
) {
    for l in 0..spec.layers() {
        init_affine(
            rng,
            params,
            &format!("{prefix}.{l}"),
            spec.widths[l],
            spec.widths[l + 1],
            spec.bias,
        );
    }
}

/// Affine layer `x * W (+ b)` through the bound parameter map.
pub fn affine<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, prefix: &str, x: Var) -> Var {
    let w = bound.get(&format!("{prefix}.w"));
    let y = tape.matmul(x, w);
    match bound.vars.get(&format!("{prefix}.b")) {
        Some(&b) => tape.add_row_vec(y, b),
        None => y,
    }
}

/// MLP forward on the tape. Validates the input width against the spec.
pub fn mlp_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    spec: &MlpSpec,
    x: Var,
) -> Result<Var> {
    let got = *tape.shape(x).last().unwrap();
    if got != spec.input_width() {
        return Err(Error::argument(format!(
            "mlp '{prefix}': input width {got} does not match spec width {}",
            spec.input_width()
        )));
    }
    let mut h = x;
    for l in 0..spec.layers() {
        h = affine(tape, bound, &format!("{prefix}.{l}"), h);
        if l + 1 < spec.layers() {
            h = tape.gelu(h);
        }
    }
    Ok(h)
}

/// Value-level MLP evaluation (builds a throwaway tape).
pub fn mlp_eval<T: Real>(params: &ParamSet<T>, prefix: &str, spec: &MlpSpec, x: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let xv = tape.constant(x.clone());
    let y = mlp_forward(&mut tape, &bound, prefix, spec, xv)?;
    Ok(tape.value(y).clone())
}

// ---- softmax ----

/// Numerically stable softmax along `axis`. Rejects invalid axes and
/// non-finite inputs.
pub fn softmax<T: Real>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::argument(format!(
            "softmax: axis {axis} out of range for shape {:?}",
            x.shape()
        )));
    }
    if !x.all_finite() {
        return Err(Error::numeric("softmax: non-finite input"));
    }
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = tape.softmax(v, axis);
    Ok(tape.value(y).clone())
}

// ---- multi-head self-attention ----

/// Parameter paths for one MSA layer under `prefix`: `w_q/b_q`, `w_k/b_k`,
/// `w_v/b_v`, `w_o/b_o`, each `[D x D]` / `[D]`.
pub fn init_msa<T: Real>(
    rng: &mut ChaCha8Rng,
    params: &mut ParamSet<T>,
    prefix: &str,
    dim: usize,
) {
    for name in ["q", "k", "v", "o"] {
        let bound = (1.0 / dim as f64).sqrt();
        let w: Vec<T> = (0..dim * dim).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        params.insert(format!("{prefix}.w_{name}"), Tensor::matrix(dim, dim, w).unwrap());
        let b: Vec<T> = (0..dim).map(|_| T::of(rng.random_range(-bound..bound))).collect();
        params.insert(format!("{prefix}.b_{name}"), Tensor::vector(b));
    }
}

fn msa_affine<T: Real>(tape: &mut Tape<T>, bound: &BoundParams, prefix: &str, name: &str, x: Var) -> Var {
    let w = bound.get(&format!("{prefix}.w_{name}"));
    let b = bound.get(&format!("{prefix}.b_{name}"));
    let y = tape.matmul(x, w);
    tape.add_row_vec(y, b)
}

/// Single multi-head self-attention layer with output projection and no
/// internal feed-forward. Token count may be 1.
pub fn msa_forward<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    tokens: Var,
    heads: usize,
) -> Result<Var> {
    let shape = tape.shape(tokens);
    if shape.len() != 2 {
        return Err(Error::argument(format!("msa: expected 2-D tokens, got {shape:?}")));
    }
    let (m, d) = (shape[0], shape[1]);
    if heads == 0 || d % heads != 0 {
        return Err(Error::argument(format!(
            "msa: dim {d} not divisible by heads {heads}"
        )));
    }
    if m == 0 {
        return Err(Error::argument("msa: empty token set"));
    }
    let dh = d / heads;
    let q = msa_affine(tape, bound, prefix, "q", tokens);
    let k = msa_affine(tape, bound, prefix, "k", tokens);
    let v = msa_affine(tape, bound, prefix, "v", tokens);

    let mut head_outs = Vec::with_capacity(heads);
    let scale = 1.0 / (dh as f64).sqrt();
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let vh = tape.slice_cols(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, scale);
        let attn = tape.softmax(scaled, 1);
        head_outs.push(tape.matmul(attn, vh));
    }
    let mut cat = head_outs[0];
    for &h in &head_outs[1..] {
        cat = tape.concat_cols(cat, h);
    }
    let _ = m;
    Ok(msa_affine(tape, bound, prefix, "o", cat))
}

/// Per-head attention weights of one MSA layer (used by invariant tests).
pub fn msa_attention_weights<T: Real>(
    params: &ParamSet<T>,
    prefix: &str,
    tokens: &Tensor<T>,
    heads: usize,
) -> Result<Vec<Tensor<T>>> {
    let (m, d) = (tokens.shape()[0], tokens.shape()[1]);
    if d % heads != 0 {
        return Err(Error::argument(format!("msa: dim {d} not divisible by heads {heads}")));
    }
    let dh = d / heads;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, params);
    let x = tape.constant(tokens.clone());
    let q = msa_affine(&mut tape, &bound, prefix, "q", x);
    let k = msa_affine(&mut tape, &bound, prefix, "k", x);
    let mut out = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh);
        let kh = tape.slice_cols(k, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax(scaled, 1);
        out.push(tape.value(attn).clone());
    }
    let _ = m;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_symmetry_and_shift() {
        let t = Tensor::<f64>::vector(vec![0.0, 0.0]);
        let y = softmax(&t, 0).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);

        for c in [-3.0, 0.0, 7.5] {
            let t = Tensor::<f64>::vector(vec![c, c, c]);
            let y = softmax(&t, 0).unwrap();
            for &v in y.data() {
                assert!((v - 1.0 / 3.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_direct_evaluation() {
        // exp(1)/sum, exp(2)/sum, exp(3)/sum with sum = e + e^2 + e^3,
        // evaluated independently with high-precision constants.
        let t = Tensor::<f64>::vector(vec![1.0, 2.0, 3.0]);
        let y = softmax(&t, 0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in y.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        let sum: f64 = y.data().iter().sum();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_bad_axis_and_nan() {
        let t = Tensor::<f64>::vector(vec![1.0, 2.0]);
        assert!(matches!(softmax(&t, 1), Err(Error::Argument(_))));
        let t = Tensor::<f64>::vector(vec![1.0, f64::NAN]);
        assert!(matches!(softmax(&t, 0), Err(Error::Numeric(_))));
    }

    #[test]
    fn softmax_axis_choice_matters() {
        let t = Tensor::<f64>::matrix(2, 2, vec![0.0, 10.0, 0.0, 0.0]).unwrap();
        let rows = softmax(&t, 1).unwrap();
        // Row sums are 1.
        assert!((rows.data()[0] + rows.data()[1] - 1.0).abs() < 1e-12);
        let cols = softmax(&t, 0).unwrap();
        // Column sums are 1.
        assert!((cols.data()[0] + cols.data()[2] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn mlp_identity_and_cancellation() {
        // widths [3,3], identity weight, zero bias.
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mut params = ParamSet::<f64>::new();
        params.insert(
            "m.0.w",
            Tensor::matrix(3, 3, vec![1., 0., 0., 0., 1., 0., 0., 0., 1.]).unwrap(),
        );
        params.insert("m.0.b", Tensor::vector(vec![0.0; 3]));
        let x = Tensor::matrix(1, 3, vec![1.0, 2.0, 3.0]).unwrap();
        let y = mlp_eval(&params, "m", &spec, &x).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0, 3.0]);

        // widths [2,1], weight [[1],[1]], zero bias: cancellation.
        let spec = MlpSpec::new(vec![2, 1]).unwrap();
        let mut params = ParamSet::<f64>::new();
        params.insert("m.0.w", Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        params.insert("m.0.b", Tensor::vector(vec![0.0]));
        let x = Tensor::matrix(1, 2, vec![0.5, -0.5]).unwrap();
        let y = mlp_eval(&params, "m", &spec, &x).unwrap();
        assert_eq!(y.data(), &[0.0]);
    }

    #[test]
    fn mlp_seed0_matches_straight_line_oracle() {
        // widths [1,2,1], seeded params; oracle re-implements the two affine
        // steps and the gelu by hand from the raw parameter values.
        let spec = MlpSpec::new(vec![1, 2, 1]).unwrap();
        let mut rng = init_rng(0);
        let mut params = ParamSet::<f64>::new();
        init_mlp(&mut rng, &mut params, "m", &spec);

        let x = 1.0;
        let w0 = params.get("m.0.w").unwrap().data();
        let b0 = params.get("m.0.b").unwrap().data();
        let w1 = params.get("m.1.w").unwrap().data();
        let b1 = params.get("m.1.b").unwrap().data();
        let h0 = x * w0[0] + b0[0];
        let h1 = x * w0[1] + b0[1];
        let gelu = |v: f64| 0.5 * v * (1.0 + (0.7978845608028654 * (v + 0.044715 * v * v * v)).tanh());
        let expected = gelu(h0) * w1[0] + gelu(h1) * w1[1] + b1[0];

        let xt = Tensor::matrix(1, 1, vec![x]).unwrap();
        let y = mlp_eval(&params, "m", &spec, &xt).unwrap();
        assert!((y.data()[0] - expected).abs() < 1e-14, "{} vs {expected}", y.data()[0]);
    }

    #[test]
    fn mlp_rejects_width_mismatch() {
        let spec = MlpSpec::new(vec![3, 3]).unwrap();
        let mut rng = init_rng(0);
        let mut params = ParamSet::<f64>::new();
        init_mlp(&mut rng, &mut params, "m", &spec);
        let x = Tensor::matrix(1, 2, vec![1.0, 2.0]).unwrap();
        assert!(matches!(mlp_eval(&params, "m", &spec, &x), Err(Error::Argument(_))));
    }

    #[test]
    fn msa_single_token_weight_is_one() {
        let mut rng = init_rng(0);
        let mut params = ParamSet::<f64>::new();
        init_msa(&mut rng, &mut params, "msa", 4);
        let tokens = Tensor::matrix(1, 4, vec![0.3, -1.2, 0.7, 2.0]).unwrap();
        let w = msa_attention_weights(&params, "msa", &tokens, 2).unwrap();
        for head in w {
            assert_eq!(head.shape(), &[1, 1]);
            assert!((head.data()[0] - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn msa_identical_tokens_give_uniform_rows() {
        let mut rng = init_rng(1);
        let mut params = ParamSet::<f64>::new();
        init_msa(&mut rng, &mut params, "msa", 4);
        let row = [0.5, -0.25, 1.5, 0.75];
        let mut data = Vec::new();
        for _ in 0..5 {
            data.extend_from_slice(&row);
        }
        let tokens = Tensor::matrix(5, 4, data).unwrap();
        let weights = msa_attention_weights(&params, "msa", &tokens, 2).unwrap();
        for head in weights {
            for &v in head.data() {
                assert!((v - 0.2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn msa_seed0_matches_brute_force_oracle() {
        // M=2, D=2, heads=1: q k^T / sqrt(d), softmax, * v, then out proj,
        // written out longhand.
        let mut rng = init_rng(0);
        let mut params = ParamSet::<f64>::new();
        init_msa(&mut rng, &mut params, "msa", 2);
        let tokens = Tensor::matrix(2, 2, vec![0.4, -0.6, 1.1, 0.2]).unwrap();

        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let x = tape.constant(tokens.clone());
        let y = msa_forward(&mut tape, &bound, "msa", x, 1).unwrap();
        let got = tape.value(y).clone();

        // Oracle.
        let lin = |w: &[f64], b: &[f64], x: &[f64; 2]| {
            [x[0] * w[0] + x[1] * w[2] + b[0], x[0] * w[1] + x[1] * w[3] + b[1]]
        };
        let wq = params.get("msa.w_q").unwrap().data();
        let bq = params.get("msa.b_q").unwrap().data();
        let wk = params.get("msa.w_k").unwrap().data();
        let bk = params.get("msa.b_k").unwrap().data();
        let wv = params.get("msa.w_v").unwrap().data();
        let bv = params.get("msa.b_v").unwrap().data();
        let wo = params.get("msa.w_o").unwrap().data();
        let bo = params.get("msa.b_o").unwrap().data();
        let t0 = [tokens.data()[0], tokens.data()[1]];
        let t1 = [tokens.data()[2], tokens.data()[3]];
        let q = [lin(wq, bq, &t0), lin(wq, bq, &t1)];
        let k = [lin(wk, bk, &t0), lin(wk, bk, &t1)];
        let v = [lin(wv, bv, &t0), lin(wv, bv, &t1)];
        let scale = 1.0 / 2.0_f64.sqrt();
        let mut expected = Vec::new();
        for qi in &q {
            let s0 = (qi[0] * k[0][0] + qi[1] * k[0][1]) * scale;
            let s1 = (qi[0] * k[1][0] + qi[1] * k[1][1]) * scale;
            let m = s0.max(s1);
            let (e0, e1) = ((s0 - m).exp(), (s1 - m).exp());
            let z = e0 + e1;
            let (a0, a1) = (e0 / z, e1 / z);
            let av = [a0 * v[0][0] + a1 * v[1][0], a0 * v[0][1] + a1 * v[1][1]];
            expected.extend_from_slice(&lin(wo, bo, &av));
        }
        for (a, b) in got.data().iter().zip(expected.iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn msa_rejects_indivisible_heads() {
        let mut rng = init_rng(0);
        let mut params = ParamSet::<f64>::new();
        init_msa(&mut rng, &mut params, "msa", 4);
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let x = tape.constant(Tensor::matrix(2, 4, vec![0.0; 8]).unwrap());
        assert!(msa_forward(&mut tape, &bound, "msa", x, 3).is_err());
    }

    #[test]
    fn msa_permutation_equivariance() {
        let mut rng = init_rng(7);
        let mut params = ParamSet::<f64>::new();
        init_msa(&mut rng, &mut params, "msa", 4);
        let mut data = Vec::new();
        let mut vrng = init_rng(99);
        for _ in 0..6 * 4 {
            data.push(vrng.random_range(-1.0..1.0));
        }
        let tokens = Tensor::matrix(6, 4, data.clone()).unwrap();
        let perm = [3usize, 0, 5, 1, 4, 2];
        let mut pdata = Vec::new();
        for &p in &perm {
            pdata.extend_from_slice(&data[p * 4..(p + 1) * 4]);
        }
        let ptokens = Tensor::matrix(6, 4, pdata).unwrap();

        let run = |t: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = bind_params(&mut tape, &params);
            let x = tape.constant(t.clone());
            let y = msa_forward(&mut tape, &bound, "msa", x, 2).unwrap();
            tape.value(y).clone()
        };
        let base = run(&tokens);
        let permuted = run(&ptokens);
        for (i, &p) in perm.iter().enumerate() {
            for c in 0..4 {
                let a = permuted.at2(i, c);
                let b = base.at2(p, c);
                assert!((a - b).abs() < 1e-10, "row {i} col {c}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn extract_grads_zero_fills_unused() {
        let mut params = ParamSet::<f64>::new();
        params.insert("used", Tensor::vector(vec![1.0, 2.0]));
        params.insert("unused", Tensor::vector(vec![3.0]));
        let mut tape = Tape::new();
        let bound = bind_params(&mut tape, &params);
        let u = bound.get("used");
        let loss = tape.sum_all(u);
        let grads = tape.backward(loss).unwrap();
        let g = extract_grads(&tape, &grads, &bound, &params);
        assert_eq!(g.get("used").unwrap().data(), &[1.0, 1.0]);
        assert_eq!(g.get("unused").unwrap().data(), &[0.0]);
    }
}
