//! The MNO architecture: an MLP encoder, a stack of blocks that fuse global
//! dimension-shrinkage attention, local graph attention, and micro
//! point-wise attention, and an MLP decoder.
//!
//! Every block runs its enabled modules in parallel on a layer-normalized
//! input and adds their outputs onto the residual stream, followed by a
//! pre-norm residual feed-forward.

use crate::error::{Error, Result};
use crate::geometry::{NeighborGraph, PointSample};
use crate::nn::{
    affine, bind_params, init_layer_norm, init_mlp, init_msa, init_rng, mlp_forward, msa_forward,
    BoundParams, MlpSpec, ParamSet,
};
use crate::scalar::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which of the three attention modules a block runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModuleMask {
    pub global: bool,
    pub local: bool,
    pub micro: bool,
}

impl ModuleMask {
    pub const ALL: ModuleMask = ModuleMask { global: true, local: true, micro: true };

    pub fn any(&self) -> bool {
        self.global || self.local || self.micro
    }

    /// Short form used on the command line: subset of the letters G, L, M.
    pub fn parse(s: &str) -> Result<Self> {
        let mut mask = ModuleMask { global: false, local: false, micro: false };
        for ch in s.chars() {
            match ch.to_ascii_uppercase() {
                'G' => mask.global = true,
                'L' => mask.local = true,
                'M' => mask.micro = true,
                _ => {
                    return Err(Error::argument(format!(
                        "module mask '{s}': expected letters from G, L, M"
                    )))
                }
            }
        }
        if !mask.any() {
            return Err(Error::argument(format!("module mask '{s}': at least one module required")));
        }
        Ok(mask)
    }

    pub fn short(&self) -> String {
        let mut s = String::new();
        if self.global {
            s.push('G');
        }
        if self.local {
            s.push('L');
        }
        if self.micro {
            s.push('M');
        }
        s
    }

    /// Long row label, e.g. "Global+Local+Micro".
    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        if self.global {
            parts.push("Global");
        }
        if self.local {
            parts.push("Local");
        }
        if self.micro {
            parts.push("Micro");
        }
        parts.join("+")
    }
}

/// Architecture hyperparameters. Defaults follow the reference recipe:
/// 4 blocks, D = 128, M = 256, 8 heads, k = 16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MnoConfig {
    pub blocks: usize,
    pub latent_dim: usize,
    pub modes: usize,
    pub heads: usize,
    pub k: usize,
    pub mask: ModuleMask,
    pub feature_dim: usize,
    pub output_dim: usize,
}

impl MnoConfig {
    pub fn new(feature_dim: usize, output_dim: usize) -> Self {
        MnoConfig {
            blocks: 4,
            latent_dim: 128,
            modes: 256,
            heads: 8,
            k: 16,
            mask: ModuleMask::ALL,
            feature_dim,
            output_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks == 0 {
            return Err(Error::argument("config: blocks must be >= 1"));
        }
        if self.latent_dim == 0 || self.modes == 0 || self.k == 0 {
            return Err(Error::argument("config: dimensions must be positive"));
        }
        if self.heads == 0 || self.latent_dim % self.heads != 0 {
            return Err(Error::argument(format!(
                "config: latent dim {} not divisible by heads {}",
                self.latent_dim, self.heads
            )));
        }
        if !self.mask.any() {
            return Err(Error::argument("config: at least one module must be enabled"));
        }
        if self.output_dim == 0 {
            return Err(Error::argument("config: output dim must be >= 1"));
        }
        Ok(())
    }

    pub fn encoder_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(3 + self.feature_dim, self.latent_dim, self.latent_dim)
    }

    pub fn proj_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(self.latent_dim, self.latent_dim, self.modes)
    }

    pub fn pos_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(3, self.latent_dim, self.latent_dim)
    }

    pub fn kernel_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(self.latent_dim, self.latent_dim, self.latent_dim)
    }

    pub fn score_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(self.latent_dim, self.latent_dim, 1)
    }

    pub fn ff_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(self.latent_dim, self.latent_dim, self.latent_dim)
    }

    pub fn decoder_spec(&self) -> MlpSpec {
        MlpSpec::two_layer(self.latent_dim, self.latent_dim, self.output_dim)
    }
}

/// Model = config + named parameters. Parameters for all three modules are
/// created regardless of the mask, so ablation runs from one seed share
/// identical initializations on the enabled parts.
#[derive(Debug, Clone)]
pub struct MnoModel<T> {
    pub config: MnoConfig,
    pub params: ParamSet<T>,
}

impl<T: Real> MnoModel<T> {
    pub fn init(config: MnoConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = init_rng(seed);
        let mut params = ParamSet::new();
        let d = config.latent_dim;

        init_mlp(&mut rng, &mut params, "encoder", &config.encoder_spec());
        for b in 0..config.blocks {
            let p = format!("block.{b}");
            init_layer_norm(&mut params, &format!("{p}.norm1"), d);
            init_mlp(&mut rng, &mut params, &format!("{p}.global.p_mlp"), &config.proj_spec());
            init_mlp(&mut rng, &mut params, &format!("{p}.global.q_mlp"), &config.proj_spec());
            init_msa(&mut rng, &mut params, &format!("{p}.global.msa"), d);
            for name in ["q", "k", "v"] {
                crate::nn::init_affine(&mut rng, &mut params, &format!("{p}.local.{name}"), d, d, true);
            }
            init_mlp(&mut rng, &mut params, &format!("{p}.local.pos_mlp"), &config.pos_spec());
            init_mlp(&mut rng, &mut params, &format!("{p}.local.kernel_mlp"), &config.kernel_spec());
            init_mlp(&mut rng, &mut params, &format!("{p}.micro.score_mlp"), &config.score_spec());
            init_layer_norm(&mut params, &format!("{p}.norm2"), d);
            init_mlp(&mut rng, &mut params, &format!("{p}.ff"), &config.ff_spec());
        }
        init_mlp(&mut rng, &mut params, "decoder", &config.decoder_spec());
        Ok(MnoModel { config, params })
    }

    /// Total scalar parameter count; a pure function of the config.
    pub fn param_count(&self) -> usize {
        self.params.num_values()
    }

    pub fn cast<U: Real>(&self) -> MnoModel<U> {
        MnoModel { config: self.config.clone(), params: self.params.cast() }
    }
}

/// Softmax-normalized projections of the global module, exposed for
/// invariant tests: columns of `p` and rows of `q` each sum to 1.
pub struct GlobalProbe {
    pub p: Var,
    pub q: Var,
}

/// Embed positions and features into latent tokens:
/// `X = MLP(concat(pos, features))`.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &MnoConfig,
    pos: Var,
    features: Var,
) -> Result<Var> {
    let n = tape.shape(pos)[0];
    if tape.shape(pos) != [n, 3] {
        return Err(Error::argument(format!(
            "encode: positions must be [N x 3], got {:?}",
            tape.shape(pos)
        )));
    }
    if tape.shape(features) != [n, config.feature_dim] {
        return Err(Error::argument(format!(
            "encode: features must be [{n} x {}], got {:?}",
            config.feature_dim,
            tape.shape(features)
        )));
    }
    let x = tape.concat_cols(pos, features);
    mlp_forward(tape, bound, "encoder", &config.encoder_spec(), x)
}

/// Global dimension-shrinkage attention:
/// `P = softmax_N(MLP(X))`, `Q = softmax_M(MLP(X))`,
/// `out = Q * MSA(P^T * X)`.
pub fn global_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    config: &MnoConfig,
    x: Var,
) -> Result<(Var, GlobalProbe)> {
    let p_lin = mlp_forward(tape, bound, &format!("{prefix}.p_mlp"), &config.proj_spec(), x)?;
    let p = tape.softmax(p_lin, 0);
    let q_lin = mlp_forward(tape, bound, &format!("{prefix}.q_mlp"), &config.proj_spec(), x)?;
    let q = tape.softmax(q_lin, 1);
    let pt = tape.transpose(p);
    let z = tape.matmul(pt, x);
    let z = msa_forward(tape, bound, &format!("{prefix}.msa"), z, config.heads)?;
    let out = tape.matmul(q, z);
    Ok((out, GlobalProbe { p, q }))
}

/// Local graph attention over each point's k nearest neighbors with
/// per-channel (vector) weights and lifted relative-position offsets:
/// `out_i = sum_j softmax_k(MLP(q_i - k_j + pos_rel)) .* (v_j + pos_rel)`.
pub fn local_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    config: &MnoConfig,
    x: Var,
    graph: &NeighborGraph,
) -> Result<Var> {
    let n = tape.shape(x)[0];
    let d = config.latent_dim;
    if graph.num_points() != n {
        return Err(Error::argument(format!(
            "local attention: graph covers {} points, latents have {n}",
            graph.num_points()
        )));
    }
    let k = graph.k();

    let q = affine(tape, bound, &format!("{prefix}.q"), x);
    let kf = affine(tape, bound, &format!("{prefix}.k"), x);
    let vf = affine(tape, bound, &format!("{prefix}.v"), x);

    // Center features tiled k times, neighbor features gathered by index.
    let rep_idx: Vec<u32> = (0..n as u32).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let q_rep = tape.gather_rows(q, &rep_idx);
    let k_nbr = tape.gather_rows(kf, graph.indices());
    let v_nbr = tape.gather_rows(vf, graph.indices());

    let off: Vec<T> = graph.offsets().iter().map(|&v| T::of(v as f64)).collect();
    let off = tape.constant(Tensor::matrix(n * k, 3, off).unwrap());
    let pos_rel = mlp_forward(tape, bound, &format!("{prefix}.pos_mlp"), &config.pos_spec(), off)?;

    let diff = tape.sub(q_rep, k_nbr);
    let arg = tape.add(diff, pos_rel);
    let kern = mlp_forward(tape, bound, &format!("{prefix}.kernel_mlp"), &config.kernel_spec(), arg)?;
    let kern = tape.reshape(kern, vec![n, k, d]);
    let weights = tape.softmax(kern, 1);

    let val = tape.add(v_nbr, pos_rel);
    let val = tape.reshape(val, vec![n, k, d]);
    let weighted = tape.mul(weights, val);
    let summed = tape.sum_axis(weighted, 1);
    Ok(tape.reshape(summed, vec![n, d]))
}

/// Micro point-wise attention: per-point softmax score over the sample,
/// applied as a residual reweighting `out = X + score .* X`.
pub fn micro_attention<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    prefix: &str,
    config: &MnoConfig,
    x: Var,
) -> Result<(Var, Var)> {
    let s_lin = mlp_forward(tape, bound, &format!("{prefix}.score_mlp"), &config.score_spec(), x)?;
    let score = tape.softmax(s_lin, 0);
    let scaled = tape.scale_rows(x, score);
    let out = tape.add(x, scaled);
    Ok((out, score))
}

/// Probe values from one block, used by normalization-invariant tests.
pub struct BlockProbe {
    pub global: Option<GlobalProbe>,
    pub micro_score: Option<Var>,
}

/// One MNO block: pre-norm parallel modules summed onto the residual
/// stream, then a pre-norm residual feed-forward.
pub fn mno_block<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &MnoConfig,
    block: usize,
    x: Var,
    graph: &NeighborGraph,
    mask: ModuleMask,
) -> Result<(Var, BlockProbe)> {
    if !mask.any() {
        return Err(Error::argument("mno_block: empty module mask"));
    }
    let p = format!("block.{block}");
    let g1 = bound.get(&format!("{p}.norm1.gamma"));
    let b1 = bound.get(&format!("{p}.norm1.beta"));
    let h = tape.layer_norm(x, g1, b1);

    let mut acc = x;
    let mut probe = BlockProbe { global: None, micro_score: None };
    if mask.global {
        let (out, gp) = global_attention(tape, bound, &format!("{p}.global"), config, h)?;
        acc = tape.add(acc, out);
        probe.global = Some(gp);
    }
    if mask.local {
        let out = local_attention(tape, bound, &format!("{p}.local"), config, h, graph)?;
        acc = tape.add(acc, out);
    }
    if mask.micro {
        let (out, score) = micro_attention(tape, bound, &format!("{p}.micro"), config, h)?;
        acc = tape.add(acc, out);
        probe.micro_score = Some(score);
    }

    let g2 = bound.get(&format!("{p}.norm2.gamma"));
    let b2 = bound.get(&format!("{p}.norm2.beta"));
    let h2 = tape.layer_norm(acc, g2, b2);
    let ff = mlp_forward(tape, bound, &format!("{p}.ff"), &config.ff_spec(), h2)?;
    let out = tape.add(acc, ff);
    Ok((out, probe))
}

/// Decode latent tokens to output fields, pointwise.
pub fn decode<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &MnoConfig,
    x: Var,
) -> Result<Var> {
    if *tape.shape(x).last().unwrap() != config.latent_dim {
        return Err(Error::argument(format!(
            "decode: expected latent width {}, got {:?}",
            config.latent_dim,
            tape.shape(x)
        )));
    }
    mlp_forward(tape, bound, "decoder", &config.decoder_spec(), x)
}

/// Full forward pass on an existing tape. Returns the prediction together
/// with per-block probes.
pub fn forward_on_tape<T: Real>(
    tape: &mut Tape<T>,
    bound: &BoundParams,
    config: &MnoConfig,
    pos: Var,
    features: Var,
    graph: &NeighborGraph,
) -> Result<(Var, Vec<BlockProbe>)> {
    config.validate()?;
    let mut x = encode(tape, bound, config, pos, features)?;
    let mut probes = Vec::with_capacity(config.blocks);
    for b in 0..config.blocks {
        let (next, probe) = mno_block(tape, bound, config, b, x, graph, config.mask)?;
        x = next;
        probes.push(probe);
    }
    let out = decode(tape, bound, config, x)?;
    Ok((out, probes))
}

/// Value-level forward pass for one sample's tensors.
pub fn forward<T: Real>(
    model: &MnoModel<T>,
    positions: &Tensor<T>,
    features: &Tensor<T>,
    graph: &NeighborGraph,
) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &model.params);
    let pos = tape.constant(positions.clone());
    let feat = tape.constant(features.clone());
    let (out, _) = forward_on_tape(&mut tape, &bound, &model.config, pos, feat, graph)?;
    Ok(tape.value(out).clone())
}

/// Forward pass over a packed batch: per-sample forwards (softmax scopes and
/// graphs never cross sample boundaries) concatenated in batch order.
/// Independent samples evaluate in parallel against the read-only model.
pub fn forward_batch<T: Real>(
    model: &MnoModel<T>,
    batch: &crate::geometry::Batch,
) -> Result<Tensor<T>> {
    use rayon::prelude::*;
    let outputs: Vec<Result<Tensor<T>>> = batch
        .samples
        .par_iter()
        .zip(batch.graphs.par_iter())
        .zip(batch.starts.par_iter())
        .map(|((sample, graph), &start)| {
            let local = graph.rebased(start as u32);
            forward_sample(model, sample, &local)
        })
        .collect();
    let mut data = Vec::with_capacity(batch.total_points() * model.config.output_dim);
    for out in outputs {
        data.extend_from_slice(out?.data());
    }
    Tensor::new(vec![batch.total_points(), model.config.output_dim], data)
}

/// Forward pass on a `PointSample` (single precision as stored on disk).
pub fn forward_sample<T: Real>(
    model: &MnoModel<T>,
    sample: &PointSample,
    graph: &NeighborGraph,
) -> Result<Tensor<T>> {
    if sample.feature_dim() != model.config.feature_dim {
        return Err(Error::argument(format!(
            "forward: sample '{}' has {} feature channels, model expects {}",
            sample.name,
            sample.feature_dim(),
            model.config.feature_dim
        )));
    }
    forward(model, &sample.positions.cast(), &sample.features.cast(), graph)
}
