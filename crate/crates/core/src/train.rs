//! Training loop (AdamW + one-cycle), evaluation, ablation sweeps over
//! module masks, and the finite-difference gradient-check mode.
//!
//! The pipeline normalizes model inputs (positions to the per-sample unit
//! box, features z-scored with dataset statistics) and trains directly on
//! raw targets: the relative-L2 loss is scale-normalized per field, so
//! target z-scoring would only change the denominator. This keeps the
//! training loss and the evaluation metric the same quantity.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{knn_graph, normalize_sample, ChannelStats, NeighborGraph, PointSample};
use crate::io;
use crate::metrics::{mae, rl2, slice_channels, FieldGrouping, MetricsReport};
use crate::model::{forward_on_tape, MnoConfig, MnoModel, ModuleMask};
use crate::nn::{bind_params, extract_grads, ParamSet};
use crate::optim::{adamw_step, onecycle_lr, AdamWHyper, OptimizerState};
use crate::scalar::{Precision, Real};
use crate::tape::Tape;
use crate::tensor::Tensor;

/// Loss selector. The training recipe uses relative L2 error.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Rl2,
}

impl LossKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "rl2" => Ok(LossKind::Rl2),
            _ => Err(Error::argument(format!("unknown loss '{s}' (expected rl2)"))),
        }
    }

    pub fn as_str(self) -> &'static str {
        "rl2"
    }
}

/// Training hyperparameters. Defaults mirror the reference recipe
/// (500 epochs, batch 4, peak learning rate 1e-3).
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate of the one-cycle schedule. Exactly 0 freezes the
    /// optimizer (useful for pipeline tests).
    pub max_lr: f64,
    pub seed: u64,
    pub precision: Precision,
    pub loss: LossKind,
    pub grouping: FieldGrouping,
    pub hyper: AdamWHyper,
}

impl TrainConfig {
    pub fn new(grouping: FieldGrouping) -> Self {
        TrainConfig {
            epochs: 500,
            batch_size: 4,
            max_lr: 1e-3,
            seed: 0,
            precision: Precision::F32,
            loss: LossKind::Rl2,
            grouping,
            hyper: AdamWHyper::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::argument("train: epochs must be >= 1"));
        }
        if self.batch_size == 0 {
            return Err(Error::argument("train: batch size must be >= 1"));
        }
        if self.max_lr < 0.0 {
            return Err(Error::argument("train: max_lr must not be negative"));
        }
        Ok(())
    }

    pub fn to_manifest(&self) -> Vec<(String, String)> {
        vec![
            ("train.epochs".into(), self.epochs.to_string()),
            ("train.batch_size".into(), self.batch_size.to_string()),
            ("train.max_lr".into(), format!("{:e}", self.max_lr)),
            ("train.seed".into(), self.seed.to_string()),
            ("train.precision".into(), self.precision.to_string()),
            ("train.loss".into(), self.loss.as_str().into()),
            ("train.grouping".into(), self.grouping.format()),
            ("train.beta1".into(), self.hyper.beta1.to_string()),
            ("train.beta2".into(), self.hyper.beta2.to_string()),
            ("train.eps".into(), format!("{:e}", self.hyper.eps)),
            ("train.weight_decay".into(), format!("{:e}", self.hyper.weight_decay)),
        ]
    }
}

/// One history row, recorded per epoch.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rl2: Option<f64>,
}

pub fn history_to_csv(history: &[EpochRecord]) -> String {
    let mut out = String::from("epoch,lr,train_loss,val_rl2\n");
    for r in history {
        let val = r.val_rl2.map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("{},{},{},{}\n", r.epoch, r.lr, r.train_loss, val));
    }
    out
}

/// Result of a training run: final and best parameters, loss history, and
/// the input statistics needed to reproduce the pipeline at inference time.
#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    pub model: MnoModel<T>,
    pub best_params: ParamSet<T>,
    pub best_metric: f64,
    pub history: Vec<EpochRecord>,
    pub stats: ChannelStats,
}

/// A sample preprocessed for the model: normalized inputs, prebuilt graph,
/// raw targets with per-group norms.
struct Prepared<T> {
    name: String,
    positions: Tensor<T>,
    features: Tensor<T>,
    graph: NeighborGraph,
    truth_groups: Vec<Tensor<T>>,
    inv_norms: Vec<f64>,
}

/// Input statistics for the pipeline: feature z-scoring only; targets stay
/// raw (see module docs).
pub fn fit_input_stats(train_set: &[PointSample]) -> Result<ChannelStats> {
    let fitted = ChannelStats::fit(train_set)?;
    Ok(ChannelStats {
        target_mean: vec![0.0; fitted.target_mean.len()],
        target_std: vec![1.0; fitted.target_std.len()],
        ..fitted
    })
}

fn prepare<T: Real>(
    sample: &PointSample,
    stats: &ChannelStats,
    grouping: &FieldGrouping,
    k: usize,
) -> Result<Prepared<T>> {
    grouping.validate(sample.target_dim())?;
    let normed = normalize_sample(sample, stats)?;
    let graph = knn_graph(&normed.positions, k)?;
    let mut truth_groups = Vec::with_capacity(grouping.fields.len());
    let mut inv_norms = Vec::with_capacity(grouping.fields.len());
    for field in &grouping.fields {
        let truth: Tensor<T> = slice_channels(&sample.targets, &field.channels).cast();
        let norm = truth.frob_norm().f64();
        if norm == 0.0 {
            return Err(Error::numeric(format!(
                "sample '{}': field '{}' has zero-norm truth",
                sample.name, field.name
            )));
        }
        truth_groups.push(truth);
        inv_norms.push(1.0 / norm);
    }
    Ok(Prepared {
        name: sample.name.clone(),
        positions: normed.positions.cast(),
        features: normed.features.cast(),
        graph,
        truth_groups,
        inv_norms,
    })
}

/// Training loss of one sample on one tape: equal-weight mean over field
/// groups of `||pred - truth|| / ||truth||`.
fn sample_loss_and_grads<T: Real>(
    model: &MnoModel<T>,
    prep: &Prepared<T>,
    grouping: &FieldGrouping,
    want_grads: bool,
) -> Result<(f64, Option<ParamSet<T>>)> {
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, &model.params);
    let pos = tape.constant(prep.positions.clone());
    let feat = tape.constant(prep.features.clone());
    let (out, _) = forward_on_tape(&mut tape, &bound, &model.config, pos, feat, &prep.graph)?;

    let mut acc = None;
    for (gi, field) in grouping.fields.iter().enumerate() {
        let pred = tape.slice_cols(out, field.channels.start, field.channels.end - field.channels.start);
        let truth = tape.constant(prep.truth_groups[gi].clone());
        let diff = tape.sub(pred, truth);
        let sq = tape.mul(diff, diff);
        let ssq = tape.sum_all(sq);
        let norm = tape.sqrt(ssq);
        let term = tape.scale(norm, prep.inv_norms[gi]);
        acc = Some(match acc {
            None => term,
            Some(prev) => tape.add(prev, term),
        });
    }
    let loss = tape.scale(acc.expect("at least one field group"), 1.0 / grouping.fields.len() as f64);
    let loss_val = tape.value(loss).data()[0].f64();
    if !loss_val.is_finite() {
        return Err(Error::numeric(format!("non-finite loss on sample '{}'", prep.name)));
    }
    if !want_grads {
        return Ok((loss_val, None));
    }
    let grads = tape.backward(loss)?;
    let g = extract_grads(&tape, &grads, &bound, &model.params);
    Ok((loss_val, Some(g)))
}

fn add_scaled<T: Real>(acc: &mut ParamSet<T>, other: &ParamSet<T>, scale: f64) {
    let s = T::of(scale);
    for (path, t) in acc.iter_mut() {
        let o = other.get(path).expect("aligned param sets");
        let td = t.data_mut();
        for (a, &b) in td.iter_mut().zip(o.data()) {
            *a += b * s;
        }
    }
}

/// Mean training-mode loss (per-sample per-field RL2) over a dataset, at
/// fixed parameters.
pub fn dataset_loss<T: Real>(
    model: &MnoModel<T>,
    stats: &ChannelStats,
    samples: &[PointSample],
    grouping: &FieldGrouping,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::argument("dataset_loss: empty dataset"));
    }
    let losses: Vec<Result<f64>> = samples
        .par_iter()
        .map(|s| {
            let prep = prepare::<T>(s, stats, grouping, model.config.k)?;
            sample_loss_and_grads(model, &prep, grouping, false).map(|(l, _)| l)
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / samples.len() as f64)
}

/// Train a model. Per-epoch shuffled mini-batches; the loss is the batch
/// mean of per-sample per-field RL2; optimizer and scheduler step once per
/// batch. Fully deterministic for a fixed seed (parallel work is collected
/// in sample order before any reduction).
pub fn train<T: Real>(
    mut model: MnoModel<T>,
    train_set: &[PointSample],
    val_set: Option<&[PointSample]>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::argument("train: empty dataset"));
    }
    cfg.grouping.validate(model.config.output_dim)?;
    let stats = fit_input_stats(train_set)?;

    let prepared: Vec<Prepared<T>> = train_set
        .par_iter()
        .map(|s| prepare::<T>(s, &stats, &cfg.grouping, model.config.k))
        .collect::<Result<Vec<_>>>()?;

    let n = prepared.len();
    let batches_per_epoch = n.div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let frozen = cfg.max_lr == 0.0;

    let mut opt = OptimizerState::new(&model.params, cfg.hyper);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_params = model.params.clone();
    let mut best_metric = f64::INFINITY;
    let mut step = 0usize;
    let mut indices: Vec<usize> = (0..n).collect();

    for epoch in 0..cfg.epochs {
        indices.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut last_lr = 0.0;
        for chunk in indices.chunks(cfg.batch_size) {
            // Per-sample losses and gradients in parallel, combined in
            // a fixed order afterwards.
            let results: Vec<Result<(f64, Option<ParamSet<T>>)>> = chunk
                .par_iter()
                .map(|&i| sample_loss_and_grads(&model, &prepared[i], &cfg.grouping, !frozen))
                .collect();

            let mut batch_loss = 0.0;
            let mut grad_acc: Option<ParamSet<T>> = None;
            for (pos_in_chunk, r) in results.into_iter().enumerate() {
                let (loss, grads) = r.map_err(|e| match e {
                    Error::Numeric(_) => Error::TrainAborted {
                        sample: prepared[chunk[pos_in_chunk]].name.clone(),
                        step,
                    },
                    other => other,
                })?;
                batch_loss += loss;
                if let Some(g) = grads {
                    match &mut grad_acc {
                        None => grad_acc = Some(g),
                        Some(acc) => add_scaled(acc, &g, 1.0),
                    }
                }
            }
            batch_loss /= chunk.len() as f64;
            if !batch_loss.is_finite() {
                return Err(Error::TrainAborted { sample: "<batch>".into(), step });
            }

            if !frozen {
                let mut grads = grad_acc.expect("gradients requested");
                let scale = T::of(1.0 / chunk.len() as f64);
                for (_, t) in grads.iter_mut() {
                    for v in t.data_mut() {
                        *v = *v * scale;
                    }
                }
                let lr = onecycle_lr(step, total_steps, cfg.max_lr)?;
                adamw_step(&mut opt, &mut model.params, &grads, lr)?;
                last_lr = lr;
            }
            epoch_loss += batch_loss;
            step += 1;
        }
        epoch_loss /= batches_per_epoch as f64;

        let val_rl2 = match val_set {
            Some(vs) if !vs.is_empty() => {
                Some(dataset_loss(&model, &stats, vs, &cfg.grouping)?)
            }
            _ => None,
        };
        let tracked = val_rl2.unwrap_or(epoch_loss);
        if tracked < best_metric {
            best_metric = tracked;
            best_params = model.params.clone();
        }
        history.push(EpochRecord { epoch, lr: last_lr, train_loss: epoch_loss, val_rl2 });
    }

    Ok(TrainOutcome { model, best_params, best_metric, history, stats })
}

/// Evaluate a model: per-field RL2 and MAE averaged over samples, plus an
/// optional total row over the concatenation of all grouped channels.
pub fn evaluate<T: Real>(
    model: &MnoModel<T>,
    stats: &ChannelStats,
    dataset: &[PointSample],
    grouping: &FieldGrouping,
) -> Result<MetricsReport> {
    if dataset.is_empty() {
        return Err(Error::argument("evaluate: empty dataset"));
    }
    grouping.validate(model.config.output_dim)?;
    let start = Instant::now();

    let per_sample: Vec<Result<Vec<(f64, f64)>>> = dataset
        .par_iter()
        .map(|sample| {
            let prep = prepare::<T>(sample, stats, grouping, model.config.k)?;
            let pred = {
                let mut tape = Tape::new();
                let bound = bind_params(&mut tape, &model.params);
                let pos = tape.constant(prep.positions.clone());
                let feat = tape.constant(prep.features.clone());
                let (out, _) =
                    forward_on_tape(&mut tape, &bound, &model.config, pos, feat, &prep.graph)?;
                tape.value(out).clone()
            };
            // Metrics against raw targets; the pipeline keeps targets
            // unnormalized so no inversion is needed.
            let truth: Tensor<T> = sample.targets.cast();
            let mut rows = Vec::with_capacity(grouping.fields.len() + 1);
            for field in &grouping.fields {
                let p = slice_channels(&pred, &field.channels);
                let t = slice_channels(&truth, &field.channels);
                rows.push((rl2(&p, &t)?, mae(&p, &t)?));
            }
            if grouping.total.is_some() {
                let lo = grouping.fields.iter().map(|f| f.channels.start).min().unwrap();
                let hi = grouping.fields.iter().map(|f| f.channels.end).max().unwrap();
                let p = slice_channels(&pred, &(lo..hi));
                let t = slice_channels(&truth, &(lo..hi));
                rows.push((rl2(&p, &t)?, mae(&p, &t)?));
            }
            Ok(rows)
        })
        .collect();

    let mut row_count = grouping.fields.len();
    if grouping.total.is_some() {
        row_count += 1;
    }
    let mut sums = vec![(0.0f64, 0.0f64); row_count];
    for rows in per_sample {
        for (i, (r, m)) in rows?.into_iter().enumerate() {
            sums[i].0 += r;
            sums[i].1 += m;
        }
    }
    let count = dataset.len() as f64;
    let mut rows: Vec<(String, f64, f64)> = grouping
        .fields
        .iter()
        .zip(&sums)
        .map(|(f, &(r, m))| (f.name.clone(), r / count, m / count))
        .collect();
    if let Some(total_name) = &grouping.total {
        let (r, m) = sums[row_count - 1];
        rows.push((total_name.clone(), r / count, m / count));
    }

    let fingerprint = config_fingerprint(&model.config, grouping);
    Ok(MetricsReport { rows, wall_time_s: start.elapsed().as_secs_f64(), config_fingerprint: fingerprint })
}

/// Short content hash of the model config plus grouping, stamped on reports.
pub fn config_fingerprint(config: &MnoConfig, grouping: &FieldGrouping) -> String {
    let text = io::manifest_to_string(&io::config_to_manifest(config)) + &grouping.format();
    io::sha256_hex(text.as_bytes())[..12].to_string()
}

/// Train one model per module mask from the same seed and data split and
/// evaluate each on the test set. Returns rows in mask order.
pub fn ablate<T: Real>(
    base_config: &MnoConfig,
    cfg: &TrainConfig,
    train_set: &[PointSample],
    val_set: Option<&[PointSample]>,
    test_set: &[PointSample],
    masks: &[ModuleMask],
) -> Result<Vec<(ModuleMask, MetricsReport)>> {
    if masks.is_empty() {
        return Err(Error::argument("ablate: no masks given"));
    }
    let mut rows = Vec::with_capacity(masks.len());
    for mask in masks {
        let config = MnoConfig { mask: *mask, ..base_config.clone() };
        let model = MnoModel::<T>::init(config, cfg.seed)?;
        let outcome = train(model, train_set, val_set, cfg)?;
        let best = MnoModel { config: outcome.model.config.clone(), params: outcome.best_params.clone() };
        let report = evaluate(&best, &outcome.stats, test_set, &cfg.grouping)?;
        rows.push((*mask, report));
    }
    Ok(rows)
}

/// Ablation table as CSV: one row per mask, per-field RL2/MAE columns.
pub fn ablate_to_csv(rows: &[(ModuleMask, MetricsReport)]) -> String {
    let mut header = String::from("modules");
    if let Some((_, first)) = rows.first() {
        for (name, _, _) in &first.rows {
            header.push_str(&format!(",rl2_{name},mae_{name}"));
        }
    }
    header.push('\n');
    let mut out = header;
    for (mask, report) in rows {
        out.push_str(&mask.label());
        for (_, r, m) in &report.rows {
            out.push_str(&format!(",{r},{m}"));
        }
        out.push('\n');
    }
    out
}

// ---- gradient check ----

/// Worst finite-difference mismatch across parameters.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_param: String,
    /// Per-parameter worst relative error, in path order.
    pub entries: Vec<(String, f64)>,
}

/// Relative error with a magnitude floor: gradients below `GRAD_FLOOR` are
/// held to the absolute tolerance `GRAD_FLOOR * tol` instead, since central
/// differences cannot resolve them above f64 rounding noise.
const GRAD_FLOOR: f64 = 1e-5;

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(GRAD_FLOOR);
    (a - b).abs() / denom
}

/// Compare analytic gradients against central finite differences of
/// `loss_fn`, parameter by parameter. `filter` selects which paths to check.
pub fn finite_diff_check(
    params: &ParamSet<f64>,
    analytic: &ParamSet<f64>,
    h: f64,
    filter: impl Fn(&str) -> bool,
    loss_fn: impl Fn(&ParamSet<f64>) -> Result<f64> + Sync,
) -> Result<GradCheckReport> {
    let paths: Vec<String> = params.paths().filter(|p| filter(p)).cloned().collect();
    let entries: Vec<Result<(String, f64)>> = paths
        .par_iter()
        .map(|path| {
            let base = params.get(path).unwrap();
            let grad = analytic.get(path).unwrap();
            let mut worst = 0.0f64;
            for i in 0..base.len() {
                let orig = base.data()[i];
                let mut plus = params.clone();
                plus.get_mut(path).unwrap().data_mut()[i] = orig + h;
                let lp = loss_fn(&plus)?;
                let mut minus = params.clone();
                minus.get_mut(path).unwrap().data_mut()[i] = orig - h;
                let lm = loss_fn(&minus)?;
                if !lp.is_finite() || !lm.is_finite() {
                    return Err(Error::numeric(format!(
                        "gradient check: non-finite loss probing '{path}'[{i}]"
                    )));
                }
                let fd = (lp - lm) / (2.0 * h);
                worst = worst.max(rel_err(grad.data()[i], fd));
            }
            Ok((path.clone(), worst))
        })
        .collect();

    let mut report = GradCheckReport { max_rel_err: 0.0, worst_param: String::new(), entries: Vec::new() };
    for e in entries {
        let (path, worst) = e?;
        if worst > report.max_rel_err {
            report.max_rel_err = worst;
            report.worst_param = path.clone();
        }
        report.entries.push((path, worst));
    }
    Ok(report)
}

/// Finite-difference validation of the full model backward pass in f64.
/// Parameters of masked-off modules are excluded from the report.
pub fn gradient_check(
    config: &MnoConfig,
    seed: u64,
    sample: &PointSample,
    h: f64,
) -> Result<GradCheckReport> {
    config.validate()?;
    let grouping = FieldGrouping::single("all", sample.target_dim());
    let model = MnoModel::<f64>::init(config.clone(), seed)?;
    let stats = fit_input_stats(std::slice::from_ref(sample))?;
    let prep = prepare::<f64>(sample, &stats, &grouping, config.k)?;

    let (_, analytic) = sample_loss_and_grads(&model, &prep, &grouping, true)?;
    let analytic = analytic.unwrap();

    let mask = config.mask;
    let filter = move |path: &str| {
        (mask.global || !path.contains(".global."))
            && (mask.local || !path.contains(".local."))
            && (mask.micro || !path.contains(".micro."))
    };

    let cfg = config.clone();
    let loss_fn = move |p: &ParamSet<f64>| {
        let probe = MnoModel { config: cfg.clone(), params: p.clone() };
        sample_loss_and_grads(&probe, &prep, &grouping, false).map(|(l, _)| l)
    };
    finite_diff_check(&model.params, &analytic, h, filter, loss_fn)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datagen::{gen_gaussian_field, gen_sphere_flow, GenSpec, Generator};

    fn tiny_model_config(f: usize, o: usize) -> MnoConfig {
        MnoConfig {
            blocks: 1,
            latent_dim: 8,
            modes: 4,
            heads: 2,
            k: 4,
            mask: ModuleMask::ALL,
            feature_dim: f,
            output_dim: o,
        }
    }

    fn sphere_grouping() -> FieldGrouping {
        FieldGrouping::parse("velocity=0..3,pressure=3..4").unwrap()
    }

    #[test]
    fn frozen_optimizer_keeps_loss_constant() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, 0)).unwrap();
        let config = tiny_model_config(4, 4);
        let model = MnoModel::<f32>::init(config, 0).unwrap();
        let mut cfg = TrainConfig::new(sphere_grouping());
        cfg.epochs = 4;
        cfg.batch_size = 1;
        cfg.max_lr = 0.0;
        let out = train(model, std::slice::from_ref(&sample), None, &cfg).unwrap();
        let first = out.history[0].train_loss;
        for r in &out.history {
            assert_eq!(r.train_loss, first, "loss changed with frozen optimizer");
        }
    }

    #[test]
    fn training_is_deterministic() {
        let samples: Vec<_> = (0..4)
            .map(|s| gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, s)).unwrap())
            .collect();
        let config = tiny_model_config(4, 4);
        let mut cfg = TrainConfig::new(sphere_grouping());
        cfg.epochs = 3;
        cfg.batch_size = 2;
        cfg.seed = 7;
        let run = || {
            let model = MnoModel::<f32>::init(config.clone(), cfg.seed).unwrap();
            train(model, &samples, None, &cfg).unwrap()
        };
        let a = run();
        let b = run();
        assert_eq!(a.history, b.history);
        for (path, t) in a.model.params.iter() {
            assert_eq!(t.data(), b.model.params.get(path).unwrap().data(), "param {path}");
        }
    }

    #[test]
    fn loss_decreases_on_tiny_overfit() {
        let sample = gen_gaussian_field(&GenSpec::new(Generator::GaussianField, 32, 3)).unwrap();
        let config = MnoConfig {
            feature_dim: 0,
            output_dim: 1,
            ..tiny_model_config(0, 1)
        };
        let model = MnoModel::<f32>::init(config, 0).unwrap();
        let mut cfg = TrainConfig::new(FieldGrouping::single("field", 1));
        cfg.epochs = 60;
        cfg.batch_size = 1;
        cfg.max_lr = 3e-3;
        let out = train(model, std::slice::from_ref(&sample), None, &cfg).unwrap();
        let losses: Vec<f64> = out.history.iter().map(|r| r.train_loss).collect();
        let head = losses[..6].iter().cloned().fold(f64::INFINITY, f64::min);
        let tail = losses[losses.len() - 6..].iter().cloned().fold(f64::INFINITY, f64::min);
        assert!(tail < head, "no improvement: head {head} tail {tail}");
    }

    #[test]
    fn evaluate_matches_final_train_loss_on_training_sample() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, 1)).unwrap();
        let config = tiny_model_config(4, 4);
        let model = MnoModel::<f32>::init(config, 0).unwrap();
        let mut cfg = TrainConfig::new(sphere_grouping());
        cfg.epochs = 5;
        cfg.batch_size = 1;
        let out = train(model, std::slice::from_ref(&sample), None, &cfg).unwrap();

        // Training loss at the final parameters equals evaluate's mean RL2.
        let loss = dataset_loss(&out.model, &out.stats, std::slice::from_ref(&sample), &cfg.grouping).unwrap();
        let report = evaluate(&out.model, &out.stats, std::slice::from_ref(&sample), &cfg.grouping).unwrap();
        assert!((loss - report.mean_rl2()).abs() < 1e-6, "{loss} vs {}", report.mean_rl2());
    }

    #[test]
    fn evaluate_reports_grouped_fields_and_total() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, 2)).unwrap();
        let config = tiny_model_config(4, 4);
        let model = MnoModel::<f32>::init(config, 0).unwrap();
        let stats = fit_input_stats(std::slice::from_ref(&sample)).unwrap();
        let grouping = FieldGrouping::parse("x1=0..2,x2=2..4;total=x").unwrap();
        let report = evaluate(&model, &stats, std::slice::from_ref(&sample), &grouping).unwrap();
        assert_eq!(report.rows.len(), 3);
        assert_eq!(report.rows[2].0, "x");
        // Grouping that references missing channels is rejected.
        let bad = FieldGrouping::parse("a=0..9").unwrap();
        assert!(evaluate(&model, &stats, std::slice::from_ref(&sample), &bad).is_err());
    }

    #[test]
    fn single_sample_report_equals_sample_metrics() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, 4)).unwrap();
        let config = tiny_model_config(4, 4);
        let model = MnoModel::<f32>::init(config, 1).unwrap();
        let stats = fit_input_stats(std::slice::from_ref(&sample)).unwrap();
        let grouping = sphere_grouping();
        let report = evaluate(&model, &stats, std::slice::from_ref(&sample), &grouping).unwrap();

        // Recompute by hand for the one sample.
        let normed = normalize_sample(&sample, &stats).unwrap();
        let graph = knn_graph(&normed.positions, model.config.k).unwrap();
        let pred = crate::model::forward(
            &model,
            &normed.positions.cast::<f32>(),
            &normed.features.cast::<f32>(),
            &graph,
        )
        .unwrap();
        for (field, row) in grouping.fields.iter().zip(&report.rows) {
            let p = slice_channels(&pred, &field.channels);
            let t = slice_channels(&sample.targets, &field.channels);
            let want_rl2 = rl2(&p, &t).unwrap();
            let want_mae = mae(&p, &t).unwrap();
            assert!((row.1 - want_rl2).abs() < 1e-12);
            assert!((row.2 - want_mae).abs() < 1e-12);
        }
    }

    #[test]
    fn ablate_single_mask_degenerates_to_train_eval() {
        let samples: Vec<_> = (0..3)
            .map(|s| gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 16, s)).unwrap())
            .collect();
        let config = tiny_model_config(4, 4);
        let mut cfg = TrainConfig::new(sphere_grouping());
        cfg.epochs = 2;
        cfg.batch_size = 2;
        let rows = ablate::<f32>(&config, &cfg, &samples[..2], None, &samples[2..], &[ModuleMask::ALL]).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].0.label(), "Global+Local+Micro");

        let csv = ablate_to_csv(&rows);
        assert!(csv.starts_with("modules,rl2_velocity,mae_velocity,rl2_pressure,mae_pressure\n"));
        assert_eq!(csv.lines().count(), 2);
    }

    #[test]
    fn linear_loss_finite_difference_is_machine_precision() {
        // loss = sum(c .* w): the analytic gradient is c; central
        // differences are exact up to f64 rounding.
        let mut params = ParamSet::<f64>::new();
        params.insert("w", Tensor::vector(vec![0.3, -0.7, 1.1]));
        let c = [2.0, -1.5, 0.25];
        let mut analytic = ParamSet::<f64>::new();
        analytic.insert("w", Tensor::vector(c.to_vec()));
        let report = finite_diff_check(&params, &analytic, 1e-5, |_| true, |p| {
            let w = p.get("w").unwrap().data();
            Ok(w.iter().zip(c.iter()).map(|(a, b)| a * b).sum())
        })
        .unwrap();
        assert!(report.max_rel_err < 1e-9, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn gradient_check_micro_mno_under_1e4() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 8, 0)).unwrap();
        let config = MnoConfig {
            blocks: 1,
            latent_dim: 4,
            modes: 2,
            heads: 1,
            k: 2,
            mask: ModuleMask::ALL,
            feature_dim: 4,
            output_dim: 4,
        };
        let report = gradient_check(&config, 0, &sample, 1e-5).unwrap();
        assert!(
            report.max_rel_err < 1e-4,
            "max rel err {} at {}",
            report.max_rel_err,
            report.worst_param
        );
    }

    #[test]
    fn gradient_check_respects_mask_in_report() {
        let sample = gen_sphere_flow(&GenSpec::new(Generator::SphereFlow, 8, 0)).unwrap();
        let config = MnoConfig {
            blocks: 1,
            latent_dim: 4,
            modes: 2,
            heads: 1,
            k: 2,
            mask: ModuleMask::parse("M").unwrap(),
            feature_dim: 4,
            output_dim: 4,
        };
        let report = gradient_check(&config, 0, &sample, 1e-5).unwrap();
        assert!(report.entries.iter().all(|(p, _)| !p.contains(".global.") && !p.contains(".local.")));
        assert!(report.entries.iter().any(|(p, _)| p.contains(".micro.")));
        assert!(report.max_rel_err < 1e-4);
    }

    #[test]
    fn history_csv_layout() {
        let hist = vec![
            EpochRecord { epoch: 0, lr: 1e-4, train_loss: 0.5, val_rl2: Some(0.6) },
            EpochRecord { epoch: 1, lr: 2e-4, train_loss: 0.4, val_rl2: None },
        ];
        let csv = history_to_csv(&hist);
        let mut lines = csv.lines();
        assert_eq!(lines.next().unwrap(), "epoch,lr,train_loss,val_rl2");
        assert_eq!(lines.next().unwrap(), "0,0.0001,0.5,0.6");
        assert_eq!(lines.next().unwrap(), "1,0.0002,0.4,");
    }
}
