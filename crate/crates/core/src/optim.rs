//! AdamW with decoupled weight decay and the one-cycle learning-rate schedule.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::scalar::Real;
#[cfg(test)]
use crate::tensor::Tensor;

/// AdamW constants. Defaults follow the conventional values and are recorded
/// in every run manifest.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamWHyper {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWHyper {
    fn default() -> Self {
        AdamWHyper { beta1: 0.9, beta2: 0.999, eps: 1e-8, weight_decay: 1e-4 }
    }
}

/// First/second moment estimates per parameter plus the step counter.
#[derive(Debug, Clone)]
pub struct OptimizerState<T> {
    pub step: u64,
    pub hyper: AdamWHyper,
    moments: BTreeMap<String, (Vec<T>, Vec<T>)>,
}

impl<T: Real> OptimizerState<T> {
    pub fn new(params: &ParamSet<T>, hyper: AdamWHyper) -> Self {
        let moments = params
            .iter()
            .map(|(k, v)| (k.clone(), (vec![T::zero(); v.len()], vec![T::zero(); v.len()])))
            .collect();
        OptimizerState { step: 0, hyper, moments }
    }

    pub fn moments(&self, path: &str) -> Option<(&[T], &[T])> {
        self.moments.get(path).map(|(m, v)| (m.as_slice(), v.as_slice()))
    }
}

/// One AdamW update: bias-corrected moments, decoupled weight decay applied
/// to the parameter value (never folded into the gradient).
pub fn adamw_step<T: Real>(
    state: &mut OptimizerState<T>,
    params: &mut ParamSet<T>,
    grads: &ParamSet<T>,
    lr: f64,
) -> Result<()> {
    if lr <= 0.0 {
        return Err(Error::argument(format!("adamw: lr must be positive, got {lr}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let h = state.hyper;
    let b1 = T::of(h.beta1);
    let b2 = T::of(h.beta2);
    let one = T::one();
    let bias1 = T::one() / (one - b1.powi(t));
    let bias2 = T::one() / (one - b2.powi(t));
    let lr_t = T::of(lr);
    let eps = T::of(h.eps);
    let decay = T::of(lr * h.weight_decay);

    // Collect paths first: params is mutated while grads is read.
    let paths: Vec<String> = params.paths().cloned().collect();
    for path in paths {
        let g = grads
            .get(&path)
            .ok_or_else(|| Error::argument(format!("adamw: missing gradient for '{path}'")))?;
        let p = params.get_mut(&path).unwrap();
        if g.shape() != p.shape() {
            return Err(Error::argument(format!(
                "adamw: gradient shape {:?} does not match parameter '{path}' {:?}",
                g.shape(),
                p.shape()
            )));
        }
        let (m, v) = state.moments.get_mut(&path).expect("state built from same param set");
        let pd = p.data_mut();
        let gd = g.data();
        for i in 0..pd.len() {
            m[i] = b1 * m[i] + (one - b1) * gd[i];
            v[i] = b2 * v[i] + (one - b2) * gd[i] * gd[i];
            let m_hat = m[i] * bias1;
            let v_hat = v[i] * bias2;
            pd[i] = pd[i] - decay * pd[i] - lr_t * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// One-cycle schedule constants not fixed by the training recipe.
pub const ONECYCLE_PCT_START: f64 = 0.3;
pub const ONECYCLE_DIV_START: f64 = 25.0;
pub const ONECYCLE_DIV_FINAL: f64 = 1e4;

/// Cosine interpolation from `a` (frac = 0) to `b` (frac = 1).
fn cos_interp(a: f64, b: f64, frac: f64) -> f64 {
    b + (a - b) * 0.5 * (1.0 + (std::f64::consts::PI * frac).cos())
}

/// Cosine-annealed single-cycle schedule: warm up from `max_lr / div_start`
/// to `max_lr` over the first 30% of steps, then anneal to
/// `max_lr / div_final`.
pub fn onecycle_lr(step: usize, total_steps: usize, max_lr: f64) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::argument(format!(
            "onecycle: step {step} out of range for {total_steps} total steps"
        )));
    }
    if max_lr <= 0.0 {
        return Err(Error::argument(format!("onecycle: max_lr must be positive, got {max_lr}")));
    }
    let warm_steps = (ONECYCLE_PCT_START * total_steps as f64).round();
    let start_lr = max_lr / ONECYCLE_DIV_START;
    let final_lr = max_lr / ONECYCLE_DIV_FINAL;
    let s = step as f64;
    let lr = if warm_steps < 1.0 {
        // Degenerate warmup: whole run anneals.
        cos_interp(max_lr, final_lr, s / total_steps as f64)
    } else if s <= warm_steps {
        cos_interp(start_lr, max_lr, s / warm_steps)
    } else {
        cos_interp(max_lr, final_lr, (s - warm_steps) / (total_steps as f64 - warm_steps))
    };
    Ok(lr)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_param(w: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![w]));
        p
    }

    fn grad_of(g: f64) -> ParamSet<f64> {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::vector(vec![g]));
        p
    }

    #[test]
    fn zero_grad_zero_decay_is_identity() {
        let mut params = single_param(1.25);
        let hyper = AdamWHyper { weight_decay: 0.0, ..AdamWHyper::default() };
        let mut state = OptimizerState::new(&params, hyper);
        adamw_step(&mut state, &mut params, &grad_of(0.0), 0.1).unwrap();
        assert_eq!(params.get("w").unwrap().data(), &[1.25]);
        assert_eq!(state.step, 1);
    }

    #[test]
    fn one_step_hand_computation() {
        // w=1, g=1, lr=0.1, defaults, wd=0: bias correction makes the first
        // update exactly lr * 1 / (1 + eps).
        let mut params = single_param(1.0);
        let hyper = AdamWHyper { weight_decay: 0.0, ..AdamWHyper::default() };
        let mut state = OptimizerState::new(&params, hyper);
        adamw_step(&mut state, &mut params, &grad_of(1.0), 0.1).unwrap();
        let w = params.get("w").unwrap().data()[0];
        let expected = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w - expected).abs() < 1e-12, "{w} vs {expected}");
        assert!((w - 0.9).abs() < 1e-6);
    }

    #[test]
    fn pure_decay_step() {
        let mut params = single_param(1.0);
        let hyper = AdamWHyper { weight_decay: 0.01, ..AdamWHyper::default() };
        let mut state = OptimizerState::new(&params, hyper);
        adamw_step(&mut state, &mut params, &grad_of(0.0), 0.1).unwrap();
        let w = params.get("w").unwrap().data()[0];
        assert!((w - 0.999).abs() < 1e-15, "{w}");
    }

    #[test]
    fn missing_gradient_is_an_error() {
        let mut params = single_param(1.0);
        let mut state = OptimizerState::new(&params, AdamWHyper::default());
        let empty = ParamSet::new();
        assert!(adamw_step(&mut state, &mut params, &empty, 0.1).is_err());
    }

    #[test]
    fn onecycle_endpoints_and_peak() {
        let max_lr = 1e-3;
        // step 0: max_lr / div_start.
        let lr0 = onecycle_lr(0, 100, max_lr).unwrap();
        assert!((lr0 - max_lr / 25.0).abs() < 1e-15);
        // peak at round(pct_start * total).
        let peak = onecycle_lr(30, 100, max_lr).unwrap();
        assert!((peak - max_lr).abs() < 1e-15);
        // out of range.
        assert!(onecycle_lr(100, 100, max_lr).is_err());
    }

    #[test]
    fn onecycle_anneal_midpoint_closed_form() {
        // total=100, warm=30; step 65 is the anneal midpoint, where the
        // cosine gives the arithmetic mean of max and final lr.
        let lr = onecycle_lr(65, 100, 1e-3).unwrap();
        let expected = 1e-7 + (1e-3 - 1e-7) * 0.5; // 5.0005e-4
        assert!((lr - expected).abs() < 1e-15, "{lr} vs {expected}");
    }

    #[test]
    fn onecycle_continuous_and_piecewise_monotone() {
        let total = 200;
        let mut prev = onecycle_lr(0, total, 1e-3).unwrap();
        let warm = (0.3 * total as f64).round() as usize;
        for s in 1..total {
            let lr = onecycle_lr(s, total, 1e-3).unwrap();
            if s <= warm {
                assert!(lr >= prev - 1e-12, "warmup not increasing at {s}");
            } else {
                assert!(lr <= prev + 1e-12, "anneal not decreasing at {s}");
            }
            // No jumps bigger than the coarse per-step bound.
            assert!((lr - prev).abs() < 1e-3 / 10.0);
            prev = lr;
        }
    }
}
