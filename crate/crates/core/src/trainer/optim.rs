use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Optimizer and schedule settings for one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_peak: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
    pub clip_norm: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
    pub batch_size: usize,
    pub eval_every: usize,
    /// Held-out sequences per evaluation.
    #[serde(default = "default_eval_sequences")]
    pub eval_sequences: usize,
    pub seed: u64,
}

fn default_eps() -> f64 {
    1e-8
}

fn default_eval_sequences() -> usize {
    crate::tasks::EVAL_SEQUENCES
}

impl Default for TrainConfig {
    /// MQAR settings: AdamW (0.9, 0.95), lr 3e-4, weight decay 0.01,
    /// clipping 1.0, 500 warmup steps, batch 64.
    fn default() -> Self {
        TrainConfig {
            lr_peak: 3e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            eps: default_eps(),
            clip_norm: 1.0,
            warmup_steps: 500,
            total_steps: 10_000,
            batch_size: 64,
            eval_every: 500,
            eval_sequences: default_eval_sequences(),
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.total_steps == 0 || self.batch_size == 0 || self.eval_every == 0 || self.eval_sequences == 0 {
            return bad("total_steps, batch_size, eval_every and eval_sequences must be positive".into());
        }
        if self.warmup_steps >= self.total_steps {
            return bad(format!("warmup_steps {} must be below total_steps {}", self.warmup_steps, self.total_steps));
        }
        if !(self.lr_peak >= 0.0 && self.lr_peak.is_finite()) {
            return bad(format!("lr_peak must be finite and non-negative, got {}", self.lr_peak));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return bad(format!("weight_decay must be finite and non-negative, got {}", self.weight_decay));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{name} must lie in [0, 1), got {b}"));
            }
        }
        if !(self.eps > 0.0) || !(self.clip_norm > 0.0) {
            return bad("eps and clip_norm must be positive".into());
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `lr_peak`, then half-cosine decay to 0 at
/// `total_steps`.
pub fn lr_at(step: usize, config: &TrainConfig) -> Result<f64> {
    if step > config.total_steps {
        return Err(Error::InvalidArgument(format!("step {step} beyond total_steps {}", config.total_steps)));
    }
    let (w, total) = (config.warmup_steps, config.total_steps);
    if step < w {
        return Ok(config.lr_peak * step as f64 / w as f64);
    }
    if step == total {
        return Ok(0.0);
    }
    let progress = (step - w) as f64 / (total - w) as f64;
    Ok(config.lr_peak * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos()))
}

/// Scale `grads` in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor], max_norm: f64) -> f64 {
    let norm = grads.iter().map(Tensor::sq_norm).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    norm
}

/// Bias-corrected first and second moments, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
}

impl AdamState {
    pub fn new(params: &[Tensor]) -> Self {
        let zeros = || params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamState { step: 0, m: zeros(), v: zeros() }
    }
}

/// One AdamW update with decoupled weight decay on parameters whose `decay`
/// flag is set. Non-finite gradients abort before anything is modified.
pub fn adamw_step(
    params: &mut [Tensor],
    grads: &[Tensor],
    decay: &[bool],
    state: &mut AdamState,
    lr: f64,
    config: &TrainConfig,
) -> Result<()> {
    let n = params.len();
    if grads.len() != n || decay.len() != n || state.m.len() != n || state.v.len() != n {
        return Err(Error::Shape(format!(
            "adamw: {n} parameters, {} gradients, {} decay flags, {} moments",
            grads.len(),
            decay.len(),
            state.m.len()
        )));
    }
    for (p, g) in params.iter().zip(grads) {
        if p.shape() != g.shape() {
            return Err(Error::Shape(format!("adamw: parameter {:?} vs gradient {:?}", p.shape(), g.shape())));
        }
        if !g.all_finite() {
            return Err(Error::NonFinite { op: "adamw_step" });
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (config.beta1, config.beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for i in 0..n {
        let shrink = if decay[i] { 1.0 - lr * config.weight_decay } else { 1.0 };
        let (m, v) = (state.m[i].data_mut(), state.v[i].data_mut());
        let p = params[i].data_mut();
        for (j, &g) in grads[i].data().iter().enumerate() {
            m[j] = b1 * m[j] + (1.0 - b1) * g;
            v[j] = b2 * v[j] + (1.0 - b2) * g * g;
            let update = (m[j] / c1) / ((v[j] / c2).sqrt() + config.eps);
            p[j] = p[j] * shrink - lr * update;
        }
    }
    Ok(())
}
