use serde::{Deserialize, Serialize};

use crate::backbone::{Model, ModelConfig, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::check::{finite_diff_grad4, relative_error};
use crate::numerics::{Graph, Rng};

/// Fourth-order central-difference step.
pub const FD_STEP: f64 = 1e-3;
/// Magnitude below which gradients are compared in absolute terms.
pub const REL_FLOOR: f64 = 1e-7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamGradCheck {
    pub name: String,
    pub len: usize,
    pub worst_rel_error: f64,
    pub max_abs_grad: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub tolerance: f64,
    pub params: Vec<ParamGradCheck>,
    pub worst_rel_error: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.worst_rel_error < self.tolerance
    }

    pub fn failures(&self) -> Vec<&ParamGradCheck> {
        self.params.iter().filter(|p| !(p.worst_rel_error < self.tolerance)).collect()
    }

    /// `Err` naming every parameter over tolerance.
    pub fn check(&self) -> Result<()> {
        if self.passed() {
            return Ok(());
        }
        let names: Vec<String> =
            self.failures().iter().map(|p| format!("{} ({:.3e})", p.name, p.worst_rel_error)).collect();
        Err(Error::InvalidArgument(format!(
            "gradient check over tolerance {:e}: {}",
            self.tolerance,
            names.join(", ")
        )))
    }
}

/// Two random sequences of `min(max_seq_len, 16)` tokens with random
/// next-token targets; every position is scored.
pub fn grad_check_batch(config: &ModelConfig, seed: u64) -> Result<TokenBatch> {
    let mut rng = Rng::new(seed).derive("gradcheck.batch");
    let (b, t) = (2, config.max_seq_len.min(16));
    let mut draw = || (0..b * t).map(|_| rng.index(config.vocab_size)).collect::<Vec<_>>();
    let tokens = draw();
    let targets = draw();
    TokenBatch::new(b, t, tokens, targets, vec![true; b * t])
}

fn loss_value(model: &Model, batch: &TokenBatch) -> Result<f64> {
    let mut g = Graph::new();
    let vars = model.bind(&mut g, false)?;
    let (loss, _) = model.loss(&mut g, &vars, batch)?;
    g.value(loss).item()
}

/// Compare every parameter's reverse-mode gradient with central
/// differences on a fixed random batch.
pub fn grad_check_model(config: &ModelConfig, seed: u64, tolerance: f64) -> Result<GradCheckReport> {
    let model = Model::new(config.clone(), seed)?;
    let batch = grad_check_batch(config, seed)?;
    let mut g = Graph::new();
    let vars = model.bind(&mut g, true)?;
    let (loss, _) = model.loss(&mut g, &vars, &batch)?;
    g.backward(loss)?;

    let mut scratch = model.clone();
    let mut params = Vec::with_capacity(vars.len());
    for (i, (name, value)) in model.named_params().enumerate() {
        let auto = g.grad(vars[i]).cloned().unwrap_or_else(|| crate::numerics::Tensor::zeros(value.shape()));
        let numeric = finite_diff_grad4(
            |x| {
                scratch.params_mut()[i] = x.clone();
                loss_value(&scratch, &batch)
            },
            value,
            FD_STEP,
        )?;
        scratch.params_mut()[i] = value.clone();
        let worst = auto
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(&a, &n)| relative_error(a, n, REL_FLOOR))
            .fold(0.0, f64::max);
        let max_abs_grad = auto.data().iter().map(|v| v.abs()).fold(0.0, f64::max);
        params.push(ParamGradCheck { name: name.to_string(), len: value.len(), worst_rel_error: worst, max_abs_grad });
    }
    let worst_rel_error = params.iter().map(|p| p.worst_rel_error).fold(0.0, f64::max);
    Ok(GradCheckReport { tolerance, params, worst_rel_error })
}
