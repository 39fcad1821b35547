//! Computations behind the browser demo. The functions here are plain Rust;
//! on wasm32 they are exported to JavaScript unchanged.

use cqk_core::attention::{AttentionVariant, Integrator, VariantKind};
use cqk_core::backbone::{BatchShape, Model, ModelConfig, Preset};
use cqk_core::diagnostics::{attention_slice, energy_trace, step_determinant, ForceField, MAX_PHASE_DIM};
use cqk_core::numerics::Rng;
use cqk_core::tasks::{mqar_generate, Difficulty, MqarSpec};

#[cfg(target_arch = "wasm32")]
mod bindings;

/// Longest energy trace the page may request.
pub const MAX_TRACE_STEPS: usize = 100_000;

fn integrator(name: &str) -> Result<Integrator, String> {
    let kind: VariantKind = name.parse().map_err(|e| format!("{e}"))?;
    kind.integrator().ok_or_else(|| format!("`{name}` is not an integrator (leapfrog, euler)"))
}

/// Energy `½(‖q‖² + ‖k‖²)` of the unit oscillator started at `q = 1, k = 0`,
/// after each of `steps` steps; entry 0 is the initial energy 0.5.
pub fn energy_series(integrator_name: &str, dt: f64, steps: usize) -> Result<Vec<f64>, String> {
    if steps > MAX_TRACE_STEPS {
        return Err(format!("at most {MAX_TRACE_STEPS} steps"));
    }
    if !dt.is_finite() || dt < 0.0 {
        return Err(format!("dt must be a non-negative number, got {dt}"));
    }
    energy_trace(integrator(integrator_name)?, dt, steps, &[1.0], &[0.0]).map_err(|e| e.to_string())
}

/// One-step Jacobian determinant at each `dt`, for a fixed random coupling
/// network and phase point drawn from `seed`.
pub fn determinant_sweep(integrator_name: &str, d_k: usize, coupling_std: f64, seed: u64, dts: &[f64]) -> Result<Vec<f64>, String> {
    let integrator = integrator(integrator_name)?;
    if d_k == 0 || 2 * d_k > MAX_PHASE_DIM {
        return Err(format!("d_k must lie in 1..={}", MAX_PHASE_DIM / 2));
    }
    let mut rng = Rng::new(seed).derive("demo.determinant");
    let force = ForceField::random_coupling(d_k, coupling_std, &mut rng).map_err(|e| e.to_string())?;
    let q = rng.normal(&[d_k], 0.0, 1.0).map_err(|e| e.to_string())?;
    let k = rng.normal(&[d_k], 0.0, 1.0).map_err(|e| e.to_string())?;
    dts.iter()
        .map(|&dt| step_determinant(integrator, &force, dt, q.data(), k.data()).map_err(|e| e.to_string()))
        .collect()
}

/// Causal attention weights of one head on one easy MQAR sequence, for a
/// freshly initialized micro model.
#[derive(Clone, Debug, PartialEq)]
pub struct Heatmap {
    /// Sequence length; `weights` is `size × size`, row-major, query rows.
    pub size: usize,
    pub weights: Vec<f64>,
    pub tokens: Vec<usize>,
}

pub fn attention_heatmap(variant_name: &str, n_steps: usize, layer: usize, head: usize, seed: u64) -> Result<Heatmap, String> {
    let kind: VariantKind = variant_name.parse().map_err(|e| format!("{e}"))?;
    let mut variant = AttentionVariant::new(kind);
    if variant.is_coupled() {
        variant.n_steps = n_steps;
    }
    if kind == VariantKind::Gqa {
        variant.gqa_group = 2;
    }
    let config = ModelConfig::preset(Preset::Micro, variant);
    if layer >= config.n_layers || head >= config.n_heads {
        return Err(format!("layer must be < {} and head < {}", config.n_layers, config.n_heads));
    }
    let model = Model::new(config, seed).map_err(|e| e.to_string())?;
    let spec = MqarSpec::preset(Difficulty::Easy, seed);
    let batch = mqar_generate(&spec, 1, &mut Rng::new(seed).derive("demo.sequence")).map_err(|e| e.to_string())?.trimmed();
    let (_, weights) = model.infer(&batch.tokens, BatchShape::new(1, batch.seq)).map_err(|e| e.to_string())?;
    let m = attention_slice(&weights[layer], 0, head).map_err(|e| e.to_string())?;
    Ok(Heatmap { size: batch.seq, weights: m.data().to_vec(), tokens: batch.tokens })
}
