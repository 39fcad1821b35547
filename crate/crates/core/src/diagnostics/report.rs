use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::analysis::{layer_mean_effective_rank, layer_mean_entropy};
use super::integrators::{energy_trace, symplecticity_check, DeterminantStats, ForceField};
use crate::attention::Integrator;
use crate::backbone::{count_params, BatchShape, Model, ParamLedger, TokenBatch};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

pub const REPORT_FILE: &str = "report.json";

/// How the per-layer statistics were averaged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisProtocol {
    pub batches: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub heads: usize,
    pub det_samples: usize,
    pub energy_steps: usize,
    pub energy_dt: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticsReport {
    pub protocol: AnalysisProtocol,
    /// Mean row entropy per layer in nats; absent where weights are not
    /// distributions (differential attention).
    pub layer_entropy: Vec<Option<f64>>,
    /// Mean row entropy of uniform causal attention at this length.
    pub uniform_entropy: f64,
    pub layer_effective_rank: Vec<f64>,
    /// Keyed `layer{l}.head{h}` for coupled models (learned weights and step
    /// sizes) plus `reference.{integrator}` for random coupling.
    pub jacobian_dets: BTreeMap<String, DeterminantStats>,
    /// Harmonic-oscillator `(step, H)` pairs, keyed by integrator.
    pub energy_trace: BTreeMap<String, Vec<(usize, f64)>>,
    pub param_ledger: ParamLedger,
}

impl DiagnosticsReport {
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(REPORT_FILE);
        std::fs::write(&path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(&path, e))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AnalyzeOptions {
    pub det_samples: usize,
    pub energy_steps: usize,
    pub energy_dt: f64,
    pub seed: u64,
}

impl Default for AnalyzeOptions {
    fn default() -> Self {
        AnalyzeOptions { det_samples: 8, energy_steps: 100, energy_dt: 0.1, seed: 0 }
    }
}

/// Per-layer weights averaged over `batches`, one tensor per layer for the
/// last batch (for dumps), and the report.
pub fn analyze(model: &Model, batches: &[TokenBatch], opts: &AnalyzeOptions) -> Result<(DiagnosticsReport, Vec<Tensor>)> {
    let first = batches.first().ok_or_else(|| Error::InvalidArgument("analysis needs at least one batch".into()))?;
    let config = model.config();
    let n_layers = config.n_layers;
    let mut entropy: Vec<Option<f64>> = vec![Some(0.0); n_layers];
    let mut rank = vec![0.0; n_layers];
    let mut last = Vec::new();
    for batch in batches {
        if batch.seq != first.seq {
            return Err(Error::Shape("analysis batches must share one sequence length".into()));
        }
        let (_, weights) = model.infer(&batch.tokens, BatchShape::new(batch.batch, batch.seq))?;
        for (l, w) in weights.iter().enumerate() {
            entropy[l] = match (entropy[l], layer_mean_entropy(w)) {
                (Some(acc), Ok(e)) => Some(acc + e),
                _ => None,
            };
            rank[l] += layer_mean_effective_rank(w)?;
        }
        last = weights;
    }
    let n = batches.len() as f64;
    let layer_entropy = entropy.into_iter().map(|e| e.map(|v| v / n)).collect();
    let layer_effective_rank = rank.into_iter().map(|r| r / n).collect();
    let uniform_entropy = (1..=first.seq).map(|i| (i as f64).ln()).sum::<f64>() / first.seq as f64;

    let mut rng = Rng::new(opts.seed).derive("analysis.jacobian");
    let mut jacobian_dets = BTreeMap::new();
    let dk = config.d_k();
    if 2 * dk <= super::integrators::MAX_PHASE_DIM {
        if let Some(integrator) = config.variant.kind.integrator() {
            for (l, slots) in model.layout().layers.iter().enumerate() {
                let (Some((w1, w2)), Some(tau)) = (slots.coupling, slots.tau) else { continue };
                let force = ForceField::Coupling { w1: model.params()[w1].clone(), w2: model.params()[w2].clone() };
                for (h, &t) in model.params()[tau].data().iter().enumerate() {
                    let stats = symplecticity_check(integrator, &force, t.exp(), dk, opts.det_samples, &mut rng)?;
                    jacobian_dets.insert(format!("layer{l}.head{h}"), stats);
                }
            }
        }
        for integrator in [Integrator::Leapfrog, Integrator::Euler] {
            let force = ForceField::random_coupling(dk, 1.0, &mut rng)?;
            let stats = symplecticity_check(integrator, &force, opts.energy_dt, dk, opts.det_samples, &mut rng)?;
            jacobian_dets.insert(format!("reference.{}", integrator.name()), stats);
        }
    }
    let mut energy = BTreeMap::new();
    for integrator in [Integrator::Leapfrog, Integrator::Euler] {
        let trace = energy_trace(integrator, opts.energy_dt, opts.energy_steps, &[1.0], &[0.0])?;
        energy.insert(integrator.name().to_string(), trace.into_iter().enumerate().collect());
    }
    let report = DiagnosticsReport {
        protocol: AnalysisProtocol {
            batches: batches.len(),
            batch_size: first.batch,
            seq_len: first.seq,
            heads: config.n_heads,
            det_samples: opts.det_samples,
            energy_steps: opts.energy_steps,
            energy_dt: opts.energy_dt,
        },
        layer_entropy,
        uniform_entropy,
        layer_effective_rank,
        jacobian_dets,
        energy_trace: energy,
        param_ledger: count_params(config),
    };
    Ok((report, last))
}
