use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest supported number of coupled integration steps.
pub const MAX_STEPS: usize = 7;
pub const DEFAULT_STEPS: usize = 3;
pub const DEFAULT_DT: f64 = 0.1;
pub const DEFAULT_GQA_GROUP: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    Standard,
    CoupledLeapfrog,
    CoupledEuler,
    MlpOnly,
    Gqa,
    Diff,
}

impl VariantKind {
    pub const ALL: [VariantKind; 6] = [
        VariantKind::Standard,
        VariantKind::CoupledLeapfrog,
        VariantKind::CoupledEuler,
        VariantKind::MlpOnly,
        VariantKind::Gqa,
        VariantKind::Diff,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Standard => "standard",
            VariantKind::CoupledLeapfrog => "coupled_leapfrog",
            VariantKind::CoupledEuler => "coupled_euler",
            VariantKind::MlpOnly => "mlp_only",
            VariantKind::Gqa => "gqa",
            VariantKind::Diff => "diff",
        }
    }

    pub fn integrator(self) -> Option<Integrator> {
        match self {
            VariantKind::CoupledLeapfrog => Some(Integrator::Leapfrog),
            VariantKind::CoupledEuler => Some(Integrator::Euler),
            _ => None,
        }
    }
}

impl fmt::Display for VariantKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for VariantKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        VariantKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .or(match norm.as_str() {
                "leapfrog" | "hamiltonian" => Some(VariantKind::CoupledLeapfrog),
                "euler" => Some(VariantKind::CoupledEuler),
                "mlp" => Some(VariantKind::MlpOnly),
                "differential" => Some(VariantKind::Diff),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown attention variant `{s}`")))
    }
}

/// Integration scheme for coupled query/key dynamics.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Integrator {
    /// Kick-drift-kick; composition of shear maps.
    Leapfrog,
    /// Both updates read time-t values.
    Euler,
}

impl Integrator {
    pub fn name(self) -> &'static str {
        match self {
            Integrator::Leapfrog => "leapfrog",
            Integrator::Euler => "euler",
        }
    }

    /// Whether the step map is claimed to be volume preserving.
    pub fn is_symplectic(self) -> bool {
        matches!(self, Integrator::Leapfrog)
    }

    /// Coupling-network evaluations per step.
    pub fn force_evaluations(self) -> usize {
        match self {
            Integrator::Leapfrog => 2,
            Integrator::Euler => 1,
        }
    }
}

/// Attention mechanism selection plus its hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttentionVariant {
    pub kind: VariantKind,
    /// Integration steps (coupled kinds only).
    #[serde(default = "default_steps")]
    pub n_steps: usize,
    /// Query heads per key/value head (GQA only).
    #[serde(default = "default_group")]
    pub gqa_group: usize,
    /// Initial step size; the learnable log step is initialized to `ln(dt_init)`.
    #[serde(default = "default_dt")]
    pub dt_init: f64,
}

fn default_steps() -> usize {
    DEFAULT_STEPS
}

fn default_group() -> usize {
    DEFAULT_GQA_GROUP
}

fn default_dt() -> f64 {
    DEFAULT_DT
}

impl AttentionVariant {
    pub fn new(kind: VariantKind) -> Self {
        AttentionVariant { kind, n_steps: DEFAULT_STEPS, gqa_group: DEFAULT_GQA_GROUP, dt_init: DEFAULT_DT }
    }

    pub fn standard() -> Self {
        Self::new(VariantKind::Standard)
    }

    pub fn coupled(integrator: Integrator, n_steps: usize) -> Self {
        let kind = match integrator {
            Integrator::Leapfrog => VariantKind::CoupledLeapfrog,
            Integrator::Euler => VariantKind::CoupledEuler,
        };
        AttentionVariant { n_steps, ..Self::new(kind) }
    }

    pub fn gqa(group: usize) -> Self {
        AttentionVariant { gqa_group: group, ..Self::new(VariantKind::Gqa) }
    }

    pub fn with_steps(mut self, n_steps: usize) -> Self {
        self.n_steps = n_steps;
        self
    }

    pub fn is_coupled(&self) -> bool {
        self.kind.integrator().is_some()
    }

    /// Number of key/value heads for `n_heads` query heads.
    pub fn kv_heads(&self, n_heads: usize) -> usize {
        match self.kind {
            VariantKind::Gqa => n_heads / self.gqa_group.max(1),
            _ => n_heads,
        }
    }

    pub fn validate(&self, n_heads: usize, d_k: usize) -> Result<()> {
        if self.is_coupled() && self.n_steps > MAX_STEPS {
            return Err(Error::Config(format!("n_steps {} outside 0..={MAX_STEPS}", self.n_steps)));
        }
        if self.is_coupled() && !(self.dt_init > 0.0 && self.dt_init.is_finite()) {
            return Err(Error::Config(format!("dt_init must be positive, got {}", self.dt_init)));
        }
        match self.kind {
            VariantKind::Gqa if self.gqa_group == 0 || !n_heads.is_multiple_of(self.gqa_group) => Err(Error::Config(
                format!("gqa: {n_heads} query heads not divisible by group size {}", self.gqa_group),
            )),
            VariantKind::Diff if !d_k.is_multiple_of(2) => {
                Err(Error::Config(format!("diff attention needs an even head width, got {d_k}")))
            }
            _ => Ok(()),
        }
    }

    /// Short label used in ablation summaries.
    pub fn label(&self) -> String {
        match self.kind {
            k if self.is_coupled() => format!("{k}(n={})", self.n_steps),
            VariantKind::Gqa => format!("gqa(group={})", self.gqa_group),
            k => k.to_string(),
        }
    }
}

/// `0.8 − 0.6·exp(−0.3·layer)`: initial differential-attention weight.
pub fn lambda_init(layer: usize) -> f64 {
    0.8 - 0.6 * (-0.3 * layer as f64).exp()
}
