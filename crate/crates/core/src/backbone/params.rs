use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, Positional, INIT_STD};
use crate::attention::{lambda_init, VariantKind};
use crate::error::{Error, Result};
use crate::numerics::{Rng, Tensor};

/// How a parameter is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum Init {
    Normal { std: f64 },
    Ones,
    /// Every entry set to the given value.
    Fill(f64),
}

/// Which ledger component a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    TokenEmbedding,
    PositionEmbedding,
    AttentionProjections,
    Ffn,
    Norms,
    CouplingNetwork,
    StepSize,
    DiffLambda,
}

impl Component {
    pub fn name(self) -> &'static str {
        match self {
            Component::TokenEmbedding => "token_embedding",
            Component::PositionEmbedding => "position_embedding",
            Component::AttentionProjections => "attention_projections",
            Component::Ffn => "ffn",
            Component::Norms => "norms",
            Component::CouplingNetwork => "coupling_network",
            Component::StepSize => "step_size",
            Component::DiffLambda => "diff_lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
    pub component: Component,
    /// Subject to decoupled weight decay.
    pub decay: bool,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Positions of one layer's parameters in the flat layout.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerSlots {
    pub attn_norm: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub coupling: Option<(usize, usize)>,
    pub tau: Option<usize>,
    pub lambda: Option<usize>,
    pub ffn_norm: usize,
    pub w_gate: usize,
    pub w_up: usize,
    pub w_down: usize,
}

/// Ordered parameter list for a config.
///
/// Order: `embed.tok`, `embed.pos` (learned positions only), then per layer
/// `attn_norm.gain`, `attn.{wq,wk,wv,wo}`, variant parameters
/// (`attn.coupling.{w1,w2}`, `attn.tau`, `attn.lambda`), `ffn_norm.gain`,
/// `ffn.{w_gate,w_up,w_down}`, and finally `final_norm.gain`.
///
/// Projections are stored `[in, out]`; coupling weights `[out, in]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamLayout {
    pub specs: Vec<ParamSpec>,
    pub tok_embed: usize,
    pub pos_embed: Option<usize>,
    pub layers: Vec<LayerSlots>,
    pub final_norm: usize,
}

impl ParamLayout {
    pub fn new(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let dk = config.d_k();
        let kv = config.kv_heads() * dk;
        let resid_std = INIT_STD / (2.0 * config.n_layers as f64).sqrt();
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init, component: Component, decay: bool| {
            specs.push(ParamSpec { name, shape, init, component, decay });
            specs.len() - 1
        };
        let normal = Init::Normal { std: INIT_STD };

        let tok_embed =
            push("embed.tok".into(), vec![config.vocab_size, d], normal.clone(), Component::TokenEmbedding, false);
        let pos_embed = (config.positional == Positional::Learned).then(|| {
            push("embed.pos".into(), vec![config.max_seq_len, d], normal.clone(), Component::PositionEmbedding, false)
        });
        let mut layers = Vec::with_capacity(config.n_layers);
        for l in 0..config.n_layers {
            let p = |s: &str| format!("layers.{l}.{s}");
            let attn_norm = push(p("attn_norm.gain"), vec![d], Init::Ones, Component::Norms, false);
            let wq = push(p("attn.wq"), vec![d, d], normal.clone(), Component::AttentionProjections, true);
            let wk = push(p("attn.wk"), vec![d, kv], normal.clone(), Component::AttentionProjections, true);
            let wv = push(p("attn.wv"), vec![d, kv], normal.clone(), Component::AttentionProjections, true);
            let wo = push(p("attn.wo"), vec![d, d], Init::Normal { std: resid_std }, Component::AttentionProjections, true);
            let (mut coupling, mut tau, mut lambda) = (None, None, None);
            match config.variant.kind {
                VariantKind::CoupledLeapfrog | VariantKind::CoupledEuler | VariantKind::MlpOnly => {
                    let w1 = push(p("attn.coupling.w1"), vec![dk, dk], normal.clone(), Component::CouplingNetwork, true);
                    let w2 = push(p("attn.coupling.w2"), vec![dk, dk], normal.clone(), Component::CouplingNetwork, true);
                    coupling = Some((w1, w2));
                    if config.variant.is_coupled() {
                        let init = Init::Fill(config.variant.dt_init.ln());
                        tau = Some(push(p("attn.tau"), vec![config.n_heads], init, Component::StepSize, false));
                    }
                }
                VariantKind::Diff => {
                    let init = Init::Fill(lambda_init(l));
                    lambda = Some(push(p("attn.lambda"), vec![config.n_heads], init, Component::DiffLambda, false));
                }
                VariantKind::Standard | VariantKind::Gqa => {}
            }
            let ffn_norm = push(p("ffn_norm.gain"), vec![d], Init::Ones, Component::Norms, false);
            let w_gate = push(p("ffn.w_gate"), vec![d, config.d_ff], normal.clone(), Component::Ffn, true);
            let w_up = push(p("ffn.w_up"), vec![d, config.d_ff], normal.clone(), Component::Ffn, true);
            let w_down = push(p("ffn.w_down"), vec![config.d_ff, d], Init::Normal { std: resid_std }, Component::Ffn, true);
            layers.push(LayerSlots { attn_norm, wq, wk, wv, wo, coupling, tau, lambda, ffn_norm, w_gate, w_up, w_down });
        }
        let final_norm = push("final_norm.gain".into(), vec![d], Init::Ones, Component::Norms, false);
        ParamLayout { specs, tok_embed, pos_embed, layers, final_norm }
    }

    pub fn len(&self) -> usize {
        self.specs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.specs.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.specs.iter().position(|s| s.name == name)
    }

    /// Draw initial values. Each parameter uses its own stream keyed by its
    /// name, so values do not depend on which other parameters exist.
    pub fn init(&self, seed: u64) -> Result<Vec<Tensor>> {
        let root = Rng::new(seed).derive("init");
        self.specs
            .iter()
            .map(|s| match s.init {
                Init::Normal { std } => root.derive(&s.name).normal(&s.shape, 0.0, std),
                Init::Ones => Ok(Tensor::ones(&s.shape)),
                Init::Fill(v) => Ok(Tensor::full(&s.shape, v)),
            })
            .collect()
    }

    /// Check that `tensors` match this layout in count and shapes.
    pub fn check(&self, tensors: &[Tensor]) -> Result<()> {
        if tensors.len() != self.specs.len() {
            return Err(Error::Shape(format!("expected {} parameters, got {}", self.specs.len(), tensors.len())));
        }
        for (s, t) in self.specs.iter().zip(tensors) {
            if t.shape() != s.shape.as_slice() {
                return Err(Error::Shape(format!("{}: expected {:?}, got {:?}", s.name, s.shape, t.shape())));
            }
        }
        Ok(())
    }
}

/// Exact parameter counts per component.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLedger {
    pub components: BTreeMap<String, usize>,
    pub total: usize,
    /// Parameters that have no counterpart in the standard variant.
    pub variant_specific: usize,
    /// `total − total(standard variant of the same config)`.
    pub delta_vs_standard: i64,
}

fn tally(layout: &ParamLayout) -> (BTreeMap<String, usize>, usize) {
    let mut components = BTreeMap::new();
    for s in &layout.specs {
        *components.entry(s.component.name().to_string()).or_insert(0) += s.len();
    }
    let total = components.values().sum();
    (components, total)
}

/// Count parameters without allocating any of them.
pub fn count_params(config: &ModelConfig) -> ParamLedger {
    let layout = ParamLayout::new(config);
    let (components, total) = tally(&layout);
    let standard = ParamLayout::new(&config.clone().with_variant(crate::attention::AttentionVariant::standard()));
    let (_, standard_total) = tally(&standard);
    let variant_specific = layout
        .specs
        .iter()
        .filter(|s| standard.index_of(&s.name).is_none())
        .map(ParamSpec::len)
        .sum();
    ParamLedger { components, total, variant_specific, delta_vs_standard: total as i64 - standard_total as i64 }
}
