//! Attention mechanisms behind one interface: per-head `Q`, `K`, `V` plus a
//! causal mask in, outputs and attention weights out.

mod dynamics;
mod scoring;
mod variant;

pub use dynamics::{
    euler_step, evolve_qk, leapfrog_step, mlp_only_transform, step, step_size, tau_init, CouplingNetwork, Force,
    LinearForce,
};
pub use scoring::{diff_attention, gqa_attention, sdpa, Scored};
pub use variant::{
    lambda_init, AttentionVariant, Integrator, VariantKind, DEFAULT_DT, DEFAULT_GQA_GROUP, DEFAULT_STEPS, MAX_STEPS,
};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Mask, Var};

/// Variant-specific parameters already recorded on the graph.
#[derive(Clone, Copy, Debug)]
pub enum VariantParams {
    None,
    Coupled { net: CouplingNetwork, tau: Var },
    MlpOnly { net: CouplingNetwork },
    Diff { lambda: Var },
}

/// Rotary embedding applied to the (possibly evolved) queries and keys.
#[derive(Clone, Copy, Debug)]
pub struct RopeSpec<'a> {
    pub positions: &'a [f64],
    pub base: f64,
}

/// Run one attention variant on projected heads.
///
/// `q` is `[batch, heads, seq, d_k]`; `k` and `v` carry `variant.kv_heads`
/// heads. Dynamics or the query MLP act first, RoPE (if any) next, scoring
/// last.
pub fn attend(
    g: &mut Graph,
    variant: &AttentionVariant,
    params: &VariantParams,
    q: Var,
    k: Var,
    v: Var,
    mask: &Mask,
    rope: Option<RopeSpec<'_>>,
) -> Result<Scored> {
    let (q, k) = match (variant.kind, params) {
        (VariantKind::CoupledLeapfrog | VariantKind::CoupledEuler, VariantParams::Coupled { net, tau }) => {
            if variant.n_steps == 0 {
                (q, k)
            } else {
                let dt = step_size(g, *tau)?;
                let integrator = variant.kind.integrator().expect("coupled kind");
                evolve_qk(g, q, k, integrator, variant.n_steps, dt, net)?
            }
        }
        (VariantKind::MlpOnly, VariantParams::MlpOnly { net }) => (mlp_only_transform(g, q, net)?, k),
        (VariantKind::Standard | VariantKind::Gqa, VariantParams::None)
        | (VariantKind::Diff, VariantParams::Diff { .. }) => (q, k),
        (kind, p) => {
            return Err(Error::InvalidArgument(format!("parameters {p:?} do not match variant {kind}")));
        }
    };
    let (q, k) = match rope {
        Some(r) => (g.rope(q, r.positions, r.base)?, g.rope(k, r.positions, r.base)?),
        None => (q, k),
    };
    match (variant.kind, params) {
        (VariantKind::Gqa, _) => gqa_attention(g, q, k, v, mask),
        (VariantKind::Diff, VariantParams::Diff { lambda }) => diff_attention(g, q, k, v, mask, *lambda),
        _ => sdpa(g, q, k, v, mask),
    }
}

#[cfg(test)]
mod tests;
