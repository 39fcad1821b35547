//! Coupled query/key integrators.
//!
//! Queries play the role of positions and keys of momenta: `q` drifts along
//! `k` while `k` is kicked by a force `f(q)`. Step sizes are per head and
//! broadcast over the head width.

use super::variant::Integrator;
use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// A force field `f(q)` applied independently at every position.
pub trait Force {
    fn apply(&self, g: &mut Graph, q: Var) -> Result<Var>;
}

/// `f(q) = W2 · SiLU(W1 · q)`, bias-free, `d_k → d_k → d_k`, shared across
/// heads.
#[derive(Clone, Copy, Debug)]
pub struct CouplingNetwork {
    pub w1: Var,
    pub w2: Var,
}

impl CouplingNetwork {
    pub fn new(g: &Graph, w1: Var, w2: Var) -> Result<Self> {
        let (s1, s2) = (g.shape(w1), g.shape(w2));
        if s1.len() != 2 || s1[0] != s1[1] || s1 != s2 {
            return Err(Error::Shape(format!("coupling weights must be equal square matrices, got {s1:?} and {s2:?}")));
        }
        Ok(CouplingNetwork { w1, w2 })
    }

    /// Parameter count for head width `d_k`.
    pub fn param_count(d_k: usize) -> usize {
        2 * d_k * d_k
    }
}

impl Force for CouplingNetwork {
    fn apply(&self, g: &mut Graph, q: Var) -> Result<Var> {
        let shape = g.shape(q).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape("coupling input is a scalar".into()))?;
        let rows = g.value(q).len() / d.max(1);
        let flat = g.reshape(q, &[rows, d])?;
        let h = g.matmul(flat, self.w1, false, true)?;
        let h = g.silu(h)?;
        let out = g.matmul(h, self.w2, false, true)?;
        g.reshape(out, &shape)
    }
}

/// `f(q) = c·q`; `c = −1` is the harmonic oscillator.
#[derive(Clone, Copy, Debug)]
pub struct LinearForce(pub f64);

impl Force for LinearForce {
    fn apply(&self, g: &mut Graph, q: Var) -> Result<Var> {
        g.scale(q, self.0)
    }
}

fn check_pair(g: &Graph, q: Var, k: Var, dt: Var) -> Result<()> {
    let (sq, sk, sd) = (g.shape(q), g.shape(k), g.shape(dt));
    if sq != sk {
        return Err(Error::Shape(format!("q {sq:?} and k {sk:?} differ")));
    }
    if sq.len() < 2 || sd != [sq[1]] {
        return Err(Error::Shape(format!("step size {sd:?} does not match heads of {sq:?}")));
    }
    Ok(())
}

/// `q' = q + dt·k`, `k' = k + dt·f(q)` with `f` at the old `q`.
pub fn euler_step(g: &mut Graph, q: Var, k: Var, dt: Var, force: &dyn Force) -> Result<(Var, Var)> {
    check_pair(g, q, k, dt)?;
    let fq = force.apply(g, q)?;
    let drift = g.head_scale(k, dt)?;
    let kick = g.head_scale(fq, dt)?;
    let q1 = g.add(q, drift)?;
    let k1 = g.add(k, kick)?;
    Ok((q1, k1))
}

/// Half kick, full drift, half kick.
pub fn leapfrog_step(g: &mut Graph, q: Var, k: Var, dt: Var, force: &dyn Force) -> Result<(Var, Var)> {
    check_pair(g, q, k, dt)?;
    let half = g.scale(dt, 0.5)?;
    let f0 = force.apply(g, q)?;
    let kick = g.head_scale(f0, half)?;
    let k_half = g.add(k, kick)?;
    let drift = g.head_scale(k_half, dt)?;
    let q1 = g.add(q, drift)?;
    let f1 = force.apply(g, q1)?;
    let kick = g.head_scale(f1, half)?;
    let k1 = g.add(k_half, kick)?;
    Ok((q1, k1))
}

pub fn step(
    integrator: Integrator,
    g: &mut Graph,
    q: Var,
    k: Var,
    dt: Var,
    force: &dyn Force,
) -> Result<(Var, Var)> {
    match integrator {
        Integrator::Leapfrog => leapfrog_step(g, q, k, dt, force),
        Integrator::Euler => euler_step(g, q, k, dt, force),
    }
}

/// Apply `n_steps` integrator steps; zero steps returns the inputs untouched.
pub fn evolve_qk(
    g: &mut Graph,
    q: Var,
    k: Var,
    integrator: Integrator,
    n_steps: usize,
    dt: Var,
    force: &dyn Force,
) -> Result<(Var, Var)> {
    let (mut q, mut k) = (q, k);
    for _ in 0..n_steps {
        (q, k) = step(integrator, g, q, k, dt, force)?;
    }
    Ok((q, k))
}

/// Per-head step sizes `exp(tau)`.
pub fn step_size(g: &mut Graph, tau: Var) -> Result<Var> {
    g.exp(tau)
}

/// Initial log step for a requested step size.
pub fn tau_init(n_heads: usize, dt: f64) -> Tensor {
    Tensor::full(&[n_heads], dt.ln())
}

/// `Q' = Q + f(Q)`; keys are left alone.
pub fn mlp_only_transform(g: &mut Graph, q: Var, force: &dyn Force) -> Result<Var> {
    let fq = force.apply(g, q)?;
    g.add(q, fq)
}
