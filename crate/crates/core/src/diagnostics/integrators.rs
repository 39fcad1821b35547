use serde::{Deserialize, Serialize};

use crate::attention::{step, CouplingNetwork, Force, Integrator, LinearForce};
use crate::error::{Error, Result};
use crate::numerics::check::{jacobian_of, JacobianMethod};
use crate::numerics::linalg::Lu;
use crate::numerics::{Graph, Rng, Tensor, Var};

/// Largest phase-space dimension `2·d_k` handled by [`symplecticity_check`].
pub const MAX_PHASE_DIM: usize = 64;

/// A force field given by concrete values, for single-vector analyses.
#[derive(Clone, Debug, PartialEq)]
pub enum ForceField {
    /// `f(q) = c·q`.
    Linear(f64),
    /// `f(q) = W2·SiLU(W1·q)` with `[d_k, d_k]` weights.
    Coupling { w1: Tensor, w2: Tensor },
}

impl ForceField {
    /// Random coupling weights with entries `normal(0, std)`.
    pub fn random_coupling(d_k: usize, std: f64, rng: &mut Rng) -> Result<Self> {
        Ok(ForceField::Coupling { w1: rng.normal(&[d_k, d_k], 0.0, std)?, w2: rng.normal(&[d_k, d_k], 0.0, std)? })
    }

    fn record(&self, g: &mut Graph) -> Result<Box<dyn Force>> {
        Ok(match self {
            ForceField::Linear(c) => Box::new(LinearForce(*c)),
            ForceField::Coupling { w1, w2 } => {
                let (a, b) = (g.constant(w1.clone())?, g.constant(w2.clone())?);
                Box::new(CouplingNetwork::new(g, a, b)?)
            }
        })
    }
}

/// `[a; b]` for two equal-length vectors, built from differentiable ops.
fn concat(g: &mut Graph, a: Var, b: Var, d: usize) -> Result<Var> {
    let mut left = Tensor::zeros(&[d, 2 * d]);
    let mut right = Tensor::zeros(&[d, 2 * d]);
    for i in 0..d {
        left.set(&[i, i], 1.0);
        right.set(&[i, d + i], 1.0);
    }
    let (l, r) = (g.constant(left)?, g.constant(right)?);
    let a = g.reshape(a, &[1, d])?;
    let b = g.reshape(b, &[1, d])?;
    let a = g.matmul(a, l, false, false)?;
    let b = g.matmul(b, r, false, false)?;
    let y = g.add(a, b)?;
    g.reshape(y, &[2 * d])
}

/// One integrator step as a map on the stacked phase vector `[q; k]`.
pub fn step_map(
    integrator: Integrator,
    force: &ForceField,
    dt: f64,
    d_k: usize,
) -> impl Fn(&mut Graph, Var) -> Result<Var> + '_ {
    move |g: &mut Graph, x: Var| {
        if g.shape(x) != [2 * d_k] {
            return Err(Error::Shape(format!("phase vector {:?} for d_k = {d_k}", g.shape(x))));
        }
        let q = g.slice_last(x, 0, d_k)?;
        let k = g.slice_last(x, d_k, d_k)?;
        let q = g.reshape(q, &[1, 1, 1, d_k])?;
        let k = g.reshape(k, &[1, 1, 1, d_k])?;
        let f = force.record(g)?;
        let dtv = g.constant(Tensor::from_vec(vec![dt]))?;
        let (q1, k1) = step(integrator, g, q, k, dtv, f.as_ref())?;
        concat(g, q1, k1, d_k)
    }
}

/// Jacobian of one step at the phase point `[q; k]`.
pub fn step_jacobian(integrator: Integrator, force: &ForceField, dt: f64, q: &[f64], k: &[f64]) -> Result<Tensor> {
    if q.len() != k.len() || q.is_empty() {
        return Err(Error::Shape(format!("q has {} entries, k has {}", q.len(), k.len())));
    }
    let x = Tensor::from_vec(q.iter().chain(k).copied().collect());
    jacobian_of(step_map(integrator, force, dt, q.len()), &x, JacobianMethod::Autodiff)
}

/// Determinant of the one-step Jacobian at `[q; k]`, via LU log-determinant.
pub fn step_determinant(integrator: Integrator, force: &ForceField, dt: f64, q: &[f64], k: &[f64]) -> Result<f64> {
    Ok(Lu::decompose(&step_jacobian(integrator, force, dt, q, k)?)?.det())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeterminantStats {
    pub integrator: Integrator,
    pub dt: f64,
    pub d_k: usize,
    pub samples: Vec<f64>,
    /// `max |det − 1|` over the samples.
    pub max_deviation: f64,
}

/// Determinants of one step at `n_samples` random standard-normal phase
/// points.
pub fn symplecticity_check(
    integrator: Integrator,
    force: &ForceField,
    dt: f64,
    d_k: usize,
    n_samples: usize,
    rng: &mut Rng,
) -> Result<DeterminantStats> {
    if d_k == 0 || 2 * d_k > MAX_PHASE_DIM {
        return Err(Error::InvalidArgument(format!("phase dimension 2·{d_k} outside 1..={MAX_PHASE_DIM}")));
    }
    if let ForceField::Coupling { w1, .. } = force {
        if w1.shape() != [d_k, d_k] {
            return Err(Error::Shape(format!("coupling weights {:?} for d_k = {d_k}", w1.shape())));
        }
    }
    let mut samples = Vec::with_capacity(n_samples);
    for _ in 0..n_samples {
        let q = rng.normal(&[d_k], 0.0, 1.0)?;
        let k = rng.normal(&[d_k], 0.0, 1.0)?;
        samples.push(step_determinant(integrator, force, dt, q.data(), k.data())?);
    }
    let max_deviation = samples.iter().map(|d| (d - 1.0).abs()).fold(0.0, f64::max);
    Ok(DeterminantStats { integrator, dt, d_k, samples, max_deviation })
}

/// `H = ½(‖q‖² + ‖k‖²)` after each of `n_steps` steps under `f(q) = −q`;
/// entry 0 is the initial energy.
pub fn energy_trace(integrator: Integrator, dt: f64, n_steps: usize, q0: &[f64], k0: &[f64]) -> Result<Vec<f64>> {
    if q0.len() != k0.len() || q0.is_empty() {
        return Err(Error::Shape(format!("q has {} entries, k has {}", q0.len(), k0.len())));
    }
    let d = q0.len();
    let energy = |q: &Tensor, k: &Tensor| 0.5 * (q.sq_norm() + k.sq_norm());
    let mut q = Tensor::new(&[1, 1, 1, d], q0.to_vec())?;
    let mut k = Tensor::new(&[1, 1, 1, d], k0.to_vec())?;
    let mut out = Vec::with_capacity(n_steps + 1);
    out.push(energy(&q, &k));
    let force = LinearForce(-1.0);
    for _ in 0..n_steps {
        let mut g = Graph::new();
        let (qv, kv) = (g.constant(q)?, g.constant(k)?);
        let dtv = g.constant(Tensor::from_vec(vec![dt]))?;
        let (q1, k1) = step(integrator, &mut g, qv, kv, dtv, &force)?;
        q = g.value(q1).clone();
        k = g.value(k1).clone();
        out.push(energy(&q, &k));
    }
    Ok(out)
}
