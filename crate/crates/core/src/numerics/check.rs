//! Finite-difference oracles and Jacobians.

use super::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Largest map dimension accepted by the Jacobian builders.
pub const MAX_JACOBIAN_DIM: usize = 128;

/// Central-difference gradient `(f(x+h·eᵢ) − f(x−h·eᵢ)) / 2h`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite { op: "finite_diff_grad" });
        }
        grad.data_mut()[i] = (plus - minus) / (2.0 * h);
    }
    Ok(grad)
}

/// Fourth-order central difference
/// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`; truncation error is
/// `O(h⁴)`, so `h` can be large enough to keep rounding noise small.
pub fn finite_diff_grad4<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        let mut at = |offset: f64| {
            probe.data_mut()[i] = orig + offset;
            f(&probe)
        };
        let (p1, m1, p2, m2) = (at(h)?, at(-h)?, at(2.0 * h)?, at(-2.0 * h)?);
        probe.data_mut()[i] = orig;
        if ![p1, m1, p2, m2].iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite { op: "finite_diff_grad4" });
        }
        grad.data_mut()[i] = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    }
    Ok(grad)
}

/// Relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Worst elementwise [`relative_error`] between two same-shape tensors.
pub fn max_relative_error(a: &Tensor, b: &Tensor, floor: f64) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y, floor))
        .fold(0.0, f64::max)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum JacobianMethod {
    /// One reverse pass per output component.
    Autodiff,
    /// Central differences with step `h`, one column per input component.
    FiniteDiff { h: f64 },
}

fn check_vector(x: &Tensor) -> Result<usize> {
    if x.ndim() != 1 {
        return Err(Error::Shape(format!("jacobian input must be a vector, got {:?}", x.shape())));
    }
    if x.len() > MAX_JACOBIAN_DIM {
        return Err(Error::Shape(format!("jacobian input dimension {} > {MAX_JACOBIAN_DIM}", x.len())));
    }
    Ok(x.len())
}

fn eval_map<F>(map: &F, x: &Tensor) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let mut g = Graph::new();
    let xv = g.constant(x.clone())?;
    let y = map(&mut g, xv)?;
    let out = g.value(y).clone();
    if out.ndim() != 1 || out.len() > MAX_JACOBIAN_DIM {
        return Err(Error::Shape(format!("jacobian map output must be a small vector, got {:?}", out.shape())));
    }
    Ok(out)
}

/// `J[i][j] = ∂map(x)ᵢ/∂xⱼ` for a vector map recorded on a graph.
pub fn jacobian_of<F>(map: F, x: &Tensor, method: JacobianMethod) -> Result<Tensor>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let n = check_vector(x)?;
    let y0 = eval_map(&map, x)?;
    let m = y0.len();
    let mut jac = Tensor::zeros(&[m, n]);
    match method {
        JacobianMethod::Autodiff => {
            for i in 0..m {
                let mut g = Graph::new();
                let xv = g.param(x.clone())?;
                let y = map(&mut g, xv)?;
                if g.shape(y) != [m] {
                    return Err(Error::Shape("jacobian map output changed shape".into()));
                }
                let mut sel = Tensor::zeros(&[m]);
                sel.data_mut()[i] = 1.0;
                let sel = g.constant(sel)?;
                let yi = g.mul(y, sel)?;
                let yi = g.sum(yi)?;
                g.backward(yi)?;
                let row = g.grad(xv).cloned().unwrap_or_else(|| Tensor::zeros(&[n]));
                jac.data_mut()[i * n..(i + 1) * n].copy_from_slice(row.data());
            }
        }
        JacobianMethod::FiniteDiff { h } => {
            let mut probe = x.clone();
            for j in 0..n {
                let orig = probe.data()[j];
                probe.data_mut()[j] = orig + h;
                let plus = eval_map(&map, &probe)?;
                probe.data_mut()[j] = orig - h;
                let minus = eval_map(&map, &probe)?;
                probe.data_mut()[j] = orig;
                if plus.len() != m || minus.len() != m {
                    return Err(Error::Shape("jacobian map output changed shape".into()));
                }
                for i in 0..m {
                    jac.data_mut()[i * n + j] = (plus.data()[i] - minus.data()[i]) / (2.0 * h);
                }
            }
        }
    }
    Ok(jac)
}

/// Both Jacobian routes and their largest absolute disagreement.
#[derive(Clone, Debug)]
pub struct JacobianCrossCheck {
    pub autodiff: Tensor,
    pub finite_diff: Tensor,
    pub max_abs_diff: f64,
}

pub fn cross_check_jacobian<F>(map: F, x: &Tensor, h: f64) -> Result<JacobianCrossCheck>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    let autodiff = jacobian_of(&map, x, JacobianMethod::Autodiff)?;
    let finite_diff = jacobian_of(&map, x, JacobianMethod::FiniteDiff { h })?;
    let max_abs_diff = autodiff.max_abs_diff(&finite_diff);
    Ok(JacobianCrossCheck { autodiff, finite_diff, max_abs_diff })
}
