use crate::error::{Error, Result};
use crate::numerics::linalg::singular_values;
use crate::numerics::Tensor;

/// Tolerance on a row's total mass before it counts as a distribution.
pub const ROW_SUM_TOL: f64 = 1e-6;

/// Shannon entropy in nats with `0·ln 0 = 0`.
pub fn entropy(p: &[f64]) -> Result<f64> {
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > ROW_SUM_TOL || p.iter().any(|&a| a < 0.0) {
        return Err(Error::InvalidArgument(format!("row is not a distribution (sums to {total})")));
    }
    Ok(p.iter().filter(|&&a| a > 0.0).map(|&a| -a * a.ln()).sum())
}

/// Entropy of row `row` of a square `[L, L]` attention matrix.
pub fn attention_entropy(a: &Tensor, row: usize) -> Result<f64> {
    match a.shape() {
        [r, _] if row < *r => entropy(a.row(row)),
        s => Err(Error::Shape(format!("row {row} of attention matrix {s:?}"))),
    }
}

/// Mean row entropy over batch, heads and rows of `[batch, heads, L, L]`
/// weights.
pub fn layer_mean_entropy(weights: &Tensor) -> Result<f64> {
    let s = weights.shape();
    if s.len() != 4 || s[2] == 0 || s[3] == 0 {
        return Err(Error::Shape(format!("attention weights must be [batch, heads, L, L], got {s:?}")));
    }
    let rows = weights.data().chunks(s[3]);
    let n = rows.len();
    let mut total = 0.0;
    for r in rows {
        total += entropy(r)?;
    }
    Ok(total / n as f64)
}

/// `(Σσ)² / Σσ²` of the singular spectrum.
pub fn effective_rank(a: &Tensor) -> Result<f64> {
    let sv = singular_values(a)?;
    let s1: f64 = sv.iter().sum();
    let s2: f64 = sv.iter().map(|s| s * s).sum();
    if s2 == 0.0 {
        return Err(Error::InvalidArgument("effective rank of an all-zero matrix".into()));
    }
    Ok(s1 * s1 / s2)
}

/// Mean effective rank over every `[L, L]` slice of `[batch, heads, L, L]`.
pub fn layer_mean_effective_rank(weights: &Tensor) -> Result<f64> {
    let s = weights.shape();
    if s.len() != 4 {
        return Err(Error::Shape(format!("attention weights must be [batch, heads, L, L], got {s:?}")));
    }
    let (r, c) = (s[2], s[3]);
    let mats = weights.data().chunks(r * c);
    let n = mats.len();
    let mut total = 0.0;
    for m in mats {
        total += effective_rank(&Tensor::new(&[r, c], m.to_vec())?)?;
    }
    Ok(total / n as f64)
}
