//! LU determinants and singular values for small dense matrices.

use super::Tensor;
use crate::error::{Error, Result};

/// Largest matrix extent accepted by [`singular_values`].
pub const MAX_SVD_DIM: usize = 512;

/// `P·A = L·U` with partial pivoting, packed in one matrix.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    swaps: usize,
}

fn square(a: &Tensor) -> Result<usize> {
    match a.shape() {
        [r, c] if r == c => Ok(*r),
        s => Err(Error::Shape(format!("expected a square matrix, got {s:?}"))),
    }
}

impl Lu {
    pub fn decompose(a: &Tensor) -> Result<Self> {
        let n = square(a)?;
        let mut lu = a.data().to_vec();
        let mut swaps = 0;
        for k in 0..n {
            let (p, pmax) = (k..n)
                .map(|i| (i, lu[i * n + k].abs()))
                .fold((k, -1.0), |best, cur| if cur.1 > best.1 { cur } else { best });
            if pmax == 0.0 {
                return Err(Error::Singular);
            }
            if p != k {
                for j in 0..n {
                    lu.swap(k * n + j, p * n + j);
                }
                swaps += 1;
            }
            let pivot = lu[k * n + k];
            for i in k + 1..n {
                let f = lu[i * n + k] / pivot;
                lu[i * n + k] = f;
                for j in k + 1..n {
                    lu[i * n + j] -= f * lu[k * n + j];
                }
            }
        }
        Ok(Lu { n, lu, swaps })
    }

    /// `(sign, ln|det|)` accumulated over the pivots.
    pub fn log_det(&self) -> (f64, f64) {
        let mut sign = if self.swaps.is_multiple_of(2) { 1.0 } else { -1.0 };
        let mut log = 0.0;
        for k in 0..self.n {
            let u = self.lu[k * self.n + k];
            if u < 0.0 {
                sign = -sign;
            }
            log += u.abs().ln();
        }
        (sign, log)
    }

    pub fn det(&self) -> f64 {
        let (sign, log) = self.log_det();
        sign * log.exp()
    }
}

pub fn determinant(a: &Tensor) -> Result<f64> {
    Ok(Lu::decompose(a)?.det())
}

/// Singular values (descending) by one-sided Jacobi rotations.
pub fn singular_values(a: &Tensor) -> Result<Vec<f64>> {
    let (r, c) = match a.shape() {
        [r, c] => (*r, *c),
        s => return Err(Error::Shape(format!("expected a matrix, got {s:?}"))),
    };
    if r > MAX_SVD_DIM || c > MAX_SVD_DIM {
        return Err(Error::Shape(format!("matrix {r}x{c} exceeds {MAX_SVD_DIM}")));
    }
    // Work on whichever orientation has fewer columns; store columns contiguously.
    let (m, n, cols): (usize, usize, Vec<Vec<f64>>) = if c <= r {
        (r, c, (0..c).map(|j| (0..r).map(|i| a.data()[i * c + j]).collect()).collect())
    } else {
        (c, r, (0..r).map(|i| a.row(i).to_vec()).collect())
    };
    let mut cols = cols;
    let tol = 1e-15;
    for _sweep in 0..100 {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let (alpha, beta, gamma) = {
                    let (u, v) = (&cols[p], &cols[q]);
                    let mut al = 0.0;
                    let mut be = 0.0;
                    let mut ga = 0.0;
                    for i in 0..m {
                        al += u[i] * u[i];
                        be += v[i] * v[i];
                        ga += u[i] * v[i];
                    }
                    (al, be, ga)
                };
                if gamma == 0.0 || gamma.abs() <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let cs = 1.0 / (1.0 + t * t).sqrt();
                let sn = cs * t;
                let (left, right) = cols.split_at_mut(q);
                let (u, v) = (&mut left[p], &mut right[0]);
                for i in 0..m {
                    let (x, y) = (u[i], v[i]);
                    u[i] = cs * x - sn * y;
                    v[i] = sn * x + cs * y;
                }
            }
        }
        if !rotated {
            break;
        }
    }
    let mut sv: Vec<f64> = cols.iter().map(|col| col.iter().map(|x| x * x).sum::<f64>().sqrt()).collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    Ok(sv)
}
