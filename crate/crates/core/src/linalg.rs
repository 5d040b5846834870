//! Dense linear-algebra helpers shared by the field sampler and the GP.

use nalgebra::{DMatrix, DVector};

use crate::error::{numeric, Result};

/// Lower Cholesky factor together with the diagonal jitter that made it work.
#[derive(Debug, Clone)]
pub struct Factor {
    pub l: DMatrix<f64>,
    pub jitter: f64,
}

impl Factor {
    /// Solves `A x = b` for the factored `A = L Lᵀ`.
    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let y = self
            .l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal");
        self.l
            .tr_solve_lower_triangular(&y)
            .expect("cholesky factor has a positive diagonal")
    }

    /// `L⁻¹ B`
    pub fn half_solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.l
            .solve_lower_triangular(b)
            .expect("cholesky factor has a positive diagonal")
    }

    pub fn log_det(&self) -> f64 {
        2.0 * self.l.diagonal().iter().map(|d| d.ln()).sum::<f64>()
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        let n = self.l.nrows();
        self.solve_mat(&DMatrix::identity(n, n))
    }
}

/// Plain Cholesky. Pivots at or below `n·ε·max(diag)` count as singular.
pub fn cholesky(a: &DMatrix<f64>, what: &str) -> Result<Factor> {
    let l = factor_lower(a).ok_or_else(|| {
        numeric!("{what}: matrix is not positive definite (Cholesky failed)")
    })?;
    Ok(Factor { l, jitter: 0.0 })
}

/// Cholesky with a diagonal jitter ladder: starts at `1e-10·trace/n` and grows
/// ×10 up to `1e-6·trace/n` before giving up.
pub fn cholesky_jittered(a: &DMatrix<f64>, what: &str) -> Result<Factor> {
    let n = a.nrows();
    if n == 0 {
        return Ok(Factor {
            l: DMatrix::zeros(0, 0),
            jitter: 0.0,
        });
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(numeric!("{what}: matrix has non-finite entries"));
    }
    let scale = a.trace() / n as f64;
    if scale <= 0.0 {
        // all-zero covariance: the factor is zero as well
        if a.iter().all(|&v| v == 0.0) {
            return Ok(Factor {
                l: DMatrix::zeros(n, n),
                jitter: 0.0,
            });
        }
        return Err(numeric!("{what}: non-positive trace"));
    }
    let mut rel = 1e-10;
    while rel <= 1e-6 * (1.0 + 1e-9) {
        let jitter = rel * scale;
        let mut shifted = a.clone();
        for i in 0..n {
            shifted[(i, i)] += jitter;
        }
        if let Some(l) = factor_lower(&shifted) {
            return Ok(Factor { l, jitter });
        }
        rel *= 10.0;
    }
    Err(numeric!(
        "{what}: Cholesky failed even with jitter 1e-6·trace/n"
    ))
}

fn factor_lower(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let n = a.nrows();
    assert_eq!(n, a.ncols(), "cholesky needs a square matrix");
    let max_diag = a.diagonal().iter().fold(0.0_f64, |m, &v| m.max(v.abs()));
    let tol = n as f64 * f64::EPSILON * max_diag;
    let mut l = DMatrix::<f64>::zeros(n, n);
    for j in 0..n {
        let mut d = a[(j, j)];
        for k in 0..j {
            d -= l[(j, k)] * l[(j, k)];
        }
        if !(d > tol) {
            return None;
        }
        let djj = d.sqrt();
        l[(j, j)] = djj;
        for i in (j + 1)..n {
            let mut s = a[(i, j)];
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / djj;
        }
    }
    Some(l)
}

/// Pairwise (cascade) summation in the given order.
pub fn pairwise_sum(values: &[f64]) -> f64 {
    if values.len() <= 8 {
        return values.iter().sum();
    }
    let mid = values.len() / 2;
    pairwise_sum(&values[..mid]) + pairwise_sum(&values[mid..])
}

/// Order-independent sum: sorts a copy by value, then sums pairwise. Any
/// permutation of the input yields the same bits.
pub fn canonical_sum(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    pairwise_sum(values)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn factor_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 2.0, 0.6, 2.0, 5.0, 1.0, 0.6, 1.0, 3.0]);
        let f = cholesky(&a, "test").unwrap();
        let rec = &f.l * f.l.transpose();
        assert!((rec - &a).abs().max() < 1e-12);
        let b = DVector::from_vec(vec![1.0, -2.0, 0.5]);
        let x = f.solve_vec(&b);
        assert!((&a * x - b).abs().max() < 1e-12);
    }

    #[test]
    fn singular_is_rejected_without_jitter() {
        let a = DMatrix::from_element(2, 2, 1.0);
        assert!(cholesky(&a, "dup").is_err());
        let f = cholesky_jittered(&a, "dup").unwrap();
        assert!(f.jitter > 0.0 && f.jitter <= 1e-6);
    }

    #[test]
    fn canonical_sum_ignores_order() {
        let mut a = vec![1e16, 1.0, -1e16, 3.5, 1e-3, 7.25, -2.0, 0.1, 0.2, 0.3];
        let mut b = a.clone();
        b.reverse();
        b.swap(1, 4);
        assert_eq!(canonical_sum(&mut a).to_bits(), canonical_sum(&mut b).to_bits());
    }
}
