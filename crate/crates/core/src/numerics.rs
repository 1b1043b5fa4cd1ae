//! Dense symmetric-positive-definite linear algebra.
//!
//! Backs the ridge-regression evaluator and its elliptical bonuses. The
//! primary solve path is a Cholesky factorization of `lambda * I +
//! sum phi phi^T`; if that fails (which can only happen through loss of
//! positive definiteness at tiny `lambda`), a symmetric eigendecomposition
//! with eigenvalues clamped at 1e-12 takes over. Matrices here are small
//! and dense (d up to a few hundred), so factorizations are recomputed per
//! call rather than updated incrementally.

use crate::error::{Error, Result};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};

/// Smallest eigenvalue admitted by the fallback solve.
const EIGEN_FLOOR: f64 = 1e-12;

/// A regularized scatter matrix `M = lambda * I + sum_i phi_i phi_i^T`
/// together with the count of accumulated vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct CovarianceState {
    dim: usize,
    lambda: f64,
    count: usize,
    m: DMatrix<f64>,
}

impl CovarianceState {
    /// Starts from `lambda * I`.
    pub fn new(dim: usize, lambda: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Invalid("covariance dimension must be positive".into()));
        }
        if !lambda.is_finite() || lambda < 0.0 {
            return Err(Error::Invalid(format!(
                "ridge weight must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(CovarianceState {
            dim,
            lambda,
            count: 0,
            m: DMatrix::identity(dim, dim) * lambda,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    /// Number of accumulated feature vectors.
    pub fn count(&self) -> usize {
        self.count
    }

    /// The matrix entries, row-major.
    pub fn entries(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.dim * self.dim);
        for i in 0..self.dim {
            for j in 0..self.dim {
                out.push(self.m[(i, j)]);
            }
        }
        out
    }

    /// Adds `phi phi^T`. Symmetry is preserved exactly because the two
    /// mirrored entries are computed from the same product.
    pub fn accumulate(&mut self, phi: &[f64]) -> Result<()> {
        self.check_dim("cov_accumulate", phi)?;
        for i in 0..self.dim {
            for j in 0..self.dim {
                self.m[(i, j)] += phi[i] * phi[j];
            }
        }
        self.count += 1;
        Ok(())
    }

    /// The elliptical norm `sqrt(phi^T M^{-1} phi)`.
    pub fn quad_norm(&self, phi: &[f64]) -> Result<f64> {
        self.check_dim("quad_norm", phi)?;
        if phi.iter().any(|v| !v.is_finite()) {
            return Err(Error::Invalid("quad_norm: non-finite feature vector".into()));
        }
        let rhs = DVector::from_column_slice(phi);
        let x = solve_spd("quad_norm", &self.m, &rhs, self.lambda > 0.0)?;
        let q = rhs.dot(&x);
        if !q.is_finite() {
            return Err(Error::Singular {
                context: "quad_norm",
                detail: format!("quadratic form evaluated to {q}"),
            });
        }
        // Exact arithmetic gives q >= 0; the max guards roundoff at zero.
        Ok(q.max(0.0).sqrt())
    }

    fn check_dim(&self, context: &'static str, phi: &[f64]) -> Result<()> {
        if phi.len() != self.dim {
            return Err(Error::Dimension {
                context,
                expected: self.dim,
                got: phi.len(),
            });
        }
        Ok(())
    }
}

/// Ridge regression by normal equations: solves
/// `(lambda * I + sum_i phi_i phi_i^T) theta = sum_i phi_i y_i`.
///
/// With `lambda = 0` a rank-deficient design is an error; with
/// `lambda > 0` the system is positive definite by construction.
pub fn ridge_fit(rows: &[Vec<f64>], targets: &[f64], lambda: f64) -> Result<Vec<f64>> {
    if rows.len() != targets.len() {
        return Err(Error::Dimension {
            context: "ridge_fit targets",
            expected: rows.len(),
            got: targets.len(),
        });
    }
    let dim = match rows.first() {
        Some(r) => r.len(),
        None => {
            return Err(Error::Invalid(
                "ridge_fit: cannot infer dimension from an empty design; use ridge_fit_dim".into(),
            ))
        }
    };
    ridge_fit_dim(dim, rows, targets, lambda)
}

/// [`ridge_fit`] with an explicit dimension, so an empty design is legal
/// and returns the zero vector (for `lambda > 0`).
pub fn ridge_fit_dim(
    dim: usize,
    rows: &[Vec<f64>],
    targets: &[f64],
    lambda: f64,
) -> Result<Vec<f64>> {
    if dim == 0 {
        return Err(Error::Invalid("ridge_fit: dimension must be positive".into()));
    }
    if !lambda.is_finite() || lambda < 0.0 {
        return Err(Error::Invalid(format!(
            "ridge weight must be finite and >= 0, got {lambda}"
        )));
    }
    if rows.len() != targets.len() {
        return Err(Error::Dimension {
            context: "ridge_fit targets",
            expected: rows.len(),
            got: targets.len(),
        });
    }
    let mut m = DMatrix::<f64>::identity(dim, dim) * lambda;
    let mut b = DVector::<f64>::zeros(dim);
    for (row, &y) in rows.iter().zip(targets) {
        if row.len() != dim {
            return Err(Error::Dimension {
                context: "ridge_fit row",
                expected: dim,
                got: row.len(),
            });
        }
        if row.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(Error::Invalid("ridge_fit: non-finite input".into()));
        }
        for i in 0..dim {
            for j in 0..dim {
                m[(i, j)] += row[i] * row[j];
            }
            b[i] += row[i] * y;
        }
    }
    let x = solve_spd("ridge_fit", &m, &b, lambda > 0.0)?;
    Ok(x.iter().copied().collect())
}

/// Solves `m x = rhs` for symmetric positive (semi-)definite `m`.
///
/// Cholesky first; on failure either report singularity (when the caller
/// knows the system should have been definite, i.e. `regularized` is
/// false) or fall back to an eigendecomposition with clamped eigenvalues.
fn solve_spd(
    context: &'static str,
    m: &DMatrix<f64>,
    rhs: &DVector<f64>,
    regularized: bool,
) -> Result<DVector<f64>> {
    if let Some(chol) = Cholesky::new(m.clone()) {
        return Ok(chol.solve(rhs));
    }
    let eigen = SymmetricEigen::new(m.clone());
    let max_eig = eigen.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min_eig = eigen.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if !regularized {
        // An unregularized normal-equation matrix that is not PD is rank
        // deficient for our purposes; report its spectrum.
        return Err(Error::Singular {
            context,
            detail: format!(
                "matrix is not positive definite (eigenvalues in [{min_eig:.3e}, {max_eig:.3e}]); \
                 use a positive ridge weight"
            ),
        });
    }
    let coords = eigen.eigenvectors.transpose() * rhs;
    let scaled = DVector::from_iterator(
        m.nrows(),
        coords
            .iter()
            .zip(eigen.eigenvalues.iter())
            .map(|(c, &e)| c / e.max(EIGEN_FLOOR)),
    );
    Ok(&eigen.eigenvectors * scaled)
}
