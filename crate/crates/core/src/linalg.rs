//! Incremental symmetric linear algebra: rank-one Gram updates with
//! Sherman-Morrison inverse and determinant maintenance, plus extreme
//! eigenvalue extraction.

use nalgebra::{Cholesky, DMatrix, DVector, RealField};
use thiserror::Error;

use crate::scalar::Scalar;

/// Rank-one refreshes happen every this many updates unless overridden;
/// bounds floating-point drift of the maintained inverse.
pub const DEFAULT_REFRESH_CADENCE: usize = 512;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("non-finite input")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("rank-deficient matrix")]
    RankDeficient,
    #[error("matrix is not symmetric within tolerance")]
    NotSymmetric,
}

/// Incremental sufficient statistics of one least-squares procedure:
/// the Gram matrix `sum x_i x_i^T`, its maintained inverse and
/// log-determinant, and the cross moments needed for the fit.
#[derive(Debug, Clone)]
pub struct GramState<T: Scalar> {
    n: usize,
    p: usize,
    gram: DMatrix<T>,
    gram_inv: Option<DMatrix<T>>,
    log_det: Option<T>,
    xty: DVector<T>,
    yty: T,
    refresh_cadence: usize,
    updates_since_refresh: usize,
}

impl<T: Scalar> GramState<T> {
    pub fn new(p: usize) -> Self {
        Self::with_refresh_cadence(p, DEFAULT_REFRESH_CADENCE)
    }

    pub fn with_refresh_cadence(p: usize, refresh_cadence: usize) -> Self {
        assert!(p > 0, "covariate dimension must be positive");
        Self {
            n: 0,
            p,
            gram: DMatrix::zeros(p, p),
            gram_inv: None,
            log_det: None,
            xty: DVector::zeros(p),
            yty: T::zero(),
            refresh_cadence: refresh_cadence.max(1),
            updates_since_refresh: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn p(&self) -> usize {
        self.p
    }

    pub fn gram(&self) -> &DMatrix<T> {
        &self.gram
    }

    pub fn gram_inv(&self) -> Option<&DMatrix<T>> {
        self.gram_inv.as_ref()
    }

    pub fn log_det(&self) -> Option<T> {
        self.log_det
    }

    pub fn xty(&self) -> &DVector<T> {
        &self.xty
    }

    pub fn yty(&self) -> T {
        self.yty
    }

    pub fn is_invertible(&self) -> bool {
        self.gram_inv.is_some()
    }

    /// Absorbs one observation `(x, y)`.
    ///
    /// The Gram matrix, cross moments and count always update exactly; the
    /// maintained inverse follows by the Sherman-Morrison identity and the
    /// log-determinant by `log(1 + x^T A^-1 x)`. Before the Gram matrix
    /// reaches full rank the inverse is absent and is (re)established by
    /// direct factorization once `n >= p`.
    pub fn rank_one_update(&mut self, x: &DVector<T>, y: T) -> Result<(), LinalgError> {
        if x.len() != self.p {
            return Err(LinalgError::DimensionMismatch {
                expected: self.p,
                got: x.len(),
            });
        }
        if x.iter().any(|v| !v.is_finite()) || !y.is_finite() {
            return Err(LinalgError::NonFinite);
        }

        self.gram.ger(T::one(), x, x, T::one());
        self.xty.axpy(y, x, T::one());
        self.yty += y * y;
        self.n += 1;

        match &self.gram_inv {
            Some(inv) => {
                let v = inv * x;
                let growth = T::one() + x.dot(&v);
                if growth <= T::of(1e-12) {
                    // Numerically impossible for an SPD predecessor, but a
                    // long drifted chain can get here; fall back to a refresh.
                    return self.direct_refresh();
                }
                let inv = self.gram_inv.as_mut().expect("checked above");
                inv.ger(-T::one() / growth, &v, &v, T::one());
                self.log_det = Some(self.log_det.expect("tracked with inverse") + growth.ln());
                self.updates_since_refresh += 1;
                if self.updates_since_refresh >= self.refresh_cadence {
                    self.direct_refresh()?;
                }
            }
            None => {
                if self.n >= self.p {
                    // Establish the inverse once rank allows; a still-singular
                    // Gram just stays in the pre-invertibility phase.
                    if let Some((inv, log_det)) = spd_inverse_log_det(&self.gram) {
                        self.gram_inv = Some(inv);
                        self.log_det = Some(log_det);
                        self.updates_since_refresh = 0;
                    }
                }
            }
        }
        Ok(())
    }

    /// Recomputes the inverse and log-determinant from the Gram matrix by
    /// direct factorization; other fields are untouched.
    pub fn direct_refresh(&mut self) -> Result<(), LinalgError> {
        let (inv, log_det) = spd_inverse_log_det(&self.gram).ok_or(LinalgError::RankDeficient)?;
        self.gram_inv = Some(inv);
        self.log_det = Some(log_det);
        self.updates_since_refresh = 0;
        Ok(())
    }
}

/// Cholesky-based inverse and log-determinant of an SPD matrix.
pub fn spd_inverse_log_det<T: Scalar>(m: &DMatrix<T>) -> Option<(DMatrix<T>, T)> {
    let chol = Cholesky::new(m.clone())?;
    let log_det = chol
        .l_dirty()
        .diagonal()
        .iter()
        .fold(T::zero(), |acc, &d| acc + d.ln())
        * T::of(2.0);
    // The triangular-solve inverse is symmetric only up to round-off;
    // symmetrize so downstream symmetry checks see an exact match.
    let inv = chol.inverse();
    let inv = (&inv + inv.transpose()) * T::of(0.5);
    Some((inv, log_det))
}

fn check_symmetric<T: Scalar>(s: &DMatrix<T>) -> Result<(), LinalgError> {
    if !s.is_square() {
        return Err(LinalgError::DimensionMismatch {
            expected: s.nrows(),
            got: s.ncols(),
        });
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(LinalgError::NonFinite);
    }
    // Guards against passing a genuinely non-symmetric matrix; round-off
    // asymmetry from update chains stays far below this.
    let scale = RealField::max(T::one(), s.amax());
    let tol = T::of(1e-6) * scale;
    for i in 0..s.nrows() {
        for j in (i + 1)..s.ncols() {
            if (s[(i, j)] - s[(j, i)]).abs() > tol {
                return Err(LinalgError::NotSymmetric);
            }
        }
    }
    Ok(())
}

fn sym_eigenvalues<T: Scalar>(s: &DMatrix<T>) -> Result<DVector<T>, LinalgError> {
    check_symmetric(s)?;
    // Symmetrize so tiny asymmetries within tolerance cannot leak in.
    let sym = (s + s.transpose()) * T::of(0.5);
    Ok(sym.symmetric_eigen().eigenvalues)
}

/// Minimum eigenvalue of a symmetric matrix.
pub fn min_eig<T: Scalar>(s: &DMatrix<T>) -> Result<T, LinalgError> {
    let ev = sym_eigenvalues(s)?;
    Ok(ev
        .iter()
        .copied()
        .fold(T::of(f64::INFINITY), RealField::min))
}

/// Maximum eigenvalue of a symmetric matrix.
pub fn max_eig<T: Scalar>(s: &DMatrix<T>) -> Result<T, LinalgError> {
    let ev = sym_eigenvalues(s)?;
    Ok(ev
        .iter()
        .copied()
        .fold(T::of(f64::NEG_INFINITY), RealField::max))
}
