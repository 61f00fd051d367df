//! Combining stopped procedures: the weighted estimator and the exact,
//! approximate, and shrinkage confidence sets.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{max_eig, min_eig, spd_inverse_log_det, LinalgError};
use crate::scalar::Scalar;
use crate::seqcore::ProcedureResult;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AggError {
    #[error("no procedure results to combine")]
    Empty,
    #[error("procedure results disagree on dimension")]
    DimensionMismatch,
    #[error("results mix shrinkage and plain procedures")]
    MixedModes,
    #[error("shrinkage set requested but procedures carry no indicators")]
    MissingIndicators,
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Stopping-time-weighted combination of per-procedure estimates.
#[derive(Debug, Clone)]
pub struct CombinedEstimate<T: Scalar> {
    /// `sum rho_j beta_j`, masked to the common support in shrinkage mode.
    pub beta: DVector<T>,
    /// Total stopping time `N* = sum N_j`.
    pub n_star: usize,
    /// Weights `rho_j = N_j / N*`.
    pub weights: Vec<T>,
    /// `mu* = sum rho_j mu_j`.
    pub mu_star: T,
    /// Intersection of the per-procedure supports (shrinkage mode only).
    pub indicator: Option<Vec<bool>>,
}

/// An ellipsoidal confidence set, possibly restricted to a coordinate
/// subspace: `{z : z = 0 off the support, (z_a - c_a)' Q (z_a - c_a) <= r}`
/// where the subscript keeps the active coordinates.
#[derive(Debug, Clone)]
pub struct ConfidenceEllipsoid<T: Scalar> {
    pub center: DVector<T>,
    /// Shape matrix over the active coordinates.
    pub shape: DMatrix<T>,
    pub radius: T,
    /// Active-coordinate marks; `None` means the full space.
    pub zero_pattern: Option<Vec<bool>>,
    /// Set when every coordinate was zeroed: the set collapses to the origin.
    pub degenerate: bool,
}

fn validate<T: Scalar>(results: &[ProcedureResult<T>]) -> Result<usize, AggError> {
    let Some(first) = results.first() else {
        return Err(AggError::Empty);
    };
    let p = first.beta_hat.len();
    if results.iter().any(|r| r.beta_hat.len() != p) {
        return Err(AggError::DimensionMismatch);
    }
    let with_ind = results.iter().filter(|r| r.indicator.is_some()).count();
    if with_ind != 0 && with_ind != results.len() {
        return Err(AggError::MixedModes);
    }
    Ok(p)
}

/// Combines stopped procedures into the weighted estimator. In shrinkage
/// mode each procedure contributes its thresholded estimate and the result
/// is masked to the intersection of the supports.
pub fn combine<T: Scalar>(results: &[ProcedureResult<T>]) -> Result<CombinedEstimate<T>, AggError> {
    let p = validate(results)?;
    let n_star: usize = results.iter().map(|r| r.n_stop).sum();
    let nf = T::of_usize(n_star);
    let weights: Vec<T> = results.iter().map(|r| T::of_usize(r.n_stop) / nf).collect();
    let mu_star = results
        .iter()
        .zip(&weights)
        .map(|(r, &w)| w * r.mu)
        .sum::<T>();
    let shrunk = results[0].indicator.is_some();
    let mut beta = DVector::<T>::zeros(p);
    for (r, &w) in results.iter().zip(&weights) {
        match &r.indicator {
            Some(ind) => {
                for k in 0..p {
                    if ind[k] {
                        beta[k] += w * r.beta_hat[k];
                    }
                }
            }
            None => beta += &r.beta_hat * w,
        }
    }
    let indicator = if shrunk {
        let common: Vec<bool> = (0..p)
            .map(|k| {
                results
                    .iter()
                    .all(|r| r.indicator.as_ref().expect("checked above")[k])
            })
            .collect();
        for k in 0..p {
            if !common[k] {
                beta[k] = T::zero();
            }
        }
        Some(common)
    } else {
        None
    };
    Ok(CombinedEstimate {
        beta,
        n_star,
        weights,
        mu_star,
        indicator,
    })
}

/// Exact combined set: shape `{sum rho_j^2 G_j^{-1}}^{-1}`, radius
/// `N* d^2 / mu*`.
pub fn ellipsoid_exact<T: Scalar>(
    results: &[ProcedureResult<T>],
    d: T,
) -> Result<ConfidenceEllipsoid<T>, AggError> {
    let p = validate(results)?;
    let est = combine(results)?;
    let mut mixed = DMatrix::<T>::zeros(p, p);
    for (r, &w) in results.iter().zip(&est.weights) {
        mixed += &r.gram_inv * (w * w);
    }
    let (shape, _) = spd_inverse_log_det(&mixed).ok_or(LinalgError::RankDeficient)?;
    Ok(ConfidenceEllipsoid {
        center: est.beta,
        shape,
        radius: T::of_usize(est.n_star) * d * d / est.mu_star,
        zero_pattern: None,
        degenerate: false,
    })
}

/// Approximate combined set: shape `sum G_j` with the same radius as the
/// exact set. Always contained in the exact set.
pub fn ellipsoid_approx<T: Scalar>(
    results: &[ProcedureResult<T>],
    d: T,
) -> Result<ConfidenceEllipsoid<T>, AggError> {
    let p = validate(results)?;
    let est = combine(results)?;
    let mut shape = DMatrix::<T>::zeros(p, p);
    for r in results {
        shape += &r.gram;
    }
    Ok(ConfidenceEllipsoid {
        center: est.beta,
        shape,
        radius: T::of_usize(est.n_star) * d * d / est.mu_star,
        zero_pattern: None,
        degenerate: false,
    })
}

fn submatrix<T: Scalar>(m: &DMatrix<T>, rows: &[usize], cols: &[usize]) -> DMatrix<T> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

/// Shrinkage combined set, restricted to the common support: the shape is
/// the Schur complement of the pooled Gram matrix onto the active block and
/// the radius uses the masked eigenvalue term of the pooled inverse.
pub fn ellipsoid_ase<T: Scalar>(
    results: &[ProcedureResult<T>],
    d: T,
) -> Result<ConfidenceEllipsoid<T>, AggError> {
    let p = validate(results)?;
    let est = combine(results)?;
    let common = est.indicator.clone().ok_or(AggError::MissingIndicators)?;
    let active: Vec<usize> = (0..p).filter(|&k| common[k]).collect();
    let inactive: Vec<usize> = (0..p).filter(|&k| !common[k]).collect();
    if active.is_empty() {
        return Ok(ConfidenceEllipsoid {
            center: est.beta,
            shape: DMatrix::zeros(0, 0),
            radius: T::zero(),
            zero_pattern: Some(common),
            degenerate: true,
        });
    }
    let mut pooled = DMatrix::<T>::zeros(p, p);
    for r in results {
        pooled += &r.gram;
    }
    let s11 = submatrix(&pooled, &active, &active);
    let shape = if inactive.is_empty() {
        s11
    } else {
        let s12 = submatrix(&pooled, &active, &inactive);
        let s22 = submatrix(&pooled, &inactive, &inactive);
        let s22_inv = match spd_inverse_log_det(&s22) {
            Some((inv, _)) => inv,
            None => s22
                .pseudo_inverse(T::of(1e-12))
                .map_err(|_| LinalgError::RankDeficient)?,
        };
        &s11 - &s12 * s22_inv * s12.transpose()
    };
    let (pooled_inv, _) = spd_inverse_log_det(&pooled).ok_or(LinalgError::RankDeficient)?;
    let masked = submatrix(&pooled_inv, &active, &active);
    let nu = T::of_usize(est.n_star) * max_eig(&masked)?;
    Ok(ConfidenceEllipsoid {
        center: est.beta,
        shape,
        radius: T::of_usize(est.n_star) * d * d / nu,
        zero_pattern: Some(common),
        degenerate: false,
    })
}

impl<T: Scalar> ConfidenceEllipsoid<T> {
    fn active(&self) -> Vec<usize> {
        match &self.zero_pattern {
            Some(pat) => (0..pat.len()).filter(|&k| pat[k]).collect(),
            None => (0..self.center.len()).collect(),
        }
    }

    /// Quadratic form of the active block, or `None` when `z` violates the
    /// zero pattern.
    pub fn quadratic_form(&self, z: &DVector<T>) -> Option<T> {
        if let Some(pat) = &self.zero_pattern {
            for k in 0..pat.len() {
                if !pat[k] && z[k] != T::zero() {
                    return None;
                }
            }
        }
        let active = self.active();
        let diff = DVector::from_fn(active.len(), |i, _| z[active[i]] - self.center[active[i]]);
        Some((&self.shape * &diff).dot(&diff))
    }

    pub fn contains(&self, z: &DVector<T>) -> bool {
        if self.degenerate {
            return z.iter().all(|&v| v == T::zero());
        }
        matches!(self.quadratic_form(z), Some(q) if q <= self.radius)
    }

    /// Length of the longest principal axis, `2 sqrt(r * lambda_max(Q^{-1}))`.
    pub fn max_axis(&self) -> Result<T, AggError> {
        if self.degenerate {
            return Ok(T::zero());
        }
        let lam = min_eig(&self.shape)?;
        if lam <= T::zero() {
            return Err(LinalgError::RankDeficient.into());
        }
        Ok(T::of(2.0) * (self.radius / lam).sqrt())
    }

    /// Points on the boundary of the ellipsoid, for containment audits.
    pub fn boundary_points<R: rand::Rng>(
        &self,
        count: usize,
        rng: &mut R,
    ) -> Result<Vec<DVector<T>>, AggError> {
        use rand_distr::{Distribution, StandardNormal};
        let active = self.active();
        let (inv, _) = spd_inverse_log_det(&self.shape).ok_or(LinalgError::RankDeficient)?;
        let chol = nalgebra::Cholesky::new(inv).ok_or(LinalgError::RankDeficient)?;
        let l = chol.l();
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let mut u =
                DVector::<T>::from_fn(active.len(), |_, _| T::of(StandardNormal.sample(rng)));
            let norm = u.norm();
            if norm == T::zero() {
                u[0] = T::one();
            } else {
                u /= norm;
            }
            let dir = &l * u * self.radius.sqrt();
            let mut z = DVector::<T>::zeros(self.center.len());
            for (i, &k) in active.iter().enumerate() {
                z[k] = self.center[k] + dir[i];
            }
            out.push(z);
        }
        Ok(out)
    }
}

/// Samples the boundary of `inner` and counts points that fall outside
/// `outer` (beyond a relative slack for round-off).
pub fn containment_violations<T: Scalar, R: rand::Rng>(
    inner: &ConfidenceEllipsoid<T>,
    outer: &ConfidenceEllipsoid<T>,
    count: usize,
    rng: &mut R,
) -> Result<usize, AggError> {
    let slack = outer.radius * T::of(1e-9);
    let mut violations = 0;
    for z in inner.boundary_points(count, rng)? {
        match outer.quadratic_form(&z) {
            Some(q) if q <= outer.radius + slack => {}
            _ => violations += 1,
        }
    }
    Ok(violations)
}
