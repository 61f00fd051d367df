//! Adaptive shrinkage estimation: per-coordinate thresholding of the LSE,
//! the effective-dimension estimate, and the chi-square quantile used by the
//! adaptive stopping threshold.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::linalg::{max_eig, GramState, LinalgError};
use crate::scalar::Scalar;
use crate::seqcore::{sigma2_hat, stopping_inequality_holds, ProcedureConfig, SeqError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ShrinkError {
    #[error("probability must lie in (0, 1), got {0}")]
    ProbOutOfRange(f64),
    #[error("degrees of freedom must be >= 1")]
    ZeroDof,
}

/// Tuning of the adaptive shrinkage rule. The penalty for coordinate `k` is
/// `n^(-lambda_exponent) * |beta_k|^(-gamma)` and a coordinate survives when
/// `sqrt(n)` times that penalty stays below `epsilon`.
#[derive(Debug, Clone, PartialEq)]
pub struct AseConfig<T: Scalar> {
    /// Exponent `c` of the penalty scale `lambda(n) = n^(-c)`. Must lie in
    /// `(1/2, 1)` so `sqrt(n) * lambda(n) -> 0` while `n^(1/2 + gamma*delta)
    /// * lambda(n) -> infinity` for some `delta < 1/2`.
    pub lambda_exponent: T,
    /// Shrinkage power applied to `|beta_k|`.
    pub gamma: T,
    /// Cutting parameter; application-dependent, larger keeps more coordinates.
    pub epsilon: T,
    /// Free-text record of the `(delta, gamma)` rate constraint backing the
    /// chosen exponent. Not used at runtime.
    pub delta_note: Option<String>,
}

impl<T: Scalar> Default for AseConfig<T> {
    fn default() -> Self {
        Self {
            lambda_exponent: T::of(0.75),
            gamma: T::one(),
            epsilon: T::one(),
            delta_note: None,
        }
    }
}

impl<T: Scalar> AseConfig<T> {
    pub fn validate(&self) -> Result<(), String> {
        let c = self.lambda_exponent.as_f64();
        if !(0.5..1.0).contains(&c) || c == 0.5 {
            return Err(format!("lambda exponent must lie in (1/2, 1), got {c}"));
        }
        if self.gamma <= T::zero() {
            return Err("gamma must be positive".into());
        }
        if self.epsilon <= T::zero() {
            return Err("epsilon must be positive".into());
        }
        Ok(())
    }
}

/// Outcome of thresholding one LSE vector.
#[derive(Debug, Clone, PartialEq)]
pub struct AseState<T: Scalar> {
    /// Kept/zeroed mark per coordinate.
    pub indicator: Vec<bool>,
    /// The thresholded estimate: zero where the indicator is off.
    pub beta_star: DVector<T>,
    /// Number of kept coordinates.
    pub p0_hat: usize,
}

/// Thresholds the LSE at sample size `n`: coordinate `k` is kept iff
/// `|beta_k| > (n^(1/2 - c) / epsilon)^(1/gamma)`. An exact zero estimate is
/// always dropped (infinite penalty convention).
pub fn shrink<T: Scalar>(beta_hat: &DVector<T>, n: usize, cfg: &AseConfig<T>) -> AseState<T> {
    let half = T::of(0.5);
    let threshold =
        (T::of_usize(n).powf(half - cfg.lambda_exponent) / cfg.epsilon).powf(T::one() / cfg.gamma);
    let indicator: Vec<bool> = beta_hat
        .iter()
        .map(|&b| b != T::zero() && b.abs() > threshold)
        .collect();
    let beta_star = DVector::from_fn(beta_hat.len(), |k, _| {
        if indicator[k] {
            beta_hat[k]
        } else {
            T::zero()
        }
    });
    let p0_hat = indicator.iter().filter(|&&k| k).count();
    AseState {
        indicator,
        beta_star,
        p0_hat,
    }
}

/// `lambda_max[n * I * gram_inv * I]` restricted to the kept coordinates,
/// i.e. `n` times the largest eigenvalue of the active submatrix of the
/// inverse Gram matrix. `None` when every coordinate is zeroed.
pub fn masked_mu<T: Scalar>(
    state: &GramState<T>,
    indicator: &[bool],
) -> Result<Option<T>, LinalgError> {
    let inv = state.gram_inv().ok_or(LinalgError::RankDeficient)?;
    let active: Vec<usize> = (0..indicator.len()).filter(|&k| indicator[k]).collect();
    if active.is_empty() {
        return Ok(None);
    }
    let sub = DMatrix::from_fn(active.len(), active.len(), |i, j| {
        inv[(active[i], active[j])]
    });
    Ok(Some(T::of_usize(state.n()) * max_eig(&sub)?))
}

/// Adaptive stopping check: the threshold uses the chi-square quantile at the
/// estimated dimension `p0_hat` (split across the `m` procedures) and the
/// masked eigenvalue term. Never stops while every coordinate is zeroed.
pub fn should_stop_ase<T: Scalar>(
    state: &GramState<T>,
    ase: &AseState<T>,
    cfg: &ProcedureConfig<T>,
) -> Result<bool, SeqError> {
    if ase.p0_hat == 0 || state.n() < cfg.n0 || state.n() <= state.p() {
        return Ok(false);
    }
    let Some(mu) = masked_mu(state, &ase.indicator)? else {
        return Ok(false);
    };
    let a_tilde_sq = chi2_quantile_scalar(ase.p0_hat, T::one() - cfg.alpha)? / T::of_usize(cfg.m);
    let s2 = sigma2_hat(state)?;
    Ok(stopping_inequality_holds(
        s2,
        state.n(),
        mu,
        a_tilde_sq,
        cfg.d,
    ))
}

/// Inverse CDF of the chi-square distribution, accurate to better than 1e-8.
pub fn chi2_quantile(dof: usize, prob: f64) -> Result<f64, ShrinkError> {
    if dof == 0 {
        return Err(ShrinkError::ZeroDof);
    }
    if !(prob > 0.0 && prob < 1.0) {
        return Err(ShrinkError::ProbOutOfRange(prob));
    }
    let a = dof as f64 / 2.0;
    // Wilson-Hilferty estimate seeds an upper bracket, then bisection on the
    // CDF; the bracket [lo, hi] always straddles the root.
    let k = dof as f64;
    let z = normal_quantile(prob);
    let h = 2.0 / (9.0 * k);
    let wh = k * (1.0 - h + z * h.sqrt()).powi(3);
    let mut hi = if wh.is_finite() && wh > 0.0 { wh } else { k };
    while reg_lower_gamma(a, hi / 2.0) < prob {
        hi *= 2.0;
    }
    let mut lo = 0.0_f64;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if reg_lower_gamma(a, mid / 2.0) < prob {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo <= 1e-14 * hi {
            break;
        }
    }
    Ok(0.5 * (lo + hi))
}

/// Same quantile, cast into the working scalar type.
pub fn chi2_quantile_scalar<T: Scalar>(dof: usize, prob: T) -> Result<T, ShrinkError> {
    chi2_quantile(dof, prob.as_f64()).map(T::of)
}

/// Chi-square CDF (regularized lower incomplete gamma).
pub fn chi2_cdf(dof: usize, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    reg_lower_gamma(dof as f64 / 2.0, x / 2.0)
}

/// Regularized lower incomplete gamma P(a, x): series for small x,
/// continued fraction for large x.
fn reg_lower_gamma(a: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x < a + 1.0 {
        // Series expansion.
        let mut term = 1.0 / a;
        let mut sum = term;
        let mut ap = a;
        for _ in 0..500 {
            ap += 1.0;
            term *= x / ap;
            sum += term;
            if term.abs() < sum.abs() * 1e-16 {
                break;
            }
        }
        sum * (-x + a * x.ln() - ln_gamma(a)).exp()
    } else {
        // Lentz continued fraction for Q(a, x).
        let tiny = 1e-300;
        let mut b = x + 1.0 - a;
        let mut c = 1.0 / tiny;
        let mut d = 1.0 / b;
        let mut h = d;
        for i in 1..500 {
            let an = -(i as f64) * (i as f64 - a);
            b += 2.0;
            d = an * d + b;
            if d.abs() < tiny {
                d = tiny;
            }
            c = b + an / c;
            if c.abs() < tiny {
                c = tiny;
            }
            d = 1.0 / d;
            let delta = d * c;
            h *= delta;
            if (delta - 1.0).abs() < 1e-16 {
                break;
            }
        }
        let q = (-x + a * x.ln() - ln_gamma(a)).exp() * h;
        1.0 - q
    }
}

/// Lanczos log-gamma.
fn ln_gamma(x: f64) -> f64 {
    const G: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        std::f64::consts::PI.ln() - (std::f64::consts::PI * x).sin().ln() - ln_gamma(1.0 - x)
    } else {
        let x = x - 1.0;
        let mut acc = G[0];
        for (i, &g) in G.iter().enumerate().skip(1) {
            acc += g / (x + i as f64);
        }
        let t = x + 7.5;
        0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + acc.ln()
    }
}

/// Acklam-style inverse normal CDF (only used as a Newton starting point).
fn normal_quantile(p: f64) -> f64 {
    const A: [f64; 6] = [
        -3.969_683_028_665_376e1,
        2.209_460_984_245_205e2,
        -2.759_285_104_469_687e2,
        1.383_577_518_672_69e2,
        -3.066_479_806_614_716e1,
        2.506_628_277_459_239,
    ];
    const B: [f64; 5] = [
        -5.447_609_879_822_406e1,
        1.615_858_368_580_409e2,
        -1.556_989_798_598_866e2,
        6.680_131_188_771_972e1,
        -1.328_068_155_288_572e1,
    ];
    const C: [f64; 6] = [
        -7.784_894_002_430_293e-3,
        -3.223_964_580_411_365e-1,
        -2.400_758_277_161_838,
        -2.549_732_539_343_734,
        4.374_664_141_464_968,
        2.938_163_982_698_783,
    ];
    const D: [f64; 4] = [
        7.784_695_709_041_462e-3,
        3.224_671_290_700_398e-1,
        2.445_134_137_142_996,
        3.754_408_661_907_416,
    ];
    let p_low = 0.02425;
    if p < p_low {
        let q = (-2.0 * p.ln()).sqrt();
        (((((C[0] * q + C[1]) * q + C[2]) * q + C[3]) * q + C[4]) * q + C[5])
            / ((((D[0] * q + D[1]) * q + D[2]) * q + D[3]) * q + 1.0)
    } else if p <= 1.0 - p_low {
        let q = p - 0.5;
        let r = q * q;
        (((((A[0] * r + A[1]) * r + A[2]) * r + A[3]) * r + A[4]) * r + A[5]) * q
            / (((((B[0] * r + B[1]) * r + B[2]) * r + B[3]) * r + B[4]) * r + 1.0)
    } else {
        -normal_quantile(1.0 - p)
    }
}
