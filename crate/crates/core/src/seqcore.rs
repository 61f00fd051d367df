//! One sequential estimation procedure: incremental least squares, the
//! variance estimate, the stopping rule, and the per-procedure run loop.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use thiserror::Error;

use crate::linalg::{max_eig, GramState, LinalgError};
use crate::pool::PoolHandle;
use crate::scalar::Scalar;
use crate::shrinkage::{self, AseConfig, AseState, ShrinkError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SeqError {
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error(transparent)]
    Shrink(#[from] ShrinkError),
    #[error("pool offers {available} rows but the initial sample needs {need}")]
    TooFewRows { available: usize, need: usize },
    #[error("variance estimate needs n > p (n = {n}, p = {p})")]
    VarianceUndefined { n: usize, p: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

/// How a procedure recruits its next observation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Selection {
    Random,
    DOptimal,
}

/// Configuration of one sequential procedure.
#[derive(Debug, Clone)]
pub struct ProcedureConfig<T: Scalar> {
    pub p: usize,
    /// Precision index: half-length bound on the confidence set's maximum axis.
    pub d: T,
    /// Nominal miscoverage of the combined set.
    pub alpha: T,
    /// Total number of concurrent procedures.
    pub m: usize,
    /// Per-procedure threshold; the even split `chi2_p(1 - alpha) / m` so the
    /// thresholds sum to the full quantile.
    pub a_tilde_sq: T,
    /// Initial sample size.
    pub n0: usize,
    pub selection: Selection,
    /// Adaptive shrinkage settings; `None` runs the plain rule.
    pub ase: Option<AseConfig<T>>,
    /// Hard cap on recruited observations (pool exhaustion guard).
    pub max_steps: usize,
    /// Evaluate the stopping rule every this many recruits.
    pub check_every: usize,
}

impl<T: Scalar> ProcedureConfig<T> {
    /// Standard configuration: even threshold split and `n0 = p + 5`.
    pub fn new(p: usize, d: T, alpha: T, m: usize) -> Result<Self, SeqError> {
        if p == 0 || m == 0 {
            return Err(SeqError::InvalidConfig("p and m must be positive".into()));
        }
        if d <= T::zero() {
            return Err(SeqError::InvalidConfig("d must be positive".into()));
        }
        if alpha <= T::zero() || alpha >= T::one() {
            return Err(SeqError::InvalidConfig("alpha must lie in (0, 1)".into()));
        }
        let a_sq = shrinkage::chi2_quantile_scalar(p, T::one() - alpha)?;
        Ok(Self {
            p,
            d,
            alpha,
            m,
            a_tilde_sq: a_sq / T::of_usize(m),
            n0: p + 5,
            selection: Selection::Random,
            ase: None,
            max_steps: usize::MAX,
            check_every: 1,
        })
    }

    pub fn with_selection(mut self, selection: Selection) -> Self {
        self.selection = selection;
        self
    }

    pub fn with_ase(mut self, ase: AseConfig<T>) -> Self {
        self.ase = Some(ase);
        self
    }

    pub fn with_n0(mut self, n0: usize) -> Self {
        self.n0 = n0;
        self
    }

    pub fn validate(&self) -> Result<(), SeqError> {
        if self.n0 < self.p + 2 {
            return Err(SeqError::InvalidConfig(format!(
                "n0 = {} too small: the variance estimate needs n0 >= p + 2 = {}",
                self.n0,
                self.p + 2
            )));
        }
        if let Some(ase) = &self.ase {
            ase.validate().map_err(SeqError::InvalidConfig)?;
        }
        Ok(())
    }
}

/// Frozen output of one stopped procedure.
#[derive(Debug, Clone)]
pub struct ProcedureResult<T: Scalar> {
    /// Stopping time: observations recruited when the run ended.
    pub n_stop: usize,
    pub beta_hat: DVector<T>,
    pub sigma2_hat: T,
    pub gram: DMatrix<T>,
    pub gram_inv: DMatrix<T>,
    /// `lambda_max[n * gram_inv]` at stopping (masked to the kept coordinates
    /// in ASE mode).
    pub mu: T,
    /// Kept-coordinate marks in ASE mode.
    pub indicator: Option<Vec<bool>>,
    /// False when the pool exhausted (or the step cap hit) before the
    /// stopping criterion was satisfied.
    pub stopped_naturally: bool,
}

/// Least-squares estimate from the accumulated moments.
pub fn beta_hat<T: Scalar>(state: &GramState<T>) -> Result<DVector<T>, SeqError> {
    let inv = state.gram_inv().ok_or(LinalgError::RankDeficient)?;
    Ok(inv * state.xty())
}

/// Residual variance estimate `(y'y - beta'X'y) / (n - p)`.
pub fn sigma2_hat<T: Scalar>(state: &GramState<T>) -> Result<T, SeqError> {
    if state.n() <= state.p() {
        return Err(SeqError::VarianceUndefined {
            n: state.n(),
            p: state.p(),
        });
    }
    let beta = beta_hat(state)?;
    let rss = state.yty() - beta.dot(state.xty());
    // Guard tiny negative round-off on noise-free data.
    Ok(nalgebra::RealField::max(rss, T::zero()) / T::of_usize(state.n() - state.p()))
}

/// `lambda_max[n * gram_inv]`, the reciprocal of the smallest eigenvalue of
/// the normalized Gram matrix.
pub fn mu_n<T: Scalar>(state: &GramState<T>) -> Result<T, SeqError> {
    let inv = state.gram_inv().ok_or(LinalgError::RankDeficient)?;
    Ok(T::of_usize(state.n()) * max_eig(inv)?)
}

/// The stopping inequality `(sigma2 + 1/n) <= d^2 n / (a_tilde_sq * mu)`.
pub fn stopping_inequality_holds<T: Scalar>(
    sigma2: T,
    n: usize,
    mu: T,
    a_tilde_sq: T,
    d: T,
) -> bool {
    let nf = T::of_usize(n);
    sigma2 + T::one() / nf <= d * d * nf / (a_tilde_sq * mu)
}

/// Plain (non-ASE) stopping check. Degenerate states (n < n0, singular Gram)
/// simply report "not yet".
pub fn should_stop<T: Scalar>(state: &GramState<T>, cfg: &ProcedureConfig<T>) -> bool {
    if state.n() < cfg.n0 || state.n() <= state.p() || !state.is_invertible() {
        return false;
    }
    let (Ok(s2), Ok(mu)) = (sigma2_hat(state), mu_n(state)) else {
        return false;
    };
    stopping_inequality_holds(s2, state.n(), mu, cfg.a_tilde_sq, cfg.d)
}

/// A stepwise sequential procedure, so executors can interleave several
/// procedures deterministically or run them on separate threads.
pub struct ProcedureRunner<T: Scalar, R: Rng> {
    cfg: ProcedureConfig<T>,
    handle: PoolHandle<T>,
    rng: R,
    state: GramState<T>,
    last_ase: Option<AseState<T>>,
    result: Option<ProcedureResult<T>>,
}

impl<T: Scalar, R: Rng> ProcedureRunner<T, R> {
    /// Claims the `n0` initial observations (randomly, without replacement)
    /// and evaluates the stopping rule once.
    pub fn new(cfg: ProcedureConfig<T>, handle: PoolHandle<T>, rng: R) -> Result<Self, SeqError> {
        cfg.validate()?;
        let mut runner = Self {
            state: GramState::new(cfg.p),
            cfg,
            handle,
            rng,
            last_ase: None,
            result: None,
        };
        for i in 0..runner.cfg.n0 {
            let Some(obs) = runner.handle.claim_random(&mut runner.rng) else {
                return Err(SeqError::TooFewRows {
                    available: i,
                    need: runner.cfg.n0,
                });
            };
            runner.state.rank_one_update(&obs.x, obs.y)?;
        }
        if runner.check_stop()? {
            runner.finalize(true)?;
        }
        Ok(runner)
    }

    pub fn is_finished(&self) -> bool {
        self.result.is_some()
    }

    pub fn state(&self) -> &GramState<T> {
        &self.state
    }

    /// Recruits one observation and re-checks the stopping rule. Returns
    /// `true` once the procedure has finished.
    pub fn step(&mut self) -> Result<bool, SeqError> {
        if self.result.is_some() {
            return Ok(true);
        }
        if self.state.n() >= self.cfg.max_steps {
            self.finalize(false)?;
            return Ok(true);
        }
        let obs = match self.cfg.selection {
            Selection::Random => self.handle.claim_random(&mut self.rng),
            Selection::DOptimal => match self.state.gram_inv() {
                Some(inv) => self.handle.claim_d_optimal(inv),
                None => self.handle.claim_random(&mut self.rng),
            },
        };
        let Some(obs) = obs else {
            // Pool exhausted before the criterion was met.
            self.finalize(false)?;
            return Ok(true);
        };
        self.state.rank_one_update(&obs.x, obs.y)?;
        let due = (self.state.n() - self.cfg.n0).is_multiple_of(self.cfg.check_every.max(1));
        if due && self.check_stop()? {
            self.finalize(true)?;
            return Ok(true);
        }
        Ok(false)
    }

    pub fn run_to_completion(&mut self) -> Result<(), SeqError> {
        while !self.step()? {}
        Ok(())
    }

    pub fn into_result(self) -> Option<ProcedureResult<T>> {
        self.result
    }

    fn check_stop(&mut self) -> Result<bool, SeqError> {
        match &self.cfg.ase {
            None => Ok(should_stop(&self.state, &self.cfg)),
            Some(ase_cfg) => {
                if !self.state.is_invertible() || self.state.n() <= self.cfg.p {
                    return Ok(false);
                }
                let beta = beta_hat(&self.state)?;
                let ase = shrinkage::shrink(&beta, self.state.n(), ase_cfg);
                let stop = shrinkage::should_stop_ase(&self.state, &ase, &self.cfg)?;
                self.last_ase = Some(ase);
                Ok(stop)
            }
        }
    }

    fn finalize(&mut self, stopped_naturally: bool) -> Result<(), SeqError> {
        let mut state = self.state.clone();
        if !state.is_invertible() {
            return Err(LinalgError::RankDeficient.into());
        }
        // Freeze from a refreshed factorization so downstream geometry sees
        // drift-free matrices.
        state.direct_refresh()?;
        let beta = beta_hat(&state)?;
        let sigma2 = sigma2_hat(&state)?;
        let (mu, indicator) = match &self.cfg.ase {
            None => (mu_n(&state)?, None),
            Some(ase_cfg) => {
                let ase = shrinkage::shrink(&beta, state.n(), ase_cfg);
                let mu = shrinkage::masked_mu(&state, &ase.indicator)?.unwrap_or(T::zero());
                (mu, Some(ase.indicator))
            }
        };
        self.result = Some(ProcedureResult {
            n_stop: state.n(),
            beta_hat: beta,
            sigma2_hat: sigma2,
            gram: state.gram().clone(),
            gram_inv: state.gram_inv().expect("refreshed above").clone(),
            mu,
            indicator,
            stopped_naturally,
        });
        Ok(())
    }
}

/// Runs one procedure to completion.
pub fn run_procedure<T: Scalar, R: Rng>(
    handle: PoolHandle<T>,
    cfg: ProcedureConfig<T>,
    rng: R,
) -> Result<ProcedureResult<T>, SeqError> {
    let mut runner = ProcedureRunner::new(cfg, handle, rng)?;
    runner.run_to_completion()?;
    Ok(runner.into_result().expect("completed run has a result"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pool::{partition, DataPool, PoolMode};
    use approx::assert_relative_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn state_from(rows: &[(Vec<f64>, f64)]) -> GramState<f64> {
        let p = rows[0].0.len();
        let mut st = GramState::new(p);
        for (x, y) in rows {
            st.rank_one_update(&DVector::from_vec(x.clone()), *y)
                .unwrap();
        }
        st
    }

    #[test]
    fn beta_hat_orthogonal_design() {
        let st = state_from(&[(vec![1.0, 0.0], 2.0), (vec![0.0, 1.0], -1.0)]);
        let b = beta_hat(&st).unwrap();
        assert_relative_eq!(b[0], 2.0, max_relative = 1e-12);
        assert_relative_eq!(b[1], -1.0, max_relative = 1e-12);
    }

    #[test]
    fn beta_hat_noise_free_recovery_and_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let beta0 = DVector::from_vec(vec![-1.0, 1.0]);
        let mut clean = GramState::new(2);
        let mut noisy = GramState::new(2);
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for _ in 0..50 {
            let x = DVector::from_vec(vec![1.0, rng.random_range(-3.0..3.0)]);
            let eps: f64 = StandardNormal.sample(&mut rng);
            clean.rank_one_update(&x, x.dot(&beta0)).unwrap();
            noisy.rank_one_update(&x, x.dot(&beta0) + eps).unwrap();
            xs.push(x);
            ys.push(beta0.dot(xs.last().unwrap()) + eps);
        }
        let b = beta_hat(&clean).unwrap();
        assert_relative_eq!(b[0], -1.0, epsilon = 1e-9);
        assert_relative_eq!(b[1], 1.0, epsilon = 1e-9);
        assert_relative_eq!(sigma2_hat(&clean).unwrap(), 0.0, epsilon = 1e-10);

        // Dense normal-equation solve as the oracle.
        let xmat = DMatrix::from_fn(50, 2, |i, j| xs[i][j]);
        let yvec = DVector::from_vec(ys);
        let oracle = (xmat.transpose() * &xmat).try_inverse().unwrap() * xmat.transpose() * yvec;
        assert_relative_eq!(beta_hat(&noisy).unwrap(), oracle, max_relative = 1e-10);
    }

    #[test]
    fn sigma2_matches_hand_residuals() {
        // Intercept + slope through (0,0), (1,1), (2,1): beta = (1/6, 1/2),
        // residuals (-1/6, 1/3, -1/6), RSS = 1/6, n - p = 1.
        let st = state_from(&[
            (vec![1.0, 0.0], 0.0),
            (vec![1.0, 1.0], 1.0),
            (vec![1.0, 2.0], 1.0),
        ]);
        assert_relative_eq!(sigma2_hat(&st).unwrap(), 1.0 / 6.0, max_relative = 1e-12);
    }

    #[test]
    fn sigma2_requires_more_rows_than_columns() {
        let st = state_from(&[(vec![1.0, 0.0], 2.0), (vec![0.0, 1.0], -1.0)]);
        assert!(matches!(
            sigma2_hat(&st),
            Err(SeqError::VarianceUndefined { n: 2, p: 2 })
        ));
    }

    #[test]
    fn sigma2_concentrates_on_unit_noise() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let beta0 = DVector::from_vec(vec![-1.0, 1.0]);
        let mut st = GramState::new(2);
        for _ in 0..10_000 {
            let z: f64 = StandardNormal.sample(&mut rng);
            let x = DVector::from_vec(vec![1.0, 1.0 + z]);
            let eps: f64 = StandardNormal.sample(&mut rng);
            st.rank_one_update(&x, x.dot(&beta0) + eps).unwrap();
        }
        let s2 = sigma2_hat(&st).unwrap();
        assert!((0.9..=1.1).contains(&s2), "sigma2 = {s2}");
    }

    #[test]
    fn mu_examples() {
        // gram/n = I.
        let st = state_from(&[
            (vec![2.0_f64.sqrt(), 0.0], 0.0),
            (vec![0.0, 2.0_f64.sqrt()], 0.0),
        ]);
        assert_relative_eq!(mu_n(&st).unwrap(), 1.0, max_relative = 1e-9);

        // gram/n = [[1,1],[1,2]] with n = 2: gram = [[2,2],[2,4]].
        let st = state_from(&[(vec![1.0, 0.0], 0.0), (vec![1.0, 2.0], 0.0)]);
        assert_relative_eq!(
            mu_n(&st).unwrap(),
            2.0 / (3.0 - 5.0_f64.sqrt()),
            max_relative = 1e-9
        );

        // gram/n = diag(4, 1/4) with n = 2.
        let st = state_from(&[
            (vec![8.0_f64.sqrt(), 0.0], 0.0),
            (vec![0.0, 0.5_f64.sqrt()], 0.0),
        ]);
        assert_relative_eq!(mu_n(&st).unwrap(), 4.0, max_relative = 1e-9);
    }

    #[test]
    fn stopping_inequality_examples() {
        let mu = 1.0 / ((3.0 - 5.0_f64.sqrt()) / 2.0);
        let a2 = crate::shrinkage::chi2_quantile(2, 0.95).unwrap();
        assert!(!stopping_inequality_holds(1.0, 100, mu, a2, 0.2));
        assert!(stopping_inequality_holds(1.0, 400, mu, a2, 0.2));
    }

    #[test]
    fn no_stop_before_n0() {
        let mut cfg = ProcedureConfig::<f64>::new(2, 10.0, 0.05, 1).unwrap();
        cfg.n0 = 50;
        // Generous d: the inequality itself would hold, but n < n0.
        let st = state_from(&[
            (vec![1.0, 0.0], 0.1),
            (vec![0.0, 1.0], -0.1),
            (vec![1.0, 1.0], 0.0),
        ]);
        assert!(!should_stop(&st, &cfg));
    }

    fn stream(seed: u64, n: usize) -> Vec<(DVector<f64>, f64)> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta0 = DVector::from_vec(vec![-1.0, 1.0]);
        (0..n)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                let x = DVector::from_vec(vec![1.0, 1.0 + z]);
                let eps: f64 = StandardNormal.sample(&mut rng);
                let y = x.dot(&beta0) + eps;
                (x, y)
            })
            .collect()
    }

    fn first_stop(rows: &[(DVector<f64>, f64)], cfg: &ProcedureConfig<f64>) -> usize {
        let mut st = GramState::new(cfg.p);
        for (x, y) in rows {
            st.rank_one_update(x, *y).unwrap();
            if should_stop(&st, cfg) {
                return st.n();
            }
        }
        panic!("stream too short");
    }

    #[test]
    fn stopping_time_monotone_in_d_and_threshold() {
        for seed in 0..10 {
            let rows = stream(seed, 5000);
            let coarse = ProcedureConfig::<f64>::new(2, 0.4, 0.05, 1).unwrap();
            let fine = ProcedureConfig::<f64>::new(2, 0.25, 0.05, 1).unwrap();
            assert!(first_stop(&rows, &coarse) <= first_stop(&rows, &fine));

            // Splitting the threshold across M = 4 procedures stops earlier
            // on the same path.
            let split = ProcedureConfig::<f64>::new(2, 0.4, 0.05, 4).unwrap();
            assert!(first_stop(&rows, &split) <= first_stop(&rows, &coarse));
        }
    }

    #[test]
    fn run_procedure_exhaustion() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let rows = stream(99, 7);
        let pool = DataPool::from_rows(rows.into_iter().collect());
        let mut handles = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        // d tiny so the criterion cannot be met with 7 rows.
        let cfg = ProcedureConfig::<f64>::new(2, 1e-3, 0.05, 1).unwrap();
        let res = run_procedure(handles.remove(0), cfg, rng).unwrap();
        assert!(!res.stopped_naturally);
        assert_eq!(res.n_stop, 7);
    }

    #[test]
    fn run_procedure_needs_n0_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let rows = stream(1, 4);
        let pool = DataPool::from_rows(rows.into_iter().collect());
        let mut handles = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
        let cfg = ProcedureConfig::<f64>::new(2, 0.5, 0.05, 1).unwrap();
        let err = run_procedure(handles.remove(0), cfg, rng).unwrap_err();
        assert!(matches!(err, SeqError::TooFewRows { need: 7, .. }));
    }

    #[test]
    fn stopping_times_exceed_bounds() {
        for seed in 100..110 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows = stream(seed, 5000);
            let pool = DataPool::from_rows(rows.into_iter().collect());
            let mut handles = partition(&pool, 1, PoolMode::Partitioned, &mut rng).unwrap();
            let cfg = ProcedureConfig::<f64>::new(2, 0.5, 0.05, 1).unwrap();
            let n0 = cfg.n0;
            let res = run_procedure(handles.remove(0), cfg, rng).unwrap();
            assert!(res.n_stop >= n0);
            assert!(res.n_stop > 2);
            assert!(res.stopped_naturally);
        }
    }
}
