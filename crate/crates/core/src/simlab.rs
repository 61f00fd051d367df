//! Synthetic scenarios, the Monte-Carlo experiment runner, and the
//! divide-and-conquer baseline.

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::aggregate::{
    combine, containment_violations, ellipsoid_approx, ellipsoid_ase, ellipsoid_exact, AggError,
};
use crate::linalg::{GramState, LinalgError};
use crate::pool::{partition, DataPool, PoolError, PoolMode};
use crate::scalar::Scalar;
use crate::seqcore::{
    beta_hat, ProcedureConfig, ProcedureResult, ProcedureRunner, Selection, SeqError,
};
use crate::shrinkage::AseConfig;

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Seq(#[from] SeqError),
    #[error(transparent)]
    Agg(#[from] AggError),
    #[error(transparent)]
    Pool(#[from] PoolError),
    #[error(transparent)]
    Linalg(#[from] LinalgError),
    #[error("invalid scenario: {0}")]
    InvalidConfig(String),
}

/// Built-in simulation scenarios.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    S1,
    S2,
    Ase1,
    Ase2,
}

impl std::fmt::Display for Scenario {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Scenario::S1 => "s1",
            Scenario::S2 => "s2",
            Scenario::Ase1 => "ase1",
            Scenario::Ase2 => "ase2",
        };
        f.write_str(s)
    }
}

/// Replication executor: round-robin stepping in a fixed order, or one
/// thread per procedure.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Executor {
    Sequential,
    Parallel,
}

/// Full experiment configuration.
#[derive(Debug, Clone)]
pub struct ScenarioConfig<T: Scalar> {
    pub scenario: Option<Scenario>,
    pub beta0: DVector<T>,
    /// Mean of every non-intercept covariate (unit variance throughout).
    pub covariate_mean: T,
    pub pool_size: usize,
    /// Contaminated rows added per clean row.
    pub contamination_rho: f64,
    /// Coefficients of the contaminating model.
    pub beta_noise: Option<DVector<T>>,
    pub m: usize,
    pub d: T,
    pub alpha: T,
    pub n0: Option<usize>,
    pub selection: Selection,
    pub ase: Option<AseConfig<T>>,
    pub pool_mode: PoolMode,
    pub executor: Executor,
    pub reps: usize,
    pub seed: u64,
    /// Per-replication confidence-set geometry checks (max-axis bound and
    /// boundary containment audit).
    pub audit_geometry: bool,
}

impl<T: Scalar> ScenarioConfig<T> {
    fn base(scenario: Scenario, beta0: Vec<f64>, covariate_mean: f64) -> Self {
        Self {
            scenario: Some(scenario),
            beta0: DVector::from_iterator(beta0.len(), beta0.into_iter().map(T::of)),
            covariate_mean: T::of(covariate_mean),
            pool_size: 6000,
            contamination_rho: 0.0,
            beta_noise: None,
            m: 1,
            d: T::of(0.2),
            alpha: T::of(0.05),
            n0: None,
            selection: Selection::Random,
            ase: None,
            pool_mode: PoolMode::Partitioned,
            executor: Executor::Sequential,
            reps: 500,
            seed: 0,
            audit_geometry: true,
        }
    }

    pub fn preset(scenario: Scenario) -> Self {
        match scenario {
            Scenario::S1 => {
                let mut cfg = Self::base(scenario, vec![-1.0, 1.0], 1.0);
                cfg.beta_noise = Some(DVector::from_iterator(2, [-5.0, 5.0].map(T::of)));
                cfg
            }
            Scenario::S2 => {
                let mut cfg = Self::base(scenario, vec![-1.0, 1.0, 0.7, 0.5, 0.2], 0.2);
                cfg.beta_noise = Some(DVector::from_iterator(
                    5,
                    [-5.0, 5.0, 5.0, 5.0, 5.0].map(T::of),
                ));
                cfg
            }
            Scenario::Ase1 => {
                let mut beta = vec![-2.0, 1.0, 1.5, 2.0];
                beta.resize(10, 0.0);
                let mut cfg = Self::base(scenario, beta, 0.2);
                cfg.m = 5;
                cfg.ase = Some(AseConfig::default());
                cfg
            }
            Scenario::Ase2 => {
                let mut beta = vec![-2.0, 2.0, 2.0, 2.0];
                beta.resize(50, 0.0);
                let mut cfg = Self::base(scenario, beta, 0.2);
                cfg.m = 5;
                cfg.ase = Some(AseConfig::default());
                cfg
            }
        }
    }

    pub fn p(&self) -> usize {
        self.beta0.len()
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.p() == 0 || self.m == 0 || self.reps == 0 {
            return Err(SimError::InvalidConfig(
                "dimension, m, and reps must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.contamination_rho) {
            return Err(SimError::InvalidConfig(
                "contamination rho must lie in [0, 1)".into(),
            ));
        }
        if self.contamination_rho > 0.0 {
            match &self.beta_noise {
                Some(bn) if bn.len() == self.p() => {}
                Some(_) => {
                    return Err(SimError::InvalidConfig(
                        "beta_noise dimension differs from beta0".into(),
                    ))
                }
                None => {
                    return Err(SimError::InvalidConfig(
                        "contamination requested but beta_noise unset".into(),
                    ))
                }
            }
        }
        Ok(())
    }

    fn procedure_config(&self) -> Result<ProcedureConfig<T>, SimError> {
        let mut pc = ProcedureConfig::new(self.p(), self.d, self.alpha, self.m)?;
        if let Some(n0) = self.n0 {
            pc = pc.with_n0(n0);
        }
        pc.selection = self.selection;
        pc.ase = self.ase.clone();
        pc.validate()?;
        Ok(pc)
    }
}

/// Rows from the linear model: intercept, normal covariates with unit
/// variance, and `y = x'beta + noise_sd * N(0,1)`.
pub fn gen_rows<T: Scalar, R: Rng>(
    beta: &DVector<T>,
    covariate_mean: T,
    noise_sd: T,
    n: usize,
    rng: &mut R,
) -> Vec<(DVector<T>, T)> {
    let p = beta.len();
    (0..n)
        .map(|_| {
            let x = DVector::from_fn(p, |k, _| {
                if k == 0 {
                    T::one()
                } else {
                    covariate_mean + T::of(StandardNormal.sample(rng))
                }
            });
            let y = x.dot(beta) + noise_sd * T::of(StandardNormal.sample(rng));
            (x, y)
        })
        .collect()
}

pub fn gen_clean<T: Scalar, R: Rng>(
    cfg: &ScenarioConfig<T>,
    n: usize,
    rng: &mut R,
) -> Vec<(DVector<T>, T)> {
    gen_rows(&cfg.beta0, cfg.covariate_mean, T::one(), n, rng)
}

/// The full observation pool: `pool_size` clean rows plus
/// `round(rho * pool_size)` rows from the contaminating model, shuffled.
pub fn gen_pool<T: Scalar, R: Rng>(
    cfg: &ScenarioConfig<T>,
    rng: &mut R,
) -> Result<Vec<(DVector<T>, T)>, SimError> {
    cfg.validate()?;
    let mut rows = gen_clean(cfg, cfg.pool_size, rng);
    let extra = (cfg.contamination_rho * cfg.pool_size as f64).round() as usize;
    if extra > 0 {
        let bn = cfg.beta_noise.as_ref().expect("validated");
        rows.extend(gen_rows(bn, cfg.covariate_mean, T::one(), extra, rng));
        rows.shuffle(rng);
    }
    Ok(rows)
}

/// Squared error and absolute deviation, both summed over coordinates.
pub fn metrics<T: Scalar>(beta_hat: &DVector<T>, beta0: &DVector<T>) -> (T, T) {
    assert_eq!(beta_hat.len(), beta0.len(), "dimension mismatch");
    let diff = beta_hat - beta0;
    (
        diff.iter().map(|&v| v * v).sum(),
        diff.iter().map(|&v| v.abs()).sum(),
    )
}

/// Averaged Monte-Carlo report. Key names match the CLI's JSON schema;
/// timing stays out of the serialized form so reports are reproducible
/// byte for byte.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    /// Mean total stopping time `N*` (or pool size for the DC baseline).
    pub n_stop: f64,
    pub n_stop_sd: f64,
    pub coverage_exact: Option<f64>,
    pub coverage_approx: Option<f64>,
    pub coverage_ase: Option<f64>,
    /// Mean squared error of the combined estimate.
    pub se: f64,
    pub se_sd: f64,
    /// Mean absolute deviation of the combined estimate.
    pub ad: f64,
    pub p0_hat: Option<f64>,
    pub p0_hat_sd: Option<f64>,
    /// Per-procedure mean stopping times.
    pub per_procedure: Vec<f64>,
    pub reps: usize,
    pub seed: u64,
    /// Replications where some procedure ran out of data.
    pub exhausted_reps: usize,
    /// Max-axis bound breaches across all audited replications.
    pub geometry_violations: usize,
    /// Boundary points of the approximate set found outside the exact set.
    pub containment_violations: usize,
    #[serde(skip)]
    pub secs_per_rep: f64,
}

struct RepRecord {
    n_star: usize,
    per_proc: Vec<usize>,
    covered_exact: Option<bool>,
    covered_approx: Option<bool>,
    covered_ase: Option<bool>,
    se: f64,
    ad: f64,
    p0_hat: Option<usize>,
    exhausted: bool,
    geometry_violations: usize,
    containment_violations: usize,
}

fn lane_rng(seed: u64, rep: usize, lane: usize, lanes: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 * lanes as u64 + lane as u64);
    rng
}

fn run_procedures<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    pc: &ProcedureConfig<T>,
    rep: usize,
    lanes: usize,
    pool: &std::sync::Arc<DataPool<T>>,
) -> Result<Vec<ProcedureResult<T>>, SimError> {
    let mut part_rng = lane_rng(cfg.seed, rep, 0, lanes);
    let handles = partition(pool, cfg.m, cfg.pool_mode, &mut part_rng)?;
    match cfg.executor {
        Executor::Sequential => {
            let mut runners = Vec::with_capacity(cfg.m);
            for (j, handle) in handles.into_iter().enumerate() {
                let rng = lane_rng(cfg.seed, rep, 1 + j, lanes);
                runners.push(ProcedureRunner::new(pc.clone(), handle, rng)?);
            }
            loop {
                let mut all_done = true;
                for runner in &mut runners {
                    if !runner.step()? {
                        all_done = false;
                    }
                }
                if all_done {
                    break;
                }
            }
            Ok(runners
                .into_iter()
                .map(|r| r.into_result().expect("finished"))
                .collect())
        }
        Executor::Parallel => {
            let results = std::thread::scope(|scope| {
                let joins: Vec<_> = handles
                    .into_iter()
                    .enumerate()
                    .map(|(j, handle)| {
                        let pc = pc.clone();
                        let rng = lane_rng(cfg.seed, rep, 1 + j, lanes);
                        scope.spawn(move || -> Result<ProcedureResult<T>, SimError> {
                            let mut runner = ProcedureRunner::new(pc, handle, rng)?;
                            runner.run_to_completion()?;
                            Ok(runner.into_result().expect("finished"))
                        })
                    })
                    .collect();
                joins
                    .into_iter()
                    .map(|j| j.join().expect("procedure thread panicked"))
                    .collect::<Result<Vec<_>, _>>()
            })?;
            Ok(results)
        }
    }
}

fn run_psm_rep<T: Scalar>(
    cfg: &ScenarioConfig<T>,
    pc: &ProcedureConfig<T>,
    rep: usize,
) -> Result<RepRecord, SimError> {
    let lanes = cfg.m + 2;
    let mut pool_rng = lane_rng(cfg.seed, rep, cfg.m + 1, lanes);
    let pool = DataPool::from_rows(gen_pool(cfg, &mut pool_rng)?);
    let results = run_procedures(cfg, pc, rep, lanes, &pool)?;

    let est = combine(&results)?;
    let (se, ad) = metrics(&est.beta, &cfg.beta0);
    let exhausted = results.iter().any(|r| !r.stopped_naturally);
    let mut rec = RepRecord {
        n_star: est.n_star,
        per_proc: results.iter().map(|r| r.n_stop).collect(),
        covered_exact: None,
        covered_approx: None,
        covered_ase: None,
        se: se.as_f64(),
        ad: ad.as_f64(),
        p0_hat: None,
        exhausted,
        geometry_violations: 0,
        containment_violations: 0,
    };
    if cfg.ase.is_some() {
        let set = ellipsoid_ase(&results, cfg.d)?;
        rec.covered_ase = Some(set.contains(&cfg.beta0));
        rec.p0_hat = Some(
            est.indicator
                .as_ref()
                .expect("shrinkage mode")
                .iter()
                .filter(|&&k| k)
                .count(),
        );
    } else {
        let exact = ellipsoid_exact(&results, cfg.d)?;
        let approx = ellipsoid_approx(&results, cfg.d)?;
        rec.covered_exact = Some(exact.contains(&cfg.beta0));
        rec.covered_approx = Some(approx.contains(&cfg.beta0));
        if cfg.audit_geometry {
            let bound = (T::of(2.0) * cfg.d + T::of(1e-9)).as_f64();
            for set in [&exact, &approx] {
                if set.max_axis()?.as_f64() > bound {
                    rec.geometry_violations += 1;
                }
            }
            let mut audit_rng = lane_rng(cfg.seed, rep, cfg.m + 1, lanes);
            audit_rng.set_stream(u64::MAX - rep as u64);
            rec.containment_violations =
                containment_violations(&approx, &exact, 100, &mut audit_rng)?;
        }
    }
    Ok(rec)
}

fn summarize(
    records: Vec<RepRecord>,
    cfg_reps: usize,
    seed: u64,
    secs: f64,
    m: usize,
) -> RunReport {
    let n = records.len() as f64;
    let mean = |f: &dyn Fn(&RepRecord) -> f64| records.iter().map(f).sum::<f64>() / n;
    let sd = |f: &dyn Fn(&RepRecord) -> f64, mu: f64| {
        if records.len() < 2 {
            0.0
        } else {
            (records.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        }
    };
    let coverage = |f: &dyn Fn(&RepRecord) -> Option<bool>| {
        let hits: Vec<bool> = records.iter().filter_map(f).collect();
        if hits.is_empty() {
            None
        } else {
            Some(hits.iter().filter(|&&h| h).count() as f64 / hits.len() as f64)
        }
    };
    let mean_n = mean(&|r| r.n_star as f64);
    let mean_se = mean(&|r| r.se);
    let p0: Vec<f64> = records
        .iter()
        .filter_map(|r| r.p0_hat.map(|v| v as f64))
        .collect();
    let (p0_mean, p0_sd) = if p0.is_empty() {
        (None, None)
    } else {
        let mu = p0.iter().sum::<f64>() / p0.len() as f64;
        let var = if p0.len() < 2 {
            0.0
        } else {
            p0.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (p0.len() as f64 - 1.0)
        };
        (Some(mu), Some(var.sqrt()))
    };
    RunReport {
        n_stop: mean_n,
        n_stop_sd: sd(&|r| r.n_star as f64, mean_n),
        coverage_exact: coverage(&|r| r.covered_exact),
        coverage_approx: coverage(&|r| r.covered_approx),
        coverage_ase: coverage(&|r| r.covered_ase),
        se: mean_se,
        se_sd: sd(&|r| r.se, mean_se),
        ad: mean(&|r| r.ad),
        p0_hat: p0_mean,
        p0_hat_sd: p0_sd,
        per_procedure: (0..m)
            .map(|j| mean(&|r| r.per_proc.get(j).copied().unwrap_or(0) as f64))
            .collect(),
        reps: cfg_reps,
        seed,
        exhausted_reps: records.iter().filter(|r| r.exhausted).count(),
        geometry_violations: records.iter().map(|r| r.geometry_violations).sum(),
        containment_violations: records.iter().map(|r| r.containment_violations).sum(),
        secs_per_rep: secs / n.max(1.0),
    }
}

/// Runs the full Monte-Carlo experiment. Replications are independent and
/// run on the rayon pool; each derives its own RNG streams from the seed,
/// so the report does not depend on scheduling.
pub fn run_psm_experiment<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<RunReport, SimError> {
    cfg.validate()?;
    let pc = cfg.procedure_config()?;
    let start = std::time::Instant::now();
    let records: Vec<RepRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| run_psm_rep(cfg, &pc, rep))
        .collect::<Result<_, _>>()?;
    Ok(summarize(
        records,
        cfg.reps,
        cfg.seed,
        start.elapsed().as_secs_f64(),
        cfg.m,
    ))
}

/// Divide-and-conquer baseline: the full pool is split into `m` equal
/// partitions, each fitted by least squares, and the fits averaged without
/// weights. Rank-deficient partitions are dropped from the average.
pub fn run_dc<T: Scalar>(cfg: &ScenarioConfig<T>) -> Result<RunReport, SimError> {
    cfg.validate()?;
    let p = cfg.p();
    let start = std::time::Instant::now();
    let records: Vec<RepRecord> = (0..cfg.reps)
        .into_par_iter()
        .map(|rep| -> Result<RepRecord, SimError> {
            // One stream per replication, independent of the partition
            // count, so DC runs at different m are paired on the same data.
            let mut rng = lane_rng(cfg.seed, rep, 0, 1);
            let rows = gen_pool(cfg, &mut rng)?;
            let total = rows.len();
            let base = total / cfg.m;
            let extra = total % cfg.m;
            let mut fits = Vec::with_capacity(cfg.m);
            let mut failed = 0usize;
            let mut offset = 0usize;
            for j in 0..cfg.m {
                let size = base + usize::from(j < extra);
                let mut st = GramState::new(p);
                for (x, y) in &rows[offset..offset + size] {
                    st.rank_one_update(x, *y)?;
                }
                offset += size;
                if size < p + 2 || !st.is_invertible() {
                    failed += 1;
                    continue;
                }
                fits.push(beta_hat(&st)?);
            }
            if fits.is_empty() {
                return Err(SimError::InvalidConfig(
                    "every DC partition was rank deficient".into(),
                ));
            }
            let mut avg = DVector::<T>::zeros(p);
            for f in &fits {
                avg += f;
            }
            avg /= T::of_usize(fits.len());
            let (se, ad) = metrics(&avg, &cfg.beta0);
            Ok(RepRecord {
                n_star: total,
                per_proc: Vec::new(),
                covered_exact: None,
                covered_approx: None,
                covered_ase: None,
                se: se.as_f64(),
                ad: ad.as_f64(),
                p0_hat: None,
                exhausted: failed > 0,
                geometry_violations: 0,
                containment_violations: 0,
            })
        })
        .collect::<Result<_, _>>()?;
    Ok(summarize(
        records,
        cfg.reps,
        cfg.seed,
        start.elapsed().as_secs_f64(),
        0,
    ))
}
