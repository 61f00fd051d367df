//! Command definitions and orchestration.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use psm_core::aggregate::{combine, ellipsoid_approx, ellipsoid_ase, ellipsoid_exact};
use psm_core::pool::{partition, DataPool};
use psm_core::seqcore::ProcedureRunner;
use psm_core::simlab::{run_dc, run_psm_experiment};
use psm_core::{
    AseConfig64, Executor, PoolMode, ProcedureConfig64, ProcedureResult64, RunReport, Scenario,
    ScenarioConfig64, Selection,
};

use crate::dataset::{load_csv, DataError};
use crate::output::{emit, fmt_num, fmt_opt, kv_table, run_report_table};

#[derive(Debug, Error)]
pub enum AppError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Sim(#[from] psm_core::simlab::SimError),
    #[error(transparent)]
    Seq(#[from] psm_core::seqcore::SeqError),
    #[error(transparent)]
    Agg(#[from] psm_core::aggregate::AggError),
    #[error(transparent)]
    Pool(#[from] psm_core::pool::PoolError),
    #[error("cannot serialize report: {0}")]
    Json(#[from] serde_json::Error),
    #[error("cannot write output: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Parser)]
#[command(
    name = "psm",
    version,
    about = "Parallel sequential fixed-size confidence estimation for linear regression"
)]
pub struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Monte-Carlo study on a built-in scenario.
    Simulate(SimulateArgs),
    /// Fit a CSV dataset with M sequential procedures.
    Fit(FitArgs),
    /// Side-by-side sequential vs divide-and-conquer comparison.
    CompareDc(CompareDcArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    S1,
    S2,
    Ase1,
    Ase2,
}

impl From<ScenarioArg> for Scenario {
    fn from(v: ScenarioArg) -> Self {
        match v {
            ScenarioArg::S1 => Scenario::S1,
            ScenarioArg::S2 => Scenario::S2,
            ScenarioArg::Ase1 => Scenario::Ase1,
            ScenarioArg::Ase2 => Scenario::Ase2,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionArg {
    Random,
    Doptimal,
}

impl From<SelectionArg> for Selection {
    fn from(v: SelectionArg) -> Self {
        match v {
            SelectionArg::Random => Selection::Random,
            SelectionArg::Doptimal => Selection::DOptimal,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PoolArg {
    Partitioned,
    Shared,
}

impl From<PoolArg> for PoolMode {
    fn from(v: PoolArg) -> Self {
        match v {
            PoolArg::Partitioned => PoolMode::Partitioned,
            PoolArg::Shared => PoolMode::Shared,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ExecutorArg {
    Sequential,
    Parallel,
}

impl From<ExecutorArg> for Executor {
    fn from(v: ExecutorArg) -> Self {
        match v {
            ExecutorArg::Sequential => Executor::Sequential,
            ExecutorArg::Parallel => Executor::Parallel,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Json,
    Table,
}

#[derive(Args, Clone)]
struct OutputFlags {
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "table")]
    format: FormatArg,
}

#[derive(Args, Clone)]
struct ProcedureFlags {
    /// Precision index: half-length bound on the confidence set's widest axis.
    #[arg(long)]
    d: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Number of concurrent procedures.
    #[arg(long)]
    m: Option<usize>,
    /// Initial sample size per procedure (default p + 5).
    #[arg(long)]
    n0: Option<usize>,
    #[arg(long, value_enum)]
    selection: Option<SelectionArg>,
    /// Pool sharing mode across procedures.
    #[arg(long = "pool", value_enum)]
    pool_mode: Option<PoolArg>,
    /// Enable adaptive shrinkage variable selection.
    #[arg(long)]
    ase: bool,
    #[arg(long)]
    gamma: Option<f64>,
    #[arg(long)]
    epsilon: Option<f64>,
    /// Exponent c of the shrinkage penalty scale n^(-c).
    #[arg(long)]
    lambda_exponent: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ProcedureFlags {
    fn ase_config(&self, base: Option<AseConfig64>) -> Option<AseConfig64> {
        let mut cfg = match (self.ase, base) {
            (false, None) => return None,
            (_, Some(cfg)) => cfg,
            (true, None) => AseConfig64::default(),
        };
        if let Some(g) = self.gamma {
            cfg.gamma = g;
        }
        if let Some(e) = self.epsilon {
            cfg.epsilon = e;
        }
        if let Some(c) = self.lambda_exponent {
            cfg.lambda_exponent = c;
        }
        Some(cfg)
    }
}

#[derive(Args, Clone)]
struct SimFlags {
    #[arg(long, value_enum)]
    scenario: ScenarioArg,
    #[command(flatten)]
    procedure: ProcedureFlags,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long)]
    pool_size: Option<usize>,
    /// Fraction of contaminated rows added to the pool.
    #[arg(long)]
    contamination_rho: Option<f64>,
    #[arg(long, value_enum)]
    executor: Option<ExecutorArg>,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    sim: SimFlags,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Args)]
struct CompareDcArgs {
    #[command(flatten)]
    sim: SimFlags,
    /// Partition count for the divide-and-conquer baseline (defaults to --m).
    #[arg(long)]
    dc_m: Option<usize>,
    #[command(flatten)]
    output: OutputFlags,
}

#[derive(Args)]
struct FitArgs {
    #[arg(long)]
    csv: PathBuf,
    /// Response column name.
    #[arg(long)]
    response: String,
    /// Covariate column names (comma separated; default: all other columns).
    #[arg(long, value_delimiter = ',')]
    covariates: Vec<String>,
    /// Z-score covariates and response before fitting.
    #[arg(long, default_value_t = true, action = clap::ArgAction::Set)]
    standardize: bool,
    /// Prepend a constant-one column.
    #[arg(long)]
    intercept: bool,
    #[command(flatten)]
    procedure: ProcedureFlags,
    #[command(flatten)]
    output: OutputFlags,
}

fn resolve_seed(seed: Option<u64>) -> u64 {
    match seed {
        Some(s) => s,
        None => {
            let s: u64 = rand::random();
            eprintln!("seed: {s}");
            s
        }
    }
}

fn scenario_config(flags: &SimFlags) -> ScenarioConfig64 {
    let mut cfg = ScenarioConfig64::preset(flags.scenario.into());
    let p = &flags.procedure;
    if let Some(d) = p.d {
        cfg.d = d;
    }
    if let Some(a) = p.alpha {
        cfg.alpha = a;
    }
    if let Some(m) = p.m {
        cfg.m = m;
    }
    cfg.n0 = p.n0;
    if let Some(s) = p.selection {
        cfg.selection = s.into();
    }
    if let Some(mode) = p.pool_mode {
        cfg.pool_mode = mode.into();
    }
    cfg.ase = p.ase_config(cfg.ase.take());
    if let Some(r) = flags.reps {
        cfg.reps = r;
    }
    if let Some(size) = flags.pool_size {
        cfg.pool_size = size;
    }
    if let Some(rho) = flags.contamination_rho {
        cfg.contamination_rho = rho;
    }
    if let Some(e) = flags.executor {
        cfg.executor = e.into();
    }
    cfg.seed = resolve_seed(p.seed);
    cfg
}

fn emit_report<T: Serialize>(
    report: &T,
    table: String,
    output: &OutputFlags,
) -> Result<(), AppError> {
    let text = match output.format {
        FormatArg::Json => serde_json::to_string_pretty(report)? + "\n",
        FormatArg::Table => table,
    };
    emit(&text, output.out.as_deref())?;
    Ok(())
}

fn cmd_simulate(args: &SimulateArgs) -> Result<(), AppError> {
    let cfg = scenario_config(&args.sim);
    let report = run_psm_experiment(&cfg)?;
    emit_report(&report, run_report_table(&report), &args.output)
}

#[derive(Serialize)]
struct CompareReport {
    psm: RunReport,
    dc: RunReport,
}

fn compare_table(r: &CompareReport) -> String {
    let row = |name: &str, rep: &RunReport| {
        format!(
            "{name:<6}{:>14}{:>14}{:>14}{:>14}\n",
            fmt_num(rep.n_stop),
            fmt_num(rep.se),
            fmt_num(rep.ad),
            fmt_opt(rep.coverage_exact)
        )
    };
    let mut out = format!(
        "{:<6}{:>14}{:>14}{:>14}{:>14}\n",
        "method", "n", "se", "ad", "coverage"
    );
    out.push_str(&row("psm", &r.psm));
    out.push_str(&row("dc", &r.dc));
    out
}

fn cmd_compare_dc(args: &CompareDcArgs) -> Result<(), AppError> {
    let cfg = scenario_config(&args.sim);
    let psm = run_psm_experiment(&cfg)?;
    let mut dc_cfg = cfg.clone();
    dc_cfg.m = args.dc_m.unwrap_or(cfg.m);
    let dc = run_dc(&dc_cfg)?;
    let report = CompareReport { psm, dc };
    emit_report(&report, compare_table(&report), &args.output)
}

#[derive(Serialize)]
struct Coefficient {
    name: String,
    estimate: f64,
}

#[derive(Serialize)]
struct ProcedureSummary {
    n_stop: usize,
    sigma2_hat: f64,
    /// False marks a procedure that ran out of data before its criterion held.
    stopped_naturally: bool,
}

#[derive(Serialize)]
struct FitReport {
    n_total: usize,
    rows_dropped: usize,
    n_stop: usize,
    sigma2_hat: f64,
    coefficients: Vec<Coefficient>,
    /// Kept columns in shrinkage mode.
    selected: Option<Vec<String>>,
    p0_hat: Option<usize>,
    max_axis: f64,
    radius: f64,
    per_procedure: Vec<ProcedureSummary>,
    exhausted: bool,
    standardized: bool,
    seed: u64,
}

fn fit_table(r: &FitReport) -> String {
    let mut pairs = vec![
        ("n_total".to_owned(), r.n_total.to_string()),
        ("n_stop".to_owned(), r.n_stop.to_string()),
        ("sigma2_hat".to_owned(), fmt_num(r.sigma2_hat)),
        ("max_axis".to_owned(), fmt_num(r.max_axis)),
        ("p0_hat".to_owned(), fmt_opt(r.p0_hat.map(|v| v as f64))),
        ("exhausted".to_owned(), r.exhausted.to_string()),
    ];
    for c in &r.coefficients {
        pairs.push((format!("beta[{}]", c.name), fmt_num(c.estimate)));
    }
    for (j, p) in r.per_procedure.iter().enumerate() {
        pairs.push((format!("n_stop[{j}]"), p.n_stop.to_string()));
    }
    let mut out = kv_table(&pairs);
    if let Some(selected) = &r.selected {
        out.push_str(&format!("selected: {}\n", selected.join(", ")));
    }
    if r.exhausted {
        out.push_str("* stopping criterion not satisfied before the data ran out\n");
    }
    out
}

fn cmd_fit(args: &FitArgs) -> Result<(), AppError> {
    let ds = load_csv(
        &args.csv,
        &args.response,
        &args.covariates,
        args.standardize,
        args.intercept,
    )?;
    let seed = resolve_seed(args.procedure.seed);
    let p = ds.p();
    let m = args.procedure.m.unwrap_or(1);
    let mut pc = ProcedureConfig64::new(
        p,
        args.procedure.d.unwrap_or(0.2),
        args.procedure.alpha.unwrap_or(0.05),
        m,
    )?;
    if let Some(n0) = args.procedure.n0 {
        pc = pc.with_n0(n0);
    }
    pc.selection = args
        .procedure
        .selection
        .map(Selection::from)
        .unwrap_or(Selection::Random);
    pc.ase = args.procedure.ase_config(None);
    pc.validate()?;
    let mode = args
        .procedure
        .pool_mode
        .map(PoolMode::from)
        .unwrap_or(PoolMode::Partitioned);

    let pool = DataPool::from_rows(ds.rows.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let handles = partition(&pool, m, mode, &mut rng)?;
    let mut results: Vec<ProcedureResult64> = Vec::with_capacity(m);
    for (j, handle) in handles.into_iter().enumerate() {
        let mut proc_rng = ChaCha8Rng::seed_from_u64(seed);
        proc_rng.set_stream(1 + j as u64);
        let mut runner = ProcedureRunner::new(pc.clone(), handle, proc_rng)?;
        runner.run_to_completion()?;
        results.push(runner.into_result().expect("completed"));
    }

    let est = combine(&results)?;
    let d = pc.d;
    let set = if pc.ase.is_some() {
        ellipsoid_ase(&results, d)?
    } else {
        ellipsoid_exact(&results, d)?
    };
    // The approximate set is cheap insurance that the geometry holds.
    if pc.ase.is_none() {
        let _ = ellipsoid_approx(&results, d)?;
    }
    let sigma2 = results
        .iter()
        .zip(&est.weights)
        .map(|(r, w)| w * r.sigma2_hat)
        .sum::<f64>();
    let selected = est.indicator.as_ref().map(|ind| {
        ds.names
            .iter()
            .zip(ind)
            .filter(|(_, &keep)| keep)
            .map(|(n, _)| n.clone())
            .collect::<Vec<_>>()
    });
    let report = FitReport {
        n_total: ds.n(),
        rows_dropped: ds.dropped,
        n_stop: est.n_star,
        sigma2_hat: sigma2,
        coefficients: ds
            .names
            .iter()
            .zip(est.beta.iter())
            .map(|(name, &estimate)| Coefficient {
                name: name.clone(),
                estimate,
            })
            .collect(),
        p0_hat: est
            .indicator
            .as_ref()
            .map(|ind| ind.iter().filter(|&&k| k).count()),
        selected,
        max_axis: set.max_axis()?,
        radius: set.radius,
        per_procedure: results
            .iter()
            .map(|r| ProcedureSummary {
                n_stop: r.n_stop,
                sigma2_hat: r.sigma2_hat,
                stopped_naturally: r.stopped_naturally,
            })
            .collect(),
        exhausted: results.iter().any(|r| !r.stopped_naturally),
        standardized: args.standardize,
        seed,
    };
    if report.exhausted {
        eprintln!("warning: stopping criterion not satisfied before the data ran out");
    }
    emit_report(&report, fit_table(&report), &args.output)
}

pub fn run(cli: Cli) -> Result<(), AppError> {
    match &cli.command {
        Command::Simulate(args) => cmd_simulate(args),
        Command::Fit(args) => cmd_fit(args),
        Command::CompareDc(args) => cmd_compare_dc(args),
    }
}
