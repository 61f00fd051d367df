//! Distributed sequential fixed-size confidence estimation for linear
//! regression: incremental least squares over a shared observation pool,
//! sequential stopping rules with random or D-optimal sample selection,
//! adaptive shrinkage variable selection, confidence-set aggregation across
//! procedures, and a Monte-Carlo experiment harness with a
//! divide-and-conquer baseline.
//!
//! Everything is generic over the floating-point scalar through [`Scalar`];
//! `f64` aliases live at the crate root.

pub mod aggregate;
pub mod linalg;
pub mod pool;
pub mod scalar;
pub mod seqcore;
pub mod shrinkage;
pub mod simlab;

pub use aggregate::{CombinedEstimate, ConfidenceEllipsoid};
pub use linalg::GramState;
pub use pool::{DataPool, Observation, PoolHandle, PoolMode};
pub use scalar::Scalar;
pub use seqcore::{ProcedureConfig, ProcedureResult, ProcedureRunner, Selection};
pub use shrinkage::{AseConfig, AseState};
pub use simlab::{Executor, RunReport, Scenario, ScenarioConfig};

pub type GramState64 = linalg::GramState<f64>;
pub type GramState32 = linalg::GramState<f32>;
pub type ProcedureConfig64 = seqcore::ProcedureConfig<f64>;
pub type ProcedureResult64 = seqcore::ProcedureResult<f64>;
pub type AseConfig64 = shrinkage::AseConfig<f64>;
pub type CombinedEstimate64 = aggregate::CombinedEstimate<f64>;
pub type ConfidenceEllipsoid64 = aggregate::ConfidenceEllipsoid<f64>;
pub type ScenarioConfig64 = simlab::ScenarioConfig<f64>;
pub type DataPool64 = pool::DataPool<f64>;
pub type PoolHandle64 = pool::PoolHandle<f64>;
