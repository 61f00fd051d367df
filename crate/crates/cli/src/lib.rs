//! Library surface of the `psm` binary, split out so the ingestion and
//! reporting pieces are unit-testable.

pub mod app;
pub mod dataset;
pub mod output;

pub use app::{run, AppError, Cli};
