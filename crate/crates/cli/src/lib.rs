//! Twin-experiment driver: configuration, artifact formats, manifest bookkeeping and
//! the pipeline stages behind the `mjoda` binary.

pub mod checkpoint;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;

pub use config::{ExperimentConfig, Forcing};
pub use error::{CliError, CliResult};
pub use pipeline::Method;
