pub mod constrained;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod nn;
pub mod observation;
pub mod rl;
pub mod rng;
pub mod skeleton;
mod spectral;

pub use error::{Error, Result};
