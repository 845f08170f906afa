//! Constrained batch Bayesian optimization of plasma-spray process parameters.

pub mod acquisition;
pub mod api;
pub mod campaign;
pub mod error;
pub mod gp;
mod optim;
pub mod optimizer;
pub mod oracle;
pub mod process;

pub use error::{Error, Result};
