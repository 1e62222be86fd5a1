//! Command implementations behind the `vsod` binary.

pub mod ablate;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod optim;
pub mod train;

pub use config::RunConfig;
pub use error::{Result, RunError};
