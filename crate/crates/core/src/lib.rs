pub mod cli;
pub mod error;
pub mod fdm_bayes;
pub mod fdm_det;
pub mod decompose;
pub mod ingest;
mod optim;
pub mod project;
pub mod schedule;
pub mod stats;
pub mod synthetic;
pub mod validate;

pub use error::{Error, Result};
