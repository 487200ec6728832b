//! Experiment layer for `t1t2-core`: INI configs, IDX datasets, CSV/JSON
//! outputs, grid search, paired reruns and the hypergradient oracle check.

pub mod config;
pub mod error;
pub mod idx;
pub mod output;
pub mod runner;

pub use error::{LabError, Result};
