//! Driver for counterfactual regression experiments: data generation,
//! training, sweeps, evaluation, baselines, gradient checks and figure data.

pub mod config;
pub mod experiment;

pub use config::RunConfig;

use cfr_core::{CfrError, ErrorClass};

/// Process exit code for an error: 2 configuration, 3 data, 4 numerical.
pub fn exit_code(err: &CfrError) -> i32 {
    match err.class() {
        ErrorClass::Config => 2,
        ErrorClass::Data => 3,
        ErrorClass::Numeric => 4,
    }
}
