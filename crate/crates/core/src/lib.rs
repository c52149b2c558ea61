//! Counterfactual regression for conditional average treatment effects.
//!
//! Numerical code is generic over [`scalar::Scalar`]; the aliases below fix
//! the scalar to `f64`, which is what the tests and the command-line driver
//! use.

pub mod baselines;
pub mod data;
pub mod error;
pub mod evaluation;
pub mod ipm;
mod linalg;
pub mod nnet;
pub mod rng;
pub mod scalar;
pub mod synth;
pub mod training;

pub use data::{split_dataset, standardize, DatasetSplit};
pub use error::{CfrError, ErrorClass, Result};
pub use evaluation::EvaluationReport;
pub use ipm::{IpmConfig, IpmKind};
pub use nnet::{init_model, Architecture};
pub use scalar::Scalar;
pub use training::{ObjectiveConfig, TrainConfig, TrainHistory, Weighting};

pub type Real = f64;
pub type Dataset = data::ObservationalDataset<Real>;
pub type Model = nnet::CfrModel<Real>;
pub type Standardizer = data::Standardizer<Real>;
pub type TrainOutcome = training::TrainOutcome<Real>;
pub type BoundInputs<'a> = evaluation::BoundInputs<'a, Real>;
