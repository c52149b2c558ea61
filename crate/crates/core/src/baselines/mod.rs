//! Classical comparison estimators and propensity machinery.

pub(crate) mod knn;
mod logistic;
mod ols;
mod weights;

pub use knn::knn_cate;
pub use logistic::{fit_logistic, fit_propensity, LogisticFit, PropensityModel, PROPENSITY_L2};
pub use ols::{fit_ols_s, fit_ols_t, fit_outcome_s, fit_outcome_t, LinearModel, OutcomeLink, OutcomeModel, RIDGE_FALLBACK};
pub use weights::{balancing_weights, normalize_group_means, BalancingWeights};
