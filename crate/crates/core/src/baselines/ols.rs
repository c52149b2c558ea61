use ndarray::{concatenate, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::baselines::logistic::fit_logistic;
use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::linalg::{cholesky, cholesky_solve};
use crate::scalar::{sigmoid, Scalar};

/// Ridge penalty applied when the normal equations are rank deficient.
pub const RIDGE_FALLBACK: f64 = 1e-8;

/// `y ≈ intercept + x·coefficients [+ treatment_coef·t]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel<S> {
    pub coefficients: Vec<S>,
    pub intercept: S,
    /// Present for the S-learner, where treatment is a feature.
    pub treatment_coef: Option<S>,
    /// Set when the ridge fallback was needed.
    pub ridge_fallback: bool,
}

impl<S: Scalar> LinearModel<S> {
    pub fn predict(&self, x: ArrayView2<S>, t: Option<S>) -> Array1<S> {
        let beta = ArrayView1::from(&self.coefficients);
        let shift = self.intercept + self.treatment_coef.zip(t).map_or(S::zero(), |(c, t)| c * t);
        x.dot(&beta).mapv(|v| v + shift)
    }
}

/// Least squares on `[1 | features]` through the normal equations.
fn least_squares<S: Scalar>(features: ArrayView2<S>, y: ArrayView1<S>) -> Result<(Array1<S>, bool)> {
    let n = features.nrows();
    if n == 0 {
        return Err(CfrError::Size("least squares on zero rows".into()));
    }
    let design = concatenate(Axis(1), &[Array2::ones((n, 1)).view(), features]).map_err(|e| CfrError::Shape(e.to_string()))?;
    let mut gram = design.t().dot(&design);
    let rhs = design.t().dot(&y);
    if let Some(l) = cholesky(&gram, S::c(1e-12)) {
        return Ok((cholesky_solve(&l, &rhs), false));
    }
    let ridge = S::c(RIDGE_FALLBACK);
    for i in 0..gram.nrows() {
        gram[[i, i]] += ridge;
    }
    let l = cholesky(&gram, S::zero()).ok_or_else(|| CfrError::Numeric("normal equations singular even with ridge".into()))?;
    Ok((cholesky_solve(&l, &rhs), true))
}

/// OLS S-learner: one regression with treatment as a feature. Its CATE is
/// the treatment coefficient, constant in `x`.
pub fn fit_ols_s<S: Scalar>(ds: &ObservationalDataset<S>) -> Result<LinearModel<S>> {
    let tcol = Array2::from_shape_fn((ds.n(), 1), |(i, _)| S::of(ds.t[i] as usize));
    let features = concatenate(Axis(1), &[ds.x.view(), tcol.view()]).map_err(|e| CfrError::Shape(e.to_string()))?;
    let (beta, flagged) = least_squares(features.view(), ds.y.view())?;
    let d = ds.d();
    Ok(LinearModel {
        intercept: beta[0],
        coefficients: beta.slice(ndarray::s![1..=d]).to_vec(),
        treatment_coef: Some(beta[d + 1]),
        ridge_fallback: flagged,
    })
}

/// OLS T-learner: separate regressions per treatment group, `(control, treated)`.
pub fn fit_ols_t<S: Scalar>(ds: &ObservationalDataset<S>) -> Result<(LinearModel<S>, LinearModel<S>)> {
    let (c, t) = ds.treatment_groups();
    let fit = |idx: &[usize]| -> Result<LinearModel<S>> {
        if idx.is_empty() {
            return Err(CfrError::Size("T-learner needs both treatment groups".into()));
        }
        let x = ds.x.select(Axis(0), idx);
        let y = ds.y.select(Axis(0), idx);
        let (beta, flagged) = least_squares(x.view(), y.view())?;
        Ok(LinearModel {
            intercept: beta[0],
            coefficients: beta.slice(ndarray::s![1..]).to_vec(),
            treatment_coef: None,
            ridge_fallback: flagged,
        })
    };
    Ok((fit(&c)?, fit(&t)?))
}

/// Link used by the outcome baselines: plain linear regression, or logistic
/// regression for outcomes in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum OutcomeLink {
    #[default]
    Identity,
    Logistic,
}

impl std::str::FromStr for OutcomeLink {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "identity" | "linear" => Ok(OutcomeLink::Identity),
            "logistic" => Ok(OutcomeLink::Logistic),
            other => Err(CfrError::Config(format!("unknown outcome link '{other}' (identity, logistic)"))),
        }
    }
}

impl std::fmt::Display for OutcomeLink {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            OutcomeLink::Identity => "identity",
            OutcomeLink::Logistic => "logistic",
        })
    }
}

/// Fitted S- or T-learner baseline that predicts both potential outcomes.
#[derive(Debug, Clone, PartialEq)]
pub enum OutcomeModel<S> {
    SLearner { link: OutcomeLink, model: LinearModel<S> },
    TLearner { link: OutcomeLink, control: LinearModel<S>, treated: LinearModel<S> },
}

impl<S: Scalar> OutcomeModel<S> {
    /// `(yhat0, yhat1)` on the rows of `x`.
    pub fn predict_potential_outcomes(&self, x: ArrayView2<S>) -> (Array1<S>, Array1<S>) {
        let (link, a, b) = match self {
            OutcomeModel::SLearner { link, model } => (*link, model.predict(x, Some(S::zero())), model.predict(x, Some(S::one()))),
            OutcomeModel::TLearner { link, control, treated } => (*link, control.predict(x, None), treated.predict(x, None)),
        };
        match link {
            OutcomeLink::Identity => (a, b),
            OutcomeLink::Logistic => (a.mapv(sigmoid), b.mapv(sigmoid)),
        }
    }

    pub fn predict_cate(&self, x: ArrayView2<S>) -> Array1<S> {
        if let OutcomeModel::SLearner { link: OutcomeLink::Identity, model } = self {
            return Array1::from_elem(x.nrows(), model.treatment_coef.unwrap_or_else(S::zero));
        }
        let (a, b) = self.predict_potential_outcomes(x);
        b - a
    }
}

pub fn fit_outcome_s<S: Scalar>(ds: &ObservationalDataset<S>, link: OutcomeLink) -> Result<OutcomeModel<S>> {
    let model = match link {
        OutcomeLink::Identity => fit_ols_s(ds)?,
        OutcomeLink::Logistic => {
            let tcol = Array2::from_shape_fn((ds.n(), 1), |(i, _)| S::of(ds.t[i] as usize));
            let features = concatenate(Axis(1), &[ds.x.view(), tcol.view()]).map_err(|e| CfrError::Shape(e.to_string()))?;
            let fit = fit_logistic(features.view(), ds.y.view(), S::c(1e-6))?;
            let d = ds.d();
            LinearModel {
                intercept: fit.intercept,
                coefficients: fit.coefficients[..d].to_vec(),
                treatment_coef: Some(fit.coefficients[d]),
                ridge_fallback: false,
            }
        }
    };
    Ok(OutcomeModel::SLearner { link, model })
}

pub fn fit_outcome_t<S: Scalar>(ds: &ObservationalDataset<S>, link: OutcomeLink) -> Result<OutcomeModel<S>> {
    let (control, treated) = match link {
        OutcomeLink::Identity => fit_ols_t(ds)?,
        OutcomeLink::Logistic => {
            let (c, t) = ds.treatment_groups();
            let fit = |idx: &[usize]| -> Result<LinearModel<S>> {
                let x = ds.x.select(Axis(0), idx);
                let y = ds.y.select(Axis(0), idx);
                let f = fit_logistic(x.view(), y.view(), S::c(1e-6))?;
                Ok(LinearModel {
                    intercept: f.intercept,
                    coefficients: f.coefficients,
                    treatment_coef: None,
                    ridge_fallback: false,
                })
            };
            (fit(&c)?, fit(&t)?)
        }
    };
    Ok(OutcomeModel::TLearner { link, control, treated })
}
