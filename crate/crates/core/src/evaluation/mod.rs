//! Evaluation criteria: CATE error against known potential outcomes,
//! ATE/ATT error, policy risk, the nearest-neighbour surrogate used for
//! model selection, and empirical bound components.

mod bound;
mod policy;

use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::baselines::knn::k_nearest;
use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

pub use bound::{bound_diagnostics, BoundDiagnostics, BoundInputs};
pub use policy::{
    policy_curve, policy_risk, policy_risk_for, write_policy_curve_csv, PolicyCurvePoint, PolicyRiskEstimate,
    PolicyRiskForm,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SampleScope {
    WithinSample,
    OutOfSample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRiskPoint {
    pub threshold: f64,
    pub inclusion_rate: f64,
    pub risk: f64,
    pub effective_sample_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub sample_scope: SampleScope,
    pub n: usize,
    /// Mean squared CATE error (PEHE, squared).
    pub mse_cate: Option<f64>,
    /// Square root of `mse_cate`.
    pub rmse_cate: Option<f64>,
    pub mse_ate: Option<f64>,
    pub mse_att: Option<f64>,
    pub policy_risk_at_threshold: Vec<PolicyRiskPoint>,
    pub surrogate_mse_nn: Option<f64>,
    pub bound: Option<BoundDiagnostics>,
}

impl EvaluationReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CfrError::io(path, e))
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CfrError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CfrError::Validation(format!("{}: {e}", path.display())))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOptions {
    pub policy_thresholds: Vec<f64>,
    pub policy_form: PolicyRiskForm,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        EvaluationOptions { policy_thresholds: vec![0.0], policy_form: PolicyRiskForm::SelfNormalized }
    }
}

fn check_len<S>(v: ArrayView1<S>, n: usize, what: &str) -> Result<()> {
    if v.len() != n {
        return Err(CfrError::Shape(format!("{what} has {} entries for {n} rows", v.len())));
    }
    Ok(())
}

fn truth<S: Scalar>(ds: &ObservationalDataset<S>) -> Result<ndarray::Array1<S>> {
    ds.tau().ok_or_else(|| CfrError::MissingTruth("dataset lacks mu0/mu1".into()))
}

/// `mean (τ(x_i) - τ̂(x_i))²`.
pub fn mse_cate<S: Scalar>(tau_hat: ArrayView1<S>, ds: &ObservationalDataset<S>) -> Result<f64> {
    check_len(tau_hat, ds.n(), "tau_hat")?;
    let tau = truth(ds)?;
    let n = ds.n() as f64;
    Ok(tau.iter().zip(tau_hat.iter()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / n)
}

/// Mean squared error of potential-outcome predictions for one arm.
pub fn mse_potential<S: Scalar>(f: ArrayView1<S>, ds: &ObservationalDataset<S>, arm: u8) -> Result<f64> {
    check_len(f, ds.n(), "predictions")?;
    let mu = ds.mu(arm).ok_or_else(|| CfrError::MissingTruth(format!("dataset lacks mu{arm}")))?;
    Ok(mu.iter().zip(f.iter()).map(|(&a, &b)| (a - b).as_f64().powi(2)).sum::<f64>() / ds.n() as f64)
}

/// Squared errors of the mean effect over all rows (ATE) and over treated
/// rows (ATT).
pub fn error_ate_att<S: Scalar>(tau_hat: ArrayView1<S>, ds: &ObservationalDataset<S>) -> Result<(f64, f64)> {
    check_len(tau_hat, ds.n(), "tau_hat")?;
    let tau = truth(ds)?;
    let mean_over = |rows: &mut dyn Iterator<Item = usize>| -> Option<f64> {
        let (mut s, mut c) = (0.0, 0usize);
        for i in rows {
            s += (tau_hat[i] - tau[i]).as_f64();
            c += 1;
        }
        (c > 0).then(|| s / c as f64)
    };
    let ate = mean_over(&mut (0..ds.n())).ok_or_else(|| CfrError::Size("empty dataset".into()))?;
    let (_, treated) = ds.treatment_groups();
    let att = mean_over(&mut treated.into_iter()).ok_or_else(|| CfrError::Size("no treated rows for ATT".into()))?;
    Ok((ate * ate, att * att))
}

/// Nearest-counterfactual-neighbour surrogate for CATE error:
/// `mean ((1 - 2t_i)(y_j(i) - y_i) - τ̂_i)²`, with `j(i)` the nearest unit of
/// the opposite group in Euclidean distance (ties to the lowest index).
pub fn surrogate_mse_nn<S: Scalar>(tau_hat: ArrayView1<S>, ds: &ObservationalDataset<S>) -> Result<f64> {
    check_len(tau_hat, ds.n(), "tau_hat")?;
    let (control, treated) = ds.treatment_groups();
    if control.is_empty() || treated.is_empty() {
        return Err(CfrError::Size("surrogate needs both treatment groups".into()));
    }
    let mut total = 0.0;
    for i in 0..ds.n() {
        let pool = if ds.t[i] == 1 { &control } else { &treated };
        let j = k_nearest(ds.x.view(), pool, ds.x.row(i), 1)[0];
        let sign = if ds.t[i] == 1 { -1.0 } else { 1.0 };
        let imputed = sign * (ds.y[j] - ds.y[i]).as_f64();
        total += (imputed - tau_hat[i].as_f64()).powi(2);
    }
    Ok(total / ds.n() as f64)
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Option<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return None;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let mean = (a.len() as f64 + 1.0) / 2.0;
    let (mut num, mut da, mut db) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean).powi(2);
        db += (y - mean).powi(2);
    }
    (da > 0.0 && db > 0.0).then(|| num / (da * db).sqrt())
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&i, &j| v[i].total_cmp(&v[j]));
    let mut r = vec![0.0; v.len()];
    let mut k = 0;
    while k < idx.len() {
        let mut end = k;
        while end + 1 < idx.len() && v[idx[end + 1]] == v[idx[k]] {
            end += 1;
        }
        let avg = (k + end) as f64 / 2.0 + 1.0;
        idx[k..=end].iter().for_each(|&i| r[i] = avg);
        k = end + 1;
    }
    r
}

/// Report for predicted potential outcomes on `ds`. Fields needing ground
/// truth or propensities are left empty when those are unavailable.
pub fn evaluate<S: Scalar>(
    yhat0: ArrayView1<S>,
    yhat1: ArrayView1<S>,
    ds: &ObservationalDataset<S>,
    scope: SampleScope,
    opts: &EvaluationOptions,
) -> Result<EvaluationReport> {
    check_len(yhat0, ds.n(), "yhat0")?;
    check_len(yhat1, ds.n(), "yhat1")?;
    let tau_hat = &yhat1 - &yhat0;
    let (mse_cate_v, ate_att) = if ds.has_truth() {
        (Some(mse_cate(tau_hat.view(), ds)?), Some(error_ate_att(tau_hat.view(), ds)?))
    } else {
        (None, None)
    };
    let mut points = Vec::new();
    if ds.e.is_some() {
        for &thr in &opts.policy_thresholds {
            match policy_risk(yhat0, yhat1, ds, thr, opts.policy_form) {
                Ok(p) => points.push(PolicyRiskPoint {
                    threshold: thr,
                    inclusion_rate: p.inclusion_rate,
                    risk: p.risk,
                    effective_sample_size: p.matched,
                }),
                Err(CfrError::NoPolicyMatches { .. }) => {}
                Err(e) => return Err(e),
            }
        }
    }
    let (control, treated) = ds.treatment_groups();
    let surrogate = if control.is_empty() || treated.is_empty() { None } else { Some(surrogate_mse_nn(tau_hat.view(), ds)?) };
    Ok(EvaluationReport {
        sample_scope: scope,
        n: ds.n(),
        mse_cate: mse_cate_v,
        rmse_cate: mse_cate_v.map(f64::sqrt),
        mse_ate: ate_att.map(|v| v.0),
        mse_att: ate_att.map(|v| v.1),
        policy_risk_at_threshold: points,
        surrogate_mse_nn: surrogate,
        bound: None,
    })
}
