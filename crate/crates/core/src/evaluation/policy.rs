use std::io::Write;
use std::path::Path;

use ndarray::ArrayView1;
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

/// Estimator for the risk of a deterministic policy from data with known
/// propensities.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyRiskForm {
    /// `1 - Σ_m y_i / p_i / Σ_m 1 / p_i` over matched units.
    #[default]
    SelfNormalized,
    /// `1 - Σ_m y_i / p_i / |m|`: inverse-propensity numerator over an
    /// unweighted matched count.
    Literal,
}

impl std::str::FromStr for PolicyRiskForm {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "self-normalized" | "sn" => Ok(PolicyRiskForm::SelfNormalized),
            "literal" => Ok(PolicyRiskForm::Literal),
            other => Err(CfrError::Config(format!("unknown policy-risk form '{other}' (self-normalized, literal)"))),
        }
    }
}

impl std::fmt::Display for PolicyRiskForm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            PolicyRiskForm::SelfNormalized => "self-normalized",
            PolicyRiskForm::Literal => "literal",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyRiskEstimate {
    pub risk: f64,
    /// Units whose observed treatment agrees with the policy.
    pub matched: usize,
    /// Fraction of units the policy treats.
    pub inclusion_rate: f64,
}

/// Risk of an explicit 0/1 policy. Outcomes are read as "larger is
/// better", normally in `[0, 1]`.
pub fn policy_risk_for<S: Scalar>(policy: &[u8], ds: &ObservationalDataset<S>, form: PolicyRiskForm) -> Result<PolicyRiskEstimate> {
    if policy.len() != ds.n() {
        return Err(CfrError::Shape(format!("policy has {} entries for {} rows", policy.len(), ds.n())));
    }
    let e = ds.e.as_ref().ok_or_else(|| CfrError::MissingTruth("policy risk needs true propensities".into()))?;
    let (mut num, mut den_w, mut matched) = (0.0, 0.0, 0usize);
    for i in 0..ds.n() {
        if policy[i] != ds.t[i] {
            continue;
        }
        let ei = e[i].as_f64();
        let p = if policy[i] == 1 { ei } else { 1.0 - ei };
        num += ds.y[i].as_f64() / p;
        den_w += 1.0 / p;
        matched += 1;
    }
    if matched == 0 {
        return Err(CfrError::NoPolicyMatches { matched });
    }
    let den = match form {
        PolicyRiskForm::SelfNormalized => den_w,
        PolicyRiskForm::Literal => matched as f64,
    };
    let treated = policy.iter().filter(|&&p| p == 1).count();
    Ok(PolicyRiskEstimate { risk: 1.0 - num / den, matched, inclusion_rate: treated as f64 / ds.n() as f64 })
}

/// Risk of the policy that treats when `ŷ1 - ŷ0 > threshold`.
pub fn policy_risk<S: Scalar>(
    yhat0: ArrayView1<S>,
    yhat1: ArrayView1<S>,
    ds: &ObservationalDataset<S>,
    threshold: f64,
    form: PolicyRiskForm,
) -> Result<PolicyRiskEstimate> {
    if yhat0.len() != ds.n() || yhat1.len() != ds.n() {
        return Err(CfrError::Shape("predictions do not match dataset rows".into()));
    }
    let policy: Vec<u8> = yhat0.iter().zip(yhat1.iter()).map(|(&a, &b)| u8::from((b - a).as_f64() > threshold)).collect();
    policy_risk_for(&policy, ds, form)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyCurvePoint {
    pub rate: f64,
    /// Smallest treated `τ̂` (`+inf` when nobody is treated).
    pub threshold: f64,
    pub risk: f64,
    pub matched: usize,
}

/// Policy risk when treating the `round(rate · n)` units with the largest
/// estimated effect (ties to the lower index), for each rate in `rates`.
pub fn policy_curve<S: Scalar>(
    yhat0: ArrayView1<S>,
    yhat1: ArrayView1<S>,
    ds: &ObservationalDataset<S>,
    rates: &[f64],
    form: PolicyRiskForm,
) -> Result<Vec<PolicyCurvePoint>> {
    let n = ds.n();
    if yhat0.len() != n || yhat1.len() != n {
        return Err(CfrError::Shape("predictions do not match dataset rows".into()));
    }
    let tau: Vec<f64> = yhat0.iter().zip(yhat1.iter()).map(|(&a, &b)| (b - a).as_f64()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| tau[j].total_cmp(&tau[i]).then(i.cmp(&j)));
    rates
        .iter()
        .map(|&rate| {
            if !(0.0..=1.0).contains(&rate) {
                return Err(CfrError::Config(format!("inclusion rate {rate} outside [0, 1]")));
            }
            let k = (rate * n as f64).round() as usize;
            let mut policy = vec![0u8; n];
            order[..k].iter().for_each(|&i| policy[i] = 1);
            let est = policy_risk_for(&policy, ds, form)?;
            let threshold = if k == 0 { f64::INFINITY } else { tau[order[k - 1]] };
            Ok(PolicyCurvePoint { rate, threshold, risk: est.risk, matched: est.matched })
        })
        .collect()
}

pub fn write_policy_curve_csv(points: &[PolicyCurvePoint], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("rate,threshold,risk,effective_n\n");
    for p in points {
        out.push_str(&format!("{},{},{},{}\n", p.rate, p.threshold, p.risk, p.matched));
    }
    std::fs::File::create(path).and_then(|mut f| f.write_all(out.as_bytes())).map_err(|e| CfrError::io(path, e))
}
