use ndarray::{Array1, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::ipm::{compute_ipm, IpmConfig, IpmKind};
use crate::nnet::CfrModel;
use crate::scalar::Scalar;

pub const BOUND_LABEL: &str = "diagnostic, not a certified bound";

/// Settings for [`bound_diagnostics`].
#[derive(Debug, Clone)]
pub struct BoundInputs<'a, S> {
    /// Arm whose risk is bounded.
    pub arm: u8,
    /// Re-weighting of the arm's units, indexed over all rows; `None` is
    /// uniform. Only entries of the arm's rows are used.
    pub weights: Option<ArrayView1<'a, S>>,
    /// User-supplied norm constant `B`.
    pub b: f64,
    /// Outcome noise variance; derived from `mu_t` when absent.
    pub sigma2: Option<f64>,
    pub ipm: IpmConfig,
}

/// Empirical components of the generalization bound for one arm. The
/// complexity constants are not computed, so the composed value is
/// indicative only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundDiagnostics {
    pub arm: u8,
    pub pi_t: f64,
    pub weighted_factual_risk: f64,
    pub ipm_term: f64,
    pub variance_term_v: f64,
    pub user_constant_b: f64,
    pub noise_floor_sigma2: f64,
    pub composed_upper_value: f64,
    pub label: String,
}

/// With `w̃ = π_t + (1 - π_t) w` over the arm's rows:
/// risk `mean w̃ L`, IPM between the other arm's representations and the
/// `w`-weighted arm representations (MMD, not squared, for kernel metrics),
/// and `V = max(sqrt(mean w̃² L²), sqrt(mean w̃² ℓ²))` where `ℓ` is the
/// expected loss `(f_t - μ_t)² + σ²` when ground truth is known.
pub fn bound_diagnostics<S: Scalar>(
    model: &CfrModel<S>,
    ds: &ObservationalDataset<S>,
    inputs: &BoundInputs<'_, S>,
) -> Result<BoundDiagnostics> {
    let t = inputs.arm;
    if t > 1 {
        return Err(CfrError::Config(format!("arm {t} outside {{0,1}}")));
    }
    if !(inputs.b >= 0.0) {
        return Err(CfrError::Config("B must be nonnegative".into()));
    }
    let (control, treated) = ds.treatment_groups();
    let (rows, others) = if t == 1 { (treated, control) } else { (control, treated) };
    if rows.is_empty() || others.is_empty() {
        return Err(CfrError::Size("bound diagnostics need both treatment groups".into()));
    }
    let n_t = rows.len() as f64;
    let pi_t = n_t / ds.n() as f64;
    let w: Array1<S> = match inputs.weights {
        Some(w) if w.len() != ds.n() => {
            return Err(CfrError::Shape(format!("{} weights for {} rows", w.len(), ds.n())))
        }
        Some(w) => rows.iter().map(|&i| w[i]).collect(),
        None => Array1::ones(rows.len()),
    };
    let w_tilde: Vec<f64> = w.iter().map(|&wi| pi_t + (1.0 - pi_t) * wi.as_f64()).collect();

    let xt = ds.x.select(Axis(0), &rows);
    let (f0, f1) = model.predict_potential_outcomes(xt.view())?;
    let f = if t == 1 { f1 } else { f0 };
    let loss: Vec<f64> = rows.iter().zip(f.iter()).map(|(&i, &fi)| (fi - ds.y[i]).as_f64().powi(2)).collect();
    let risk = w_tilde.iter().zip(&loss).map(|(a, l)| a * l).sum::<f64>() / n_t;

    let sigma2 = match (inputs.sigma2, ds.mu(t)) {
        (Some(s), _) => s,
        (None, Some(mu)) => rows.iter().map(|&i| (ds.y[i] - mu[i]).as_f64().powi(2)).sum::<f64>() / n_t,
        (None, None) => return Err(CfrError::MissingTruth("sigma2 not supplied and no ground truth to derive it".into())),
    };
    let observed = (w_tilde.iter().zip(&loss).map(|(a, l)| a * a * l * l).sum::<f64>() / n_t).sqrt();
    let expected = ds.mu(t).map(|mu| {
        let s = rows
            .iter()
            .zip(f.iter())
            .zip(&w_tilde)
            .map(|((&i, &fi), a)| {
                let ell = (fi - mu[i]).as_f64().powi(2) + sigma2;
                a * a * ell * ell
            })
            .sum::<f64>();
        (s / n_t).sqrt()
    });
    let v = expected.map_or(observed, |e| e.max(observed));

    let z = model.forward_representation(ds.x.view())?;
    let z_t = z.select(Axis(0), &rows);
    let z_o = z.select(Axis(0), &others);
    let est = compute_ipm(&inputs.ipm, z_o.view(), z_t.view(), None, Some(w.view()))?;
    let ipm_term = match inputs.ipm.kind {
        IpmKind::Sinkhorn => est.value.as_f64(),
        IpmKind::MmdQuadratic | IpmKind::MmdLinear => est.value.as_f64().sqrt(),
    };
    let composed = risk + inputs.b * (1.0 - pi_t) * ipm_term + v + sigma2;
    Ok(BoundDiagnostics {
        arm: t,
        pi_t,
        weighted_factual_risk: risk,
        ipm_term,
        variance_term_v: v,
        user_constant_b: inputs.b,
        noise_floor_sigma2: sigma2,
        composed_upper_value: composed,
        label: BOUND_LABEL.into(),
    })
}
