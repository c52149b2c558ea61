use ndarray::Array1;

use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

/// Rescales `values` so each treatment group present has mean exactly 1.
/// A constant group maps to exactly ones.
pub fn normalize_group_means<S: Scalar>(values: &Array1<S>, t: &[u8]) -> Array1<S> {
    let mut out = values.clone();
    for arm in 0..2u8 {
        let idx: Vec<usize> = (0..t.len()).filter(|&i| t[i] == arm).collect();
        if idx.is_empty() {
            continue;
        }
        let first = values[idx[0]];
        if idx.iter().all(|&i| values[i] == first) {
            for &i in &idx {
                out[i] = S::one();
            }
            continue;
        }
        let mean = idx.iter().map(|&i| values[i]).sum::<S>() / S::of(idx.len());
        for &i in &idx {
            out[i] = values[i] / mean;
        }
    }
    out
}

/// Importance weights that make each group's weighted risk equal the
/// marginal risk.
#[derive(Debug, Clone, PartialEq)]
pub struct BalancingWeights<S> {
    /// `p(T=t_i) / p(T=t_i | x_i)` with empirical group fractions.
    pub raw: Array1<S>,
    /// `raw` rescaled to mean 1 within each group.
    pub normalized: Array1<S>,
}

/// Treated units get `π₁/η_i`, controls `π₀/(1-η_i)`, where `π_t` is the
/// empirical fraction of group `t`.
pub fn balancing_weights<S: Scalar>(eta: &Array1<S>, t: &[u8]) -> Result<BalancingWeights<S>> {
    if eta.len() != t.len() {
        return Err(CfrError::Shape(format!("{} propensities for {} treatments", eta.len(), t.len())));
    }
    if let Some(i) = eta.iter().position(|&e| !(e > S::zero() && e < S::one())) {
        return Err(CfrError::Validation(format!("propensity at row {} is {}, outside (0,1)", i + 1, eta[i])));
    }
    let n = S::of(t.len());
    let n1 = S::of(t.iter().filter(|&&v| v == 1).count());
    let pi = [(n - n1) / n, n1 / n];
    let raw = Array1::from_iter(eta.iter().zip(t).map(|(&e, &ti)| {
        let p_obs = if ti == 1 { e } else { S::one() - e };
        pi[ti as usize] / p_obs
    }));
    let normalized = normalize_group_means(&raw, t);
    Ok(BalancingWeights { raw, normalized })
}
