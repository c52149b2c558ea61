//! Integral probability metrics between (optionally weighted) point clouds,
//! each returned with gradients with respect to the points and the weights.

mod kernel;
mod mmd;
mod sinkhorn;

use std::str::FromStr;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

pub use kernel::{median_pairwise_distance, rbf_kernel_matrix, resolve_bandwidth, Bandwidth, KernelConfig, KernelMatrix};
pub use mmd::{mmd2_linear, mmd2_linear_weighted, mmd2_quadratic};
pub use sinkhorn::{frozen_plan_cost, sinkhorn_distance, SinkhornConfig};

/// Distance estimate plus gradients of the raw (unclamped) value.
#[derive(Debug, Clone, PartialEq)]
pub struct IpmEstimate<S> {
    /// `max(raw, 0)`.
    pub value: S,
    /// Raw statistic; the unbiased MMD² may be negative.
    pub raw: S,
    pub grad_a: Array2<S>,
    pub grad_b: Array2<S>,
    /// Gradient with respect to the sample weights of cloud A, when weighted.
    pub grad_weights_a: Option<Array1<S>>,
    pub grad_weights_b: Option<Array1<S>>,
    /// Approximate optimal transport plan (Sinkhorn only).
    pub transport: Option<Array2<S>>,
    /// Largest marginal deviation of the Sinkhorn iterate before it is
    /// rounded onto the feasible plans; a convergence diagnostic.
    pub marginal_error: Option<S>,
    /// Plug-in V-statistic rather than the unbiased U-statistic.
    pub biased: bool,
    /// Kernel bandwidth used (MMD only).
    pub bandwidth: Option<S>,
    /// The median heuristic found zero spread and fell back to bandwidth 1.
    pub bandwidth_fallback: bool,
}

impl<S: Scalar> IpmEstimate<S> {
    /// Multiplier to apply to the raw gradients when the estimate is used as
    /// a penalty: zero once the raw value is clamped.
    pub fn penalty_scale(&self) -> S {
        if self.raw > S::zero() {
            S::one()
        } else {
            S::zero()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum IpmKind {
    #[default]
    MmdQuadratic,
    MmdLinear,
    Sinkhorn,
}

impl FromStr for IpmKind {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mmd" | "mmd-quadratic" | "mmd_quadratic" => Ok(IpmKind::MmdQuadratic),
            "mmd-linear" | "mmd_linear" => Ok(IpmKind::MmdLinear),
            "sinkhorn" | "wass" | "wasserstein" => Ok(IpmKind::Sinkhorn),
            other => Err(CfrError::Config(format!("unknown ipm '{other}' (mmd, mmd-linear, sinkhorn)"))),
        }
    }
}

impl std::fmt::Display for IpmKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            IpmKind::MmdQuadratic => "mmd",
            IpmKind::MmdLinear => "mmd-linear",
            IpmKind::Sinkhorn => "sinkhorn",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct IpmConfig {
    pub kind: IpmKind,
    pub kernel: KernelConfig,
    pub sinkhorn: SinkhornConfig,
}

/// Distance between clouds `a` and `b` under the configured metric.
/// Weights, when given, define weighted empirical measures; `None` means
/// uniform (the unbiased estimator for quadratic MMD).
pub fn compute_ipm<S: Scalar>(
    cfg: &IpmConfig,
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
) -> Result<IpmEstimate<S>> {
    match cfg.kind {
        IpmKind::MmdQuadratic => mmd2_quadratic(a, b, weights_a, weights_b, &cfg.kernel),
        IpmKind::MmdLinear => {
            if weights_a.is_none() && weights_b.is_none() {
                mmd2_linear(a, b, &cfg.kernel)
            } else {
                mmd2_linear_weighted(a, b, weights_a, weights_b, &cfg.kernel)
            }
        }
        IpmKind::Sinkhorn => sinkhorn_distance(a, b, weights_a, weights_b, &cfg.sinkhorn),
    }
}

pub(crate) fn check_clouds<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Result<()> {
    if a.ncols() != b.ncols() {
        return Err(CfrError::Shape(format!("clouds have dimensions {} and {}", a.ncols(), b.ncols())));
    }
    if a.ncols() == 0 {
        return Err(CfrError::Shape("clouds have zero dimensions".into()));
    }
    Ok(())
}

pub(crate) fn check_weights<S: Scalar>(w: Option<ArrayView1<S>>, len: usize, name: &str) -> Result<()> {
    if let Some(w) = w {
        if w.len() != len {
            return Err(CfrError::Shape(format!("{name}: {} weights for {len} points", w.len())));
        }
        if w.iter().any(|&v| !(v >= S::zero()) || !v.is_finite()) {
            return Err(CfrError::Validation(format!("{name}: weights must be finite and nonnegative")));
        }
        if w.sum() <= S::zero() {
            return Err(CfrError::Validation(format!("{name}: weights sum to zero")));
        }
    }
    Ok(())
}

/// Chain rule through `p = w / Σw`: maps `∂f/∂p` to `∂f/∂w`.
pub(crate) fn through_normalization<S: Scalar>(w: ArrayView1<S>, grad_p: &Array1<S>) -> Array1<S> {
    let total = w.sum();
    let inner: S = w.iter().zip(grad_p.iter()).map(|(&wi, &gi)| wi * gi).sum::<S>() / total;
    grad_p.mapv(|g| (g - inner) / total)
}
