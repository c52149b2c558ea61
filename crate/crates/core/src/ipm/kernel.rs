use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance over both clouds.
    #[default]
    Median,
}

/// Gaussian RBF kernel `exp(-‖x - x'‖² / (2σ²))`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        KernelConfig {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KernelMatrix<S> {
    pub values: Array2<S>,
    pub sigma: S,
    pub fallback: bool,
}

pub(crate) fn sq_distances<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    let mut out = Array2::zeros((a.nrows(), b.nrows()));
    for (i, ra) in a.rows().into_iter().enumerate() {
        for (j, rb) in b.rows().into_iter().enumerate() {
            out[[i, j]] = ra.iter().zip(rb.iter()).map(|(&p, &q)| (p - q) * (p - q)).sum();
        }
    }
    out
}

/// Median of the distances between all pairs of distinct rows across the
/// given clouds, or `None` for fewer than two rows.
pub fn median_pairwise_distance<S: Scalar>(clouds: &[ArrayView2<S>]) -> Option<S> {
    let rows: Vec<_> = clouds.iter().flat_map(|c| c.rows().into_iter()).collect();
    if rows.len() < 2 {
        return None;
    }
    let mut d = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            d.push(rows[i].iter().zip(rows[j].iter()).map(|(&p, &q)| (p - q) * (p - q)).sum::<S>());
        }
    }
    let mid = d.len() / 2;
    let cmp = |x: &S, y: &S| x.partial_cmp(y).unwrap_or(std::cmp::Ordering::Equal);
    let odd = d.len() % 2 == 1;
    let (lo, m, _) = d.select_nth_unstable_by(mid, cmp);
    let upper = *m;
    let med = if odd {
        upper
    } else {
        let lower = lo.iter().copied().fold(S::neg_infinity(), S::max);
        (lower + upper) * S::c(0.5)
    };
    Some(med.sqrt())
}

/// Bandwidth for the given clouds; the flag is set when the median
/// heuristic degenerates and bandwidth 1 is used instead.
pub fn resolve_bandwidth<S: Scalar>(cfg: &KernelConfig, clouds: &[ArrayView2<S>]) -> Result<(S, bool)> {
    match cfg.bandwidth {
        Bandwidth::Fixed(s) => {
            if !(s > 0.0 && s.is_finite()) {
                return Err(CfrError::Config(format!("kernel bandwidth must be positive, got {s}")));
            }
            Ok((S::c(s), false))
        }
        Bandwidth::Median => match median_pairwise_distance(clouds) {
            Some(m) if m > S::zero() && m.is_finite() => Ok((m, false)),
            _ => {
                log::warn!("median bandwidth heuristic degenerate; falling back to 1");
                Ok((S::one(), true))
            }
        },
    }
}

pub(crate) fn rbf_from_sq<S: Scalar>(sq: &Array2<S>, sigma: S) -> Array2<S> {
    let scale = S::one() / (S::c(2.0) * sigma * sigma);
    sq.mapv(|d| (-d * scale).exp())
}

pub fn rbf_kernel_matrix<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>, cfg: &KernelConfig) -> Result<KernelMatrix<S>> {
    super::check_clouds(a, b)?;
    let (sigma, fallback) = resolve_bandwidth(cfg, &[a, b])?;
    Ok(KernelMatrix {
        values: rbf_from_sq(&sq_distances(a, b), sigma),
        sigma,
        fallback,
    })
}
