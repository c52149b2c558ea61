use ndarray::Array1;

use super::CfrModel;
use crate::scalar::Scalar;

/// Denominator floor in [`relative_error`], so coordinates whose true
/// gradient is zero are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR)
}

/// Central-difference gradient of `f` at `params`.
pub fn central_differences<S: Scalar>(params: &Array1<S>, step: f64, mut f: impl FnMut(&Array1<S>) -> S) -> Array1<S> {
    let h = S::c(step);
    let mut p = params.clone();
    Array1::from_shape_fn(params.len(), |i| {
        let orig = p[i];
        p[i] = orig + h;
        let up = f(&p);
        p[i] = orig - h;
        let down = f(&p);
        p[i] = orig;
        (up - down) / (h + h)
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    pub max_relative_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradientReport {
    pub max_relative_error: f64,
    /// Parameter index of the largest relative error.
    pub worst_index: usize,
    pub worst_block: String,
    pub step: f64,
    pub blocks: Vec<BlockError>,
}

impl GradientReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares `analytic` against central differences of `objective` over the
/// model's parameters, block by block.
pub fn gradient_check<S: Scalar>(
    model: &CfrModel<S>,
    analytic: &Array1<S>,
    step: f64,
    objective: impl FnMut(&Array1<S>) -> S,
) -> GradientReport {
    let numeric = central_differences(&model.params, step, objective);
    let mut blocks = Vec::new();
    let mut worst = (0.0f64, 0usize, String::new());
    for block in model.blocks() {
        let mut b = BlockError { name: block.name.clone(), max_relative_error: 0.0, worst_index: block.range.start };
        for i in block.range.clone() {
            let e = relative_error(analytic[i].as_f64(), numeric[i].as_f64());
            if e > b.max_relative_error || e.is_nan() {
                b.max_relative_error = e;
                b.worst_index = i;
            }
        }
        if b.max_relative_error > worst.0 || b.max_relative_error.is_nan() {
            worst = (b.max_relative_error, b.worst_index, b.name.clone());
        }
        blocks.push(b);
    }
    GradientReport { max_relative_error: worst.0, worst_index: worst.1, worst_block: worst.2, step, blocks }
}
