use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::ObservationalDataset;
use crate::error::{CfrError, Result};
use crate::linalg::{cholesky, cholesky_solve, spd_inverse};
use crate::scalar::{sigmoid, softplus, Scalar};

/// L2 penalty on propensity slopes; keeps separable data finite.
pub const PROPENSITY_L2: f64 = 1e-6;

const MAX_ITER: usize = 500;
const GRAD_TOL: f64 = 1e-8;

/// Penalized maximum-likelihood logistic fit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticFit<S> {
    pub coefficients: Vec<S>,
    pub intercept: S,
    pub iterations: usize,
    pub grad_norm: S,
    /// Inverse Hessian of the summed negative log-likelihood at the optimum
    /// (intercept first), when invertible.
    pub covariance: Option<Vec<Vec<S>>>,
}

/// Minimizes `mean(softplus(s) - y s) + l2/2 ‖β‖²` over `s = b + x·β` by
/// damped Newton steps. Targets may be fractional in `[0, 1]`.
pub fn fit_logistic<S: Scalar>(x: ArrayView2<S>, y: ArrayView1<S>, l2: S) -> Result<LogisticFit<S>> {
    let (n, d) = x.dim();
    if n == 0 {
        return Err(CfrError::Size("logistic regression on zero rows".into()));
    }
    let nn = S::of(n);
    let p = d + 1;
    let mut theta = Array1::<S>::zeros(p);
    // start the intercept at the logit of the mean target
    let ybar = y.sum() / nn;
    let eps = S::c(1e-6);
    let yb = ybar.max(eps).min(S::one() - eps);
    theta[0] = (yb / (S::one() - yb)).ln();

    let objective = |th: &Array1<S>| -> S {
        let beta = th.slice(ndarray::s![1..]);
        let s = x.dot(&beta).mapv(|v| v + th[0]);
        let nll = s.iter().zip(y.iter()).map(|(&si, &yi)| softplus(si) - yi * si).sum::<S>() / nn;
        nll + l2 * S::c(0.5) * beta.dot(&beta)
    };

    let mut iterations = 0;
    let mut grad_norm = S::infinity();
    for it in 0..MAX_ITER {
        iterations = it;
        let beta = theta.slice(ndarray::s![1..]);
        let s = x.dot(&beta).mapv(|v| v + theta[0]);
        let prob = s.mapv(sigmoid);
        let resid = &prob - &y;
        let mut grad = Array1::<S>::zeros(p);
        grad[0] = resid.sum() / nn;
        grad.slice_mut(ndarray::s![1..]).assign(&(x.t().dot(&resid) / nn + &(&beta * l2)));
        grad_norm = grad.dot(&grad).sqrt();
        if grad_norm < S::c(GRAD_TOL) {
            break;
        }
        let hess = hessian(x, &prob, l2, nn);
        let step = match cholesky(&hess, S::c(1e-15)) {
            Some(l) => cholesky_solve(&l, &grad),
            None => grad.clone(),
        };
        let f0 = objective(&theta);
        let slope = grad.dot(&step);
        let mut t = S::one();
        let mut accepted = false;
        for _ in 0..60 {
            let cand = &theta - &(&step * t);
            let f1 = objective(&cand);
            if f1.is_finite() && f1 <= f0 - S::c(1e-4) * t * slope {
                theta = cand;
                accepted = true;
                break;
            }
            t *= S::c(0.5);
        }
        if !accepted {
            // no further decrease representable at this precision
            break;
        }
    }
    if theta.iter().any(|v| !v.is_finite()) {
        return Err(CfrError::Numeric("logistic fit produced non-finite coefficients".into()));
    }
    let beta = theta.slice(ndarray::s![1..]);
    let prob = x.dot(&beta).mapv(|v| sigmoid(v + theta[0]));
    let mut info = hessian(x, &prob, l2, nn);
    info.mapv_inplace(|v| v * nn);
    let covariance = spd_inverse(&info).map(|m| m.outer_iter().map(|r| r.to_vec()).collect());
    Ok(LogisticFit {
        intercept: theta[0],
        coefficients: beta.to_vec(),
        iterations,
        grad_norm,
        covariance,
    })
}

fn hessian<S: Scalar>(x: ArrayView2<S>, prob: &Array1<S>, l2: S, nn: S) -> Array2<S> {
    let (n, d) = x.dim();
    let p = d + 1;
    let mut h = Array2::<S>::zeros((p, p));
    for i in 0..n {
        let w = prob[i] * (S::one() - prob[i]) / nn;
        let row = x.row(i);
        h[[0, 0]] += w;
        for a in 0..d {
            let wa = w * row[a];
            h[[0, a + 1]] += wa;
            for b in a..d {
                h[[a + 1, b + 1]] += wa * row[b];
            }
        }
    }
    for a in 0..p {
        for b in 0..a {
            h[[a, b]] = h[[b, a]];
        }
    }
    for a in 1..p {
        h[[a, a]] += l2;
    }
    h
}

/// Logistic model of `p(T=1 | X=x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel<S> {
    pub fit: LogisticFit<S>,
}

impl<S: Scalar> PropensityModel<S> {
    /// Propensities clamped into the open unit interval.
    pub fn predict(&self, x: ArrayView2<S>) -> Array1<S> {
        let beta = ArrayView1::from(&self.fit.coefficients);
        let tiny = S::epsilon();
        x.dot(&beta).mapv(|s| sigmoid(s + self.fit.intercept).max(tiny).min(S::one() - tiny))
    }

    pub fn standard_errors(&self) -> Option<Vec<S>> {
        self.fit.covariance.as_ref().map(|c| (0..c.len()).map(|i| c[i][i].sqrt()).collect())
    }
}

pub fn fit_propensity<S: Scalar>(ds: &ObservationalDataset<S>) -> Result<PropensityModel<S>> {
    let n1 = ds.t.iter().filter(|&&t| t == 1).count();
    if n1 == 0 || n1 == ds.n() {
        return Err(CfrError::Validation("propensity model needs both treated and control units".into()));
    }
    let t = Array1::from_iter(ds.t.iter().map(|&t| S::of(t as usize)));
    Ok(PropensityModel {
        fit: fit_logistic(ds.x.view(), t.view(), S::c(PROPENSITY_L2))?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn two_point_separable() {
        let ds = ObservationalDataset::<f64>::new(array![[0.0], [1.0]], vec![0, 1], array![0.0, 0.0]).unwrap();
        let m = fit_propensity(&ds).unwrap();
        let p = m.predict(ds.x.view());
        assert!(p[0] < 0.5 && 0.5 < p[1]);
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(m.fit.coefficients[0].is_finite());
    }

    #[test]
    fn separable_toy_stays_finite() {
        let x = array![[-3.0, 1.0], [-2.0, 0.0], [-1.0, 2.0], [1.0, 1.0], [2.0, 0.5], [3.0, 2.0]];
        let ds = ObservationalDataset::<f64>::new(x, vec![0, 0, 0, 1, 1, 1], array![0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let m = fit_propensity(&ds).unwrap();
        assert!(m.fit.coefficients.iter().all(|c| c.is_finite()));
        let p = m.predict(ds.x.view());
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(p[0] < p[5]);
    }

    #[test]
    fn single_class_rejected() {
        let ds = ObservationalDataset::<f64>::new(array![[0.0], [1.0]], vec![1, 1], array![0.0, 0.0]).unwrap();
        assert!(fit_propensity(&ds).is_err());
    }

    #[test]
    fn converges_on_overlapping_data() {
        let x = array![[-1.0], [-0.5], [0.0], [0.5], [1.0], [-0.2], [0.3], [0.8]];
        let ds = ObservationalDataset::<f64>::new(x, vec![0, 1, 0, 0, 1, 0, 1, 1], Array1::zeros(8)).unwrap();
        let m = fit_propensity(&ds).unwrap();
        assert!(m.fit.grad_norm < 1e-8);
        assert!(m.fit.coefficients[0] > 0.0);
    }
}
