use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Zip};
use serde::{Deserialize, Serialize};

use super::kernel::sq_distances;
use super::{check_clouds, check_weights, through_normalization, IpmEstimate};
use crate::error::{CfrError, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SinkhornConfig {
    /// λ in `K = exp(-λ M)`; larger is closer to exact transport.
    pub entropy_scale: f64,
    pub iterations: usize,
    /// Ramp λ geometrically from `min(λ, 1/max M)` up to λ over the first
    /// half of the iterations, carrying the dual potentials along. Off gives
    /// the plain fixed-point iteration at λ throughout.
    #[serde(default = "default_scaling")]
    pub scaling: bool,
}

fn default_scaling() -> bool {
    true
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        SinkhornConfig::new(10.0, 10)
    }
}

impl SinkhornConfig {
    pub fn new(entropy_scale: f64, iterations: usize) -> Self {
        SinkhornConfig { entropy_scale, iterations, scaling: true }
    }

    pub fn with_scaling(mut self, scaling: bool) -> Self {
        self.scaling = scaling;
        self
    }

    /// λ used in iteration `it` (1-based) when the largest cost is `max_cost`.
    pub fn scale_at(&self, it: usize, max_cost: f64) -> f64 {
        let target = self.entropy_scale;
        if !self.scaling || !(max_cost > 0.0) {
            return target;
        }
        let start = target.min(1.0 / max_cost);
        let ramp = self.iterations.div_ceil(2);
        let phase = (it as f64 / ramp as f64).min(1.0);
        start.powf(1.0 - phase) * target.powf(phase)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.entropy_scale > 0.0) || !self.entropy_scale.is_finite() {
            return Err(CfrError::Config(format!("entropy_scale must be positive, got {}", self.entropy_scale)));
        }
        if self.iterations == 0 {
            return Err(CfrError::Config("sinkhorn iterations must be at least 1".into()));
        }
        Ok(())
    }
}

fn marginal<S: Scalar>(w: Option<ArrayView1<S>>, len: usize) -> Array1<S> {
    match w {
        Some(w) => &w / w.sum(),
        None => Array1::from_elem(len, S::one() / S::of(len)),
    }
}

fn distances<S: Scalar>(a: ArrayView2<S>, b: ArrayView2<S>) -> Array2<S> {
    sq_distances(a, b).mapv(|d| d.max(S::zero()).sqrt())
}

/// `ln Σ exp(x)` over the finite-or-`+inf` terms; `-inf` when all are `-inf`.
fn log_sum_exp<S: Scalar>(terms: impl Iterator<Item = S> + Clone) -> S {
    let top = terms.clone().fold(S::neg_infinity(), S::max);
    if top == S::neg_infinity() || !top.is_finite() {
        return top;
    }
    top + terms.map(|x| (x - top).exp()).sum::<S>().ln()
}

/// Entropic optimal transport cost between the weighted empirical measures
/// of `a` and `b` with Euclidean ground cost.
///
/// Runs the matrix-scaling iteration `v = r_b / Kᵀu`, `u = r_a / K v` from
/// `u = 1/m`, in the log domain on the potentials `f = ln u / λ` and
/// `g = ln v / λ` (see [`SinkhornConfig::scaling`]). After a final column
/// update the plan `T = diag(u) K diag(v)` is rounded onto the plans with
/// exactly the prescribed marginals, so the value `⟨T, M⟩` is the cost of a
/// feasible transport plan. Point gradients hold `T` fixed; weight
/// gradients hold the conditional plan `T_kl / (r_a,k r_b,l)` fixed (see
/// [`frozen_plan_cost`]).
pub fn sinkhorn_distance<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
    cfg: &SinkhornConfig,
) -> Result<IpmEstimate<S>> {
    cfg.validate()?;
    check_clouds(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    if m == 0 || n == 0 {
        return Err(CfrError::Size("empty cloud".into()));
    }
    check_weights(weights_a, m, "cloud A")?;
    check_weights(weights_b, n, "cloud B")?;
    let ra = marginal(weights_a, m);
    let rb = marginal(weights_b, n);
    let dist = distances(a, b);
    let lambda = S::c(cfg.entropy_scale);
    if dist.iter().all(|&d| (-lambda * d).exp() == S::zero()) {
        return Err(CfrError::KernelUnderflow { lambda: cfg.entropy_scale });
    }
    let max_cost = dist.iter().fold(S::zero(), |acc, &d| acc.max(d)).as_f64();
    let log_ra = ra.mapv(|r| r.ln());
    let log_rb = rb.mapv(|r| r.ln());

    let mut f = Array1::<S>::zeros(m);
    let mut g = Array1::<S>::zeros(n);
    let col_update = |f: &Array1<S>, g: &mut Array1<S>, l: S| {
        for (j, gj) in g.iter_mut().enumerate() {
            let lse = log_sum_exp((0..m).map(|i| l * (f[i] - dist[[i, j]])));
            *gj = if log_rb[j] == S::neg_infinity() { S::neg_infinity() } else { (log_rb[j] - lse) / l };
        }
    };
    let row_update = |f: &mut Array1<S>, g: &Array1<S>, l: S| {
        for (i, fi) in f.iter_mut().enumerate() {
            let lse = log_sum_exp((0..n).map(|j| l * (g[j] - dist[[i, j]])));
            *fi = if log_ra[i] == S::neg_infinity() { S::neg_infinity() } else { (log_ra[i] - lse) / l };
        }
    };
    let broken = |v: &Array1<S>| v.iter().any(|x| x.is_nan() || *x == S::infinity());
    for it in 1..=cfg.iterations {
        let l = S::c(cfg.scale_at(it, max_cost));
        col_update(&f, &mut g, l);
        row_update(&mut f, &g, l);
        if broken(&f) || broken(&g) {
            return Err(CfrError::SinkhornDiverged { iteration: it });
        }
    }
    col_update(&f, &mut g, lambda);
    if broken(&g) {
        return Err(CfrError::SinkhornDiverged { iteration: cfg.iterations });
    }

    let mut plan = Array2::from_shape_fn((m, n), |(i, j)| (lambda * (f[i] + g[j] - dist[[i, j]])).exp());
    let row_mass = plan.sum_axis(ndarray::Axis(1));
    let col_mass = plan.sum_axis(ndarray::Axis(0));
    let marginal_error = row_mass
        .iter()
        .zip(ra.iter())
        .chain(col_mass.iter().zip(rb.iter()))
        .map(|(&x, &r)| (x - r).abs())
        .fold(S::zero(), S::max);
    round_to_marginals(&mut plan, &ra, &rb);
    let cost = &plan * &dist;
    let value = cost.sum();
    let row_cost = cost.sum_axis(ndarray::Axis(1));
    let col_cost = cost.sum_axis(ndarray::Axis(0));

    // d‖a_k - b_l‖ / d a_k = (a_k - b_l) / ‖a_k - b_l‖, taken as 0 at coincident points
    let coef = Zip::from(&plan).and(&dist).map_collect(|&t, &d| if d > S::zero() { t / d } else { S::zero() });
    let row_c = coef.sum_axis(ndarray::Axis(1));
    let col_c = coef.sum_axis(ndarray::Axis(0));
    let mut grad_a = coef.dot(&b);
    for (i, mut r) in grad_a.rows_mut().into_iter().enumerate() {
        r.zip_mut_with(&a.row(i), |g, &ai| *g = row_c[i] * ai - *g);
    }
    let mut grad_b = coef.t().dot(&a);
    for (j, mut r) in grad_b.rows_mut().into_iter().enumerate() {
        r.zip_mut_with(&b.row(j), |g, &bj| *g = col_c[j] * bj - *g);
    }

    let grad_ra = Zip::from(&row_cost).and(&ra).map_collect(|&c, &r| safe_div(c, r));
    let grad_rb = Zip::from(&col_cost).and(&rb).map_collect(|&c, &r| safe_div(c, r));
    Ok(IpmEstimate {
        value: value.max(S::zero()),
        raw: value,
        grad_a,
        grad_b,
        grad_weights_a: weights_a.map(|w| through_normalization(w, &grad_ra)),
        grad_weights_b: weights_b.map(|w| through_normalization(w, &grad_rb)),
        transport: Some(plan),
        marginal_error: Some(marginal_error),
        biased: true,
        bandwidth: None,
        bandwidth_fallback: false,
    })
}

/// Projects an approximate plan onto the transport polytope: rows and then
/// columns are scaled down to at most their marginals, and the missing mass
/// is added back as the rank-one product of the row and column deficits.
/// A plan that already has the right marginals is left unchanged.
fn round_to_marginals<S: Scalar>(plan: &mut Array2<S>, ra: &Array1<S>, rb: &Array1<S>) {
    let shrink = |target: S, mass: S| if mass > target { target / mass } else { S::one() };
    for (mut row, &r) in plan.rows_mut().into_iter().zip(ra.iter()) {
        let f = shrink(r, row.sum());
        row.mapv_inplace(|t| t * f);
    }
    for (mut col, &r) in plan.columns_mut().into_iter().zip(rb.iter()) {
        let f = shrink(r, col.sum());
        col.mapv_inplace(|t| t * f);
    }
    let row_deficit = ra - &plan.sum_axis(ndarray::Axis(1));
    let col_deficit = rb - &plan.sum_axis(ndarray::Axis(0));
    let total = row_deficit.sum();
    if total > S::zero() {
        for (mut row, &dr) in plan.rows_mut().into_iter().zip(row_deficit.iter()) {
            row.zip_mut_with(&col_deficit, |t, &dc| *t += dr * dc / total);
        }
    }
}

fn safe_div<S: Scalar>(num: S, den: S) -> S {
    if num == S::zero() {
        S::zero()
    } else {
        num / den
    }
}

/// Cost of a frozen transport plan re-evaluated at new points and weights:
/// `Σ_kl T_kl (r_a,k / r0_a,k) (r_b,l / r0_b,l) ‖a_k - b_l‖`, where `r0` are
/// the marginals the plan was computed for and `r` those implied by the new
/// weights. This is the function whose exact gradient
/// [`sinkhorn_distance`] reports.
pub fn frozen_plan_cost<S: Scalar>(
    a: ArrayView2<S>,
    b: ArrayView2<S>,
    plan: ArrayView2<S>,
    base_weights_a: Option<ArrayView1<S>>,
    base_weights_b: Option<ArrayView1<S>>,
    weights_a: Option<ArrayView1<S>>,
    weights_b: Option<ArrayView1<S>>,
) -> Result<S> {
    check_clouds(a, b)?;
    let (m, n) = (a.nrows(), b.nrows());
    if plan.dim() != (m, n) {
        return Err(CfrError::Shape(format!("plan is {:?}, clouds are {m}x{n}", plan.dim())));
    }
    let ra0 = marginal(base_weights_a, m);
    let rb0 = marginal(base_weights_b, n);
    let ra = marginal(weights_a, m);
    let rb = marginal(weights_b, n);
    let dist = distances(a, b);
    let mut total = S::zero();
    for k in 0..m {
        let sa = safe_div(ra[k], ra0[k]);
        for l in 0..n {
            total += plan[[k, l]] * sa * safe_div(rb[l], rb0[l]) * dist[[k, l]];
        }
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;

    #[test]
    fn identical_single_points() {
        let z = array![[0.4, -1.0]];
        let est = sinkhorn_distance(z.view(), z.view(), None, None, &SinkhornConfig::default()).unwrap();
        assert_eq!(est.value, 0.0);
        assert_eq!(est.transport.unwrap(), array![[1.0]]);
    }

    #[test]
    fn forced_plan() {
        let a = array![[0.0f64]];
        let b = array![[3.0]];
        let est = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::default()).unwrap();
        assert!((est.value - 3.0).abs() < 1e-12);
        assert!((est.grad_a[[0, 0]] + 1.0).abs() < 1e-12);
        assert!((est.grad_b[[0, 0]] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn underflow_reported() {
        let a = array![[0.0f64]];
        let b = array![[1e3]];
        let err = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(10.0, 5)).unwrap_err();
        assert!(matches!(err, CfrError::KernelUnderflow { .. }));
    }

    #[test]
    fn columns_exact_and_rows_converge() {
        let mut rng = crate::rng::stream(11, "sinkhorn");
        let a = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let wa = array![1.0, 2.0, 0.5, 0.5];
        let est = sinkhorn_distance(a.view(), b.view(), Some(wa.view()), None, &SinkhornConfig::new(5.0, 500)).unwrap();
        let plan = est.transport.unwrap();
        for c in plan.sum_axis(ndarray::Axis(0)).iter() {
            assert!((c - 1.0 / 6.0).abs() < 1e-12);
        }
        assert!(est.marginal_error.unwrap() < 1e-6);
        let rows = plan.sum_axis(ndarray::Axis(1));
        assert!((rows[1] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn plan_is_feasible_after_one_iteration() {
        let mut rng = crate::rng::stream(12, "sinkhorn");
        let a = Array2::from_shape_fn((5, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((3, 2), |_| rng.random::<f64>() + 1.0);
        let est = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(100.0, 1)).unwrap();
        let plan = est.transport.unwrap();
        assert!(est.marginal_error.unwrap() > 1e-3);
        assert!(plan.iter().all(|&t| t >= 0.0));
        for r in plan.sum_axis(ndarray::Axis(1)).iter() {
            assert!((r - 0.2).abs() < 1e-12);
        }
        for c in plan.sum_axis(ndarray::Axis(0)).iter() {
            assert!((c - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    /// Multiplicative fixed point without rounding, as a reference.
    fn plain_plan(a: &Array2<f64>, b: &Array2<f64>, lambda: f64, iterations: usize) -> Array2<f64> {
        let (m, n) = (a.nrows(), b.nrows());
        let k = Array2::from_shape_fn((m, n), |(i, j)| {
            let d: f64 = a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y).powi(2)).sum();
            (-lambda * d.sqrt()).exp()
        });
        let mut u = Array1::from_elem(m, 1.0 / m as f64);
        for _ in 0..iterations {
            let v = k.t().dot(&u).mapv(|s| 1.0 / n as f64 / s);
            u = k.dot(&v).mapv(|s| 1.0 / m as f64 / s);
        }
        let v = k.t().dot(&u).mapv(|s| 1.0 / n as f64 / s);
        Array2::from_shape_fn((m, n), |(i, j)| u[i] * k[[i, j]] * v[j])
    }

    #[test]
    fn plain_mode_matches_multiplicative_iteration() {
        let mut rng = crate::rng::stream(13, "sinkhorn");
        let a = Array2::from_shape_fn((4, 3), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((5, 3), |_| rng.random::<f64>());
        // enough iterations that rounding moves the plan by less than 1e-13
        let cfg = SinkhornConfig::new(3.0, 300).with_scaling(false);
        let est = sinkhorn_distance(a.view(), b.view(), None, None, &cfg).unwrap();
        let reference = plain_plan(&a, &b, 3.0, 300);
        let diff = (&est.transport.unwrap() - &reference).mapv(f64::abs).fold(0.0f64, |m, &x| m.max(x));
        assert!(diff < 1e-13, "{diff}");
    }

    #[test]
    fn scaling_and_plain_agree_at_convergence() {
        let mut rng = crate::rng::stream(14, "sinkhorn");
        let a = Array2::from_shape_fn((6, 2), |_| rng.random::<f64>());
        let b = Array2::from_shape_fn((4, 2), |_| rng.random::<f64>() + 0.5);
        let plain = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(20.0, 5000).with_scaling(false)).unwrap();
        let scaled = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(20.0, 5000)).unwrap();
        assert!((plain.value - scaled.value).abs() < 1e-10);
    }

    #[test]
    fn schedule_ends_at_target() {
        let cfg = SinkhornConfig::new(100.0, 10);
        assert!((cfg.scale_at(1, 2.0) - 0.5 * 200f64.powf(0.2)).abs() < 1e-12);
        assert_eq!(cfg.scale_at(5, 2.0), 100.0);
        assert_eq!(cfg.scale_at(10, 2.0), 100.0);
        assert_eq!(cfg.with_scaling(false).scale_at(1, 2.0), 100.0);
        assert!((SinkhornConfig::new(0.1, 10).scale_at(1, 2.0) - 0.1).abs() < 1e-15);
    }

    #[test]
    fn frozen_plan_reproduces_value() {
        let a = array![[0.0f64, 0.0], [1.0, 0.5], [2.0, -1.0]];
        let b = array![[0.5, 0.5], [1.5, 1.0]];
        let wb = array![0.3, 1.7];
        let est = sinkhorn_distance(a.view(), b.view(), None, Some(wb.view()), &SinkhornConfig::default()).unwrap();
        let plan = est.transport.clone().unwrap();
        let c = frozen_plan_cost(a.view(), b.view(), plan.view(), None, Some(wb.view()), None, Some(wb.view())).unwrap();
        assert!((c - est.raw).abs() < 1e-14);
    }

    #[test]
    fn invalid_config() {
        let a = array![[0.0f64]];
        assert!(sinkhorn_distance(a.view(), a.view(), None, None, &SinkhornConfig::new(0.0, 5)).is_err());
        assert!(sinkhorn_distance(a.view(), a.view(), None, None, &SinkhornConfig::new(1.0, 0)).is_err());
    }
}
