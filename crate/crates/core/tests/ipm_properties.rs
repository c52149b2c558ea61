use cfr_core::ipm::{
    frozen_plan_cost, mmd2_linear, mmd2_linear_weighted, mmd2_quadratic, sinkhorn_distance, KernelConfig, SinkhornConfig,
};
use cfr_core::rng;
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

const STEP: f64 = 1e-5;
const REL_TOL: f64 = 1e-4;

fn normal_cloud(rng: &mut impl Rng, n: usize, d: usize, shift: f64) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal) + shift)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Exact optimal transport between two uniform clouds of equal size: the
/// optimum of the assignment polytope is attained at a permutation.
fn exact_ot_uniform(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let n = a.nrows();
    assert_eq!(n, b.nrows());
    let cost = |i: usize, j: usize| a.row(i).iter().zip(b.row(j).iter()).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let mut perm: Vec<usize> = (0..n).collect();
    let mut best = f64::INFINITY;
    permute(&mut perm, 0, &mut |p| {
        let c: f64 = p.iter().enumerate().map(|(i, &j)| cost(i, j)).sum::<f64>() / n as f64;
        best = best.min(c);
    });
    best
}

fn permute(p: &mut Vec<usize>, k: usize, f: &mut impl FnMut(&[usize])) {
    if k == p.len() {
        f(p);
        return;
    }
    for i in k..p.len() {
        p.swap(k, i);
        permute(p, k + 1, f);
        p.swap(k, i);
    }
}

/// Central differences of `f` with respect to every entry of `x`.
fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
    let mut g = Array2::zeros(x.raw_dim());
    for idx in ndarray::indices(x.dim()) {
        let mut xp = x.clone();
        xp[idx] += STEP;
        let mut xm = x.clone();
        xm[idx] -= STEP;
        g[idx] = (f(&xp) - f(&xm)) / (2.0 * STEP);
    }
    g
}

fn numeric_grad_1d(x: &Array1<f64>, f: impl Fn(&Array1<f64>) -> f64) -> Array1<f64> {
    Array1::from_shape_fn(x.len(), |i| {
        let mut xp = x.clone();
        xp[i] += STEP;
        let mut xm = x.clone();
        xm[i] -= STEP;
        (f(&xp) - f(&xm)) / (2.0 * STEP)
    })
}

fn max_rel(a: &[f64], n: &[f64]) -> f64 {
    a.iter().zip(n).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}

#[test]
fn sinkhorn_near_exact_transport() {
    let mut r = rng::stream(5, "ot");
    for inst in 0..20 {
        let n = 3 + inst % 3;
        let a = normal_cloud(&mut r, n, 2, 0.0);
        let b = normal_cloud(&mut r, n, 2, 0.5);
        let exact = exact_ot_uniform(&a, &b);
        let est = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(100.0, 200)).unwrap();
        assert!((est.value - exact).abs() <= 0.05 * exact, "instance {inst}: {} vs {exact}", est.value);
    }
}

// At large entropy scale convergence is sublinear for near-vertex plans, so
// the iteration count is large enough to make the plan feasible to ~1e-7.
#[test]
fn sinkhorn_decreases_toward_exact_as_entropy_scale_grows() {
    let mut r = rng::stream(6, "ot");
    for inst in 0..20 {
        let n = 2 + inst % 4;
        let a = normal_cloud(&mut r, n, 2, 0.0);
        let b = normal_cloud(&mut r, n, 2, 1.0);
        let exact = exact_ot_uniform(&a, &b);
        let lo = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(1.0, 2000)).unwrap();
        let hi = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::new(100.0, 1_000_000)).unwrap();
        assert!(hi.value <= lo.value + 1e-9, "instance {inst}: hi {} lo {} exact {exact} err {:?}", hi.value, lo.value, hi.marginal_error);
        assert!(hi.value >= exact - 1e-6 && lo.value >= exact - 1e-6, "instance {inst}: hi {} lo {} exact {exact} err {:?}", hi.value, lo.value, hi.marginal_error);
    }
}

#[test]
fn sinkhorn_symmetric_under_swap() {
    let mut r = rng::stream(7, "ot");
    let a = normal_cloud(&mut r, 4, 3, 0.0);
    let b = normal_cloud(&mut r, 6, 3, 0.7);
    let wa = Array1::from_vec(vec![0.5, 1.5, 1.0, 1.0]);
    let cfg = SinkhornConfig::new(5.0, 1000);
    let ab = sinkhorn_distance(a.view(), b.view(), Some(wa.view()), None, &cfg).unwrap();
    let ba = sinkhorn_distance(b.view(), a.view(), None, Some(wa.view()), &cfg).unwrap();
    assert!((ab.value - ba.value).abs() < 1e-9);
}

#[test]
fn quadratic_mmd_unbiased_under_null() {
    let cfg = KernelConfig::fixed(1.0);
    let mut r = rng::stream(8, "mmd-null");
    let mut total = 0.0;
    for _ in 0..1000 {
        let a = normal_cloud(&mut r, 50, 1, 0.0);
        let b = normal_cloud(&mut r, 50, 1, 0.0);
        total += mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap().raw;
    }
    let mean = total / 1000.0;
    assert!(mean.abs() < 0.01, "mean {mean}");
}

#[test]
fn linear_and_quadratic_agree_in_expectation() {
    let cfg = KernelConfig::fixed(1.0);
    let mut r = rng::stream(9, "mmd-lin");
    let reps = 1000;
    let (mut lin, mut quad) = (Vec::with_capacity(reps), Vec::with_capacity(reps));
    for _ in 0..reps {
        let a = normal_cloud(&mut r, 40, 2, 0.0);
        let b = normal_cloud(&mut r, 40, 2, 0.5);
        lin.push(mmd2_linear(a.view(), b.view(), &cfg).unwrap().raw);
        quad.push(mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap().raw);
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let var = |v: &[f64]| {
        let m = mean(v);
        v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64
    };
    let se = ((var(&lin) + var(&quad)) / reps as f64).sqrt();
    assert!((mean(&lin) - mean(&quad)).abs() <= 2.0 * se);
}

#[test]
fn shrinking_clouds_does_not_increase_mmd() {
    let cfg = KernelConfig::fixed(1.0);
    let mut r = rng::stream(10, "shrink");
    for _ in 0..20 {
        // clouds already within the kernel's range; well-separated clouds can
        // move closer in kernel distance when shrunk
        let a = normal_cloud(&mut r, 8, 2, 0.0) * 0.3;
        let b = normal_cloud(&mut r, 9, 2, 1.0) * 0.3;
        let full = mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap().value;
        let f = r.random_range(1.5..5.0);
        let (sa, sb) = (&a / f, &b / f);
        let shrunk = mmd2_quadratic(sa.view(), sb.view(), None, None, &cfg).unwrap().value;
        assert!(shrunk <= full + 1e-12);
    }
}

#[test]
fn shrinking_clouds_drives_mmd_to_zero() {
    let cfg = KernelConfig::fixed(1.0);
    let mut r = rng::stream(15, "shrink");
    let a = normal_cloud(&mut r, 8, 2, 0.0) * 3.0;
    let b = normal_cloud(&mut r, 9, 2, 3.0);
    let values: Vec<f64> = [1.0, 1e2, 1e4]
        .iter()
        .map(|f| {
            let (sa, sb) = (&a / *f, &b / *f);
            mmd2_quadratic(sa.view(), sb.view(), None, None, &cfg).unwrap().value
        })
        .collect();
    assert!(values[2] < 1e-6 && values[2] <= values[1] && values[1] < values[0]);
}

#[test]
fn quadratic_mmd_point_gradients() {
    let cfg = KernelConfig::fixed(1.3);
    let mut r = rng::stream(12, "grad");
    for weighted in [false, true] {
        let a = normal_cloud(&mut r, 5, 3, 0.0);
        let b = normal_cloud(&mut r, 4, 3, 0.5);
        let wa = Array1::from_shape_fn(5, |_| r.random_range(0.2..2.0));
        let wb = Array1::from_shape_fn(4, |_| r.random_range(0.2..2.0));
        let (wa_o, wb_o) = if weighted { (Some(wa.view()), Some(wb.view())) } else { (None, None) };
        let est = mmd2_quadratic(a.view(), b.view(), wa_o, wb_o, &cfg).unwrap();
        let na = numeric_grad(&a, |x| mmd2_quadratic(x.view(), b.view(), wa_o, wb_o, &cfg).unwrap().raw);
        let nb = numeric_grad(&b, |x| mmd2_quadratic(a.view(), x.view(), wa_o, wb_o, &cfg).unwrap().raw);
        assert!(max_rel(est.grad_a.as_slice().unwrap(), na.as_slice().unwrap()) < REL_TOL);
        assert!(max_rel(est.grad_b.as_slice().unwrap(), nb.as_slice().unwrap()) < REL_TOL);
        if weighted {
            let nwa = numeric_grad_1d(&wa, |w| mmd2_quadratic(a.view(), b.view(), Some(w.view()), wb_o, &cfg).unwrap().raw);
            let nwb = numeric_grad_1d(&wb, |w| mmd2_quadratic(a.view(), b.view(), wa_o, Some(w.view()), &cfg).unwrap().raw);
            assert!(max_rel(est.grad_weights_a.unwrap().as_slice().unwrap(), nwa.as_slice().unwrap()) < REL_TOL);
            assert!(max_rel(est.grad_weights_b.unwrap().as_slice().unwrap(), nwb.as_slice().unwrap()) < REL_TOL);
        }
    }
}

#[test]
fn linear_mmd_gradients() {
    let cfg = KernelConfig::fixed(0.9);
    let mut r = rng::stream(13, "grad");
    let a = normal_cloud(&mut r, 6, 2, 0.0);
    let b = normal_cloud(&mut r, 7, 2, 0.3);
    let wa = Array1::from_shape_fn(6, |_| r.random_range(0.2..2.0));
    let wb = Array1::from_shape_fn(7, |_| r.random_range(0.2..2.0));
    let est = mmd2_linear(a.view(), b.view(), &cfg).unwrap();
    let na = numeric_grad(&a, |x| mmd2_linear(x.view(), b.view(), &cfg).unwrap().raw);
    assert!(max_rel(est.grad_a.as_slice().unwrap(), na.as_slice().unwrap()) < REL_TOL);
    let est = mmd2_linear_weighted(a.view(), b.view(), Some(wa.view()), Some(wb.view()), &cfg).unwrap();
    let nb = numeric_grad(&b, |x| {
        mmd2_linear_weighted(a.view(), x.view(), Some(wa.view()), Some(wb.view()), &cfg).unwrap().raw
    });
    assert!(max_rel(est.grad_b.as_slice().unwrap(), nb.as_slice().unwrap()) < REL_TOL);
    let nwa = numeric_grad_1d(&wa, |w| {
        mmd2_linear_weighted(a.view(), b.view(), Some(w.view()), Some(wb.view()), &cfg).unwrap().raw
    });
    assert!(max_rel(est.grad_weights_a.unwrap().as_slice().unwrap(), nwa.as_slice().unwrap()) < REL_TOL);
}

#[test]
fn sinkhorn_gradients_of_frozen_plan() {
    let cfg = SinkhornConfig::default();
    let mut r = rng::stream(14, "grad");
    let a = normal_cloud(&mut r, 5, 2, 0.0);
    let b = normal_cloud(&mut r, 4, 2, 0.8);
    let wa = Array1::from_shape_fn(5, |_| r.random_range(0.2..2.0));
    let wb = Array1::from_shape_fn(4, |_| r.random_range(0.2..2.0));
    let est = sinkhorn_distance(a.view(), b.view(), Some(wa.view()), Some(wb.view()), &cfg).unwrap();
    let plan = est.transport.clone().unwrap();
    let frozen = |x: &Array2<f64>, y: &Array2<f64>, u: &Array1<f64>, v: &Array1<f64>| {
        frozen_plan_cost(x.view(), y.view(), plan.view(), Some(wa.view()), Some(wb.view()), Some(u.view()), Some(v.view()))
            .unwrap()
    };
    let na = numeric_grad(&a, |x| frozen(x, &b, &wa, &wb));
    let nb = numeric_grad(&b, |y| frozen(&a, y, &wa, &wb));
    let nwa = numeric_grad_1d(&wa, |u| frozen(&a, &b, u, &wb));
    let nwb = numeric_grad_1d(&wb, |v| frozen(&a, &b, &wa, v));
    assert!(max_rel(est.grad_a.as_slice().unwrap(), na.as_slice().unwrap()) < REL_TOL);
    assert!(max_rel(est.grad_b.as_slice().unwrap(), nb.as_slice().unwrap()) < REL_TOL);
    assert!(max_rel(est.grad_weights_a.unwrap().as_slice().unwrap(), nwa.as_slice().unwrap()) < REL_TOL);
    assert!(max_rel(est.grad_weights_b.unwrap().as_slice().unwrap(), nwb.as_slice().unwrap()) < REL_TOL);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn quadratic_mmd_symmetric(seed in any::<u64>(), m in 2usize..8, n in 2usize..8) {
        let mut r = rng::stream(seed, "sym");
        let a = normal_cloud(&mut r, m, 2, 0.0);
        let b = normal_cloud(&mut r, n, 2, 0.4);
        let cfg = KernelConfig::default();
        let ab = mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap();
        let ba = mmd2_quadratic(b.view(), a.view(), None, None, &cfg).unwrap();
        prop_assert!((ab.raw - ba.raw).abs() < 1e-12);
        prop_assert_eq!(ab.grad_a.dim(), a.dim());
    }

    #[test]
    fn weighted_mmd_with_unit_weights_close_to_unbiased(seed in any::<u64>(), m in 2usize..10, n in 2usize..10) {
        let mut r = rng::stream(seed, "vu");
        let a = normal_cloud(&mut r, m, 2, 0.0);
        let b = normal_cloud(&mut r, n, 2, 0.4);
        let cfg = KernelConfig::fixed(1.0);
        let u = mmd2_quadratic(a.view(), b.view(), None, None, &cfg).unwrap();
        let (oa, ob) = (Array1::ones(m), Array1::ones(n));
        let v = mmd2_quadratic(a.view(), b.view(), Some(oa.view()), Some(ob.view()), &cfg).unwrap();
        prop_assert!((v.raw - u.raw).abs() <= 1.0 / (m as f64 - 1.0) + 1.0 / (n as f64 - 1.0));
    }

    #[test]
    fn sinkhorn_columns_match_marginals(seed in any::<u64>(), m in 1usize..6, n in 1usize..6) {
        let mut r = rng::stream(seed, "marg");
        let a = normal_cloud(&mut r, m, 2, 0.0);
        let b = normal_cloud(&mut r, n, 2, 0.2);
        let est = sinkhorn_distance(a.view(), b.view(), None, None, &SinkhornConfig::default()).unwrap();
        let plan = est.transport.unwrap();
        for c in plan.sum_axis(ndarray::Axis(0)).iter() {
            prop_assert!((c - 1.0 / n as f64).abs() < 1e-12);
        }
        prop_assert!(est.value >= 0.0);
    }
}
