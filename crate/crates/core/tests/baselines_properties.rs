use cfr_core::baselines::{fit_logistic, fit_ols_s, fit_ols_t, fit_propensity, knn_cate};
use cfr_core::data::ObservationalDataset;
use cfr_core::rng;
use cfr_core::synth::{generate_rct, RctConfig, RctEffect};
use nalgebra::{DMatrix, DVector};
use ndarray::{Array1, Array2};
use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

fn random_dataset(seed: u64, n: usize, d: usize) -> ObservationalDataset<f64> {
    let mut r = rng::stream(seed, "baselines");
    let x = Array2::from_shape_fn((n, d), |_| r.sample::<f64, _>(StandardNormal));
    let mut t: Vec<u8> = (0..n).map(|_| u8::from(r.random::<bool>())).collect();
    t[..3].fill(0);
    t[3..6].fill(1);
    let y = Array1::from_shape_fn(n, |i| x[[i, 0]] - 0.5 * x[[i, d - 1]] + f64::from(t[i]) + r.sample::<f64, _>(StandardNormal));
    ObservationalDataset::new(x, t, y).unwrap()
}

/// Least squares on `[1 | x]` through an SVD solve.
fn svd_least_squares(x: &Array2<f64>, y: &Array1<f64>) -> Vec<f64> {
    let (n, d) = x.dim();
    let a = DMatrix::from_fn(n, d + 1, |i, j| if j == 0 { 1.0 } else { x[[i, j - 1]] });
    let b = DVector::from_iterator(n, y.iter().copied());
    a.svd(true, true).solve(&b, 1e-12).unwrap().iter().copied().collect()
}

fn rows(ds: &ObservationalDataset<f64>, arm: u8) -> (Array2<f64>, Array1<f64>) {
    let idx: Vec<usize> = (0..ds.n()).filter(|&i| ds.t[i] == arm).collect();
    let x = Array2::from_shape_fn((idx.len(), ds.d()), |(k, j)| ds.x[[idx[k], j]]);
    (x, Array1::from_iter(idx.iter().map(|&i| ds.y[i])))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn ols_matches_svd_oracle(seed in any::<u64>(), n in 20usize..80, d in 1usize..5) {
        let ds = random_dataset(seed, n, d);
        let s = fit_ols_s(&ds).unwrap();
        let xt = Array2::from_shape_fn((n, d + 1), |(i, j)| if j < d { ds.x[[i, j]] } else { f64::from(ds.t[i]) });
        let oracle = svd_least_squares(&xt, &ds.y);
        prop_assert!((s.intercept - oracle[0]).abs() < 1e-8);
        for j in 0..d {
            prop_assert!((s.coefficients[j] - oracle[j + 1]).abs() < 1e-8);
        }
        prop_assert!((s.treatment_coef.unwrap() - oracle[d + 1]).abs() < 1e-8);

        let (m0, m1) = fit_ols_t(&ds).unwrap();
        for (arm, m) in [(0u8, &m0), (1u8, &m1)] {
            let (x, y) = rows(&ds, arm);
            if x.nrows() <= d + 1 {
                continue;
            }
            let oracle = svd_least_squares(&x, &y);
            prop_assert!((m.intercept - oracle[0]).abs() < 1e-8);
            for j in 0..d {
                prop_assert!((m.coefficients[j] - oracle[j + 1]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn knn_matches_brute_force(seed in any::<u64>(), k in 1usize..4) {
        let ds = random_dataset(seed, 30, 2);
        let mut r = rng::stream(seed, "queries");
        let q = Array2::from_shape_fn((5, 2), |_| r.sample::<f64, _>(StandardNormal));
        let got = knn_cate(&ds, k, q.view()).unwrap();
        for (qi, row) in q.rows().into_iter().enumerate() {
            let mean_of = |arm: u8| {
                let mut scored: Vec<(f64, f64)> = (0..ds.n())
                    .filter(|&i| ds.t[i] == arm)
                    .map(|i| (ds.x.row(i).iter().zip(row.iter()).map(|(a, b)| (a - b).powi(2)).sum::<f64>(), ds.y[i]))
                    .collect();
                scored.sort_by(|a, b| a.0.total_cmp(&b.0));
                scored[..k].iter().map(|s| s.1).sum::<f64>() / k as f64
            };
            prop_assert!((got[qi] - (mean_of(1) - mean_of(0))).abs() < 1e-12);
        }
    }
}

#[test]
fn logistic_fit_satisfies_stationarity() {
    let mut r = rng::stream(5, "logistic");
    let (n, d) = (400, 3);
    let x = Array2::from_shape_fn((n, d), |_| r.sample::<f64, _>(StandardNormal));
    let y = Array1::from_shape_fn(n, |i| {
        let p = 1.0 / (1.0 + (-(0.3 + x[[i, 0]] - 0.7 * x[[i, 2]])).exp());
        f64::from(u8::from(r.random::<f64>() < p))
    });
    let l2 = 1e-3;
    let fit = fit_logistic(x.view(), y.view(), l2).unwrap();
    let mut grad = vec![0.0; d + 1];
    for i in 0..n {
        let s = fit.intercept + (0..d).map(|j| fit.coefficients[j] * x[[i, j]]).sum::<f64>();
        let resid = 1.0 / (1.0 + (-s).exp()) - y[i];
        grad[0] += resid / n as f64;
        for j in 0..d {
            grad[j + 1] += resid * x[[i, j]] / n as f64;
        }
    }
    for j in 0..d {
        grad[j + 1] += l2 * fit.coefficients[j];
    }
    assert!(grad.iter().all(|g| g.abs() < 1e-7), "{grad:?}");
}

#[test]
fn propensity_on_randomized_data_is_flat() {
    // e = 1/2 everywhere: fitted propensities stay near 1/2 and the
    // intercept is within sampling error of zero
    let mut covered = 0;
    for seed in 0..20 {
        let ds: ObservationalDataset<f64> = generate_rct(&RctConfig::new(2000, 4, RctEffect::Logistic), seed).unwrap();
        let m = fit_propensity(&ds).unwrap();
        let p = m.predict(ds.x.view());
        assert!(p.iter().all(|&v| (v - 0.5).abs() < 0.15), "seed {seed}");
        let se = m.standard_errors().unwrap();
        covered += usize::from((m.fit.intercept / se[0]).abs() < 1.96);
    }
    // nominal 95% coverage; 15/20 is far in the lower tail of Binomial(20, 0.95)
    assert!(covered >= 15, "intercept covered in {covered}/20 draws");
}
