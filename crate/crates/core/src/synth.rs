//! Semi-synthetic data: IHDP-style response surfaces, randomized cohorts with
//! known propensities, and imbalance-inducing biased subsampling of controls.

use std::str::FromStr;

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::baselines::fit_propensity;
use crate::data::{standardize, ObservationalDataset};
use crate::error::{CfrError, Result};
use crate::rng;
use crate::scalar::{sigmoid, Scalar};

/// Configuration of the IHDP-like generator.
///
/// The default `target_att` of 4 is a conventional calibration target, not a
/// value taken from any published realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IhdpLikeConfig {
    pub n: usize,
    pub d: usize,
    /// Probability that a response coefficient is exactly zero.
    pub sparsity: f64,
    /// Nonzero coefficient magnitudes, drawn uniformly.
    pub coefficient_levels: Vec<f64>,
    pub noise_std: f64,
    pub target_att: f64,
    /// Scale of the logistic treatment-assignment score; 0 gives an RCT.
    pub confounding_strength: f64,
    /// Intercept of the assignment score (negative values give fewer treated).
    pub treatment_intercept: f64,
    /// Offset added to covariates inside the exponential surface.
    pub exp_offset: f64,
    /// Put the exponential surface on the control arm instead of the treated arm.
    pub swap_arms: bool,
}

impl Default for IhdpLikeConfig {
    fn default() -> Self {
        IhdpLikeConfig {
            n: 747,
            d: 25,
            sparsity: 0.6,
            coefficient_levels: vec![0.1, 0.2, 0.3, 0.4],
            noise_std: 1.0,
            target_att: 4.0,
            confounding_strength: 1.0,
            treatment_intercept: 0.0,
            exp_offset: 0.5,
            swap_arms: false,
        }
    }
}

impl IhdpLikeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.sparsity) {
            return Err(CfrError::Config(format!("sparsity {} outside [0,1]", self.sparsity)));
        }
        if !(self.noise_std >= 0.0) {
            return Err(CfrError::Config(format!("noise_std must be nonnegative, got {}", self.noise_std)));
        }
        if self.n < 4 || self.d < 1 {
            return Err(CfrError::Config(format!("need n >= 4 and d >= 1, got n={} d={}", self.n, self.d)));
        }
        if self.coefficient_levels.is_empty() && self.sparsity < 1.0 {
            return Err(CfrError::Config("coefficient_levels is empty".into()));
        }
        Ok(())
    }
}

/// Response coefficients of the IHDP-like surface.
pub fn draw_coefficients<R: Rng>(cfg: &IhdpLikeConfig, rng: &mut R) -> Vec<f64> {
    (0..cfg.d)
        .map(|_| {
            if rng.random::<f64>() < cfg.sparsity {
                0.0
            } else {
                cfg.coefficient_levels[rng.random_range(0..cfg.coefficient_levels.len())]
            }
        })
        .collect()
}

/// Draws an IHDP-like dataset: standard normal covariates, an
/// exponential-linear surface `exp((x + c)·β)` on one arm and a linear
/// surface `x·β - ω` on the other, with `ω` chosen so the average effect on
/// the generated treated units equals `target_att`.
pub fn generate_ihdp_like<S: Scalar>(cfg: &IhdpLikeConfig, seed: u64) -> Result<ObservationalDataset<S>> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, rng::DATA);
    let (n, d) = (cfg.n, cfg.d);
    let x = Array2::<f64>::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    let beta = draw_coefficients(cfg, &mut rng);
    let mut gamma: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
    let norm = gamma.iter().map(|g| g * g).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    gamma.iter_mut().for_each(|g| *g /= norm);

    let mut e = Vec::with_capacity(n);
    let mut t = Vec::with_capacity(n);
    for i in 0..n {
        let score: f64 = cfg.treatment_intercept + cfg.confounding_strength * (0..d).map(|j| x[[i, j]] * gamma[j]).sum::<f64>();
        let p = sigmoid(score);
        t.push(u8::from(rng.random::<f64>() < p));
        e.push(p);
    }
    if !t.contains(&1) {
        return Err(CfrError::Generation(format!("seed {seed} produced no treated units; use another seed or larger n")));
    }
    let lin: Vec<f64> = (0..n).map(|i| (0..d).map(|j| x[[i, j]] * beta[j]).sum()).collect();
    let expo: Vec<f64> = (0..n)
        .map(|i| (0..d).map(|j| (x[[i, j]] + cfg.exp_offset) * beta[j]).sum::<f64>().exp())
        .collect();
    let treated: Vec<usize> = (0..n).filter(|&i| t[i] == 1).collect();
    let nt = treated.len() as f64;
    // effect without the offset, averaged over the treated
    let base_att = treated
        .iter()
        .map(|&i| if cfg.swap_arms { lin[i] - expo[i] } else { expo[i] - lin[i] })
        .sum::<f64>()
        / nt;
    let (mu0, mu1): (Vec<f64>, Vec<f64>) = if cfg.swap_arms {
        // mu1 = lin - ω, tau = lin - ω - exp
        let omega = base_att - cfg.target_att;
        (expo.clone(), lin.iter().map(|l| l - omega).collect())
    } else {
        // mu0 = lin - ω, tau = exp - lin + ω
        let omega = cfg.target_att - base_att;
        (lin.iter().map(|l| l - omega).collect(), expo.clone())
    };
    let y: Vec<f64> = (0..n)
        .map(|i| {
            let mu = if t[i] == 1 { mu1[i] } else { mu0[i] };
            let eps: f64 = rng.sample(StandardNormal);
            mu + cfg.noise_std * eps
        })
        .collect();
    let cast = |v: Vec<f64>| Array1::from_iter(v.into_iter().map(S::c));
    ObservationalDataset::new(x.mapv(S::c), t, cast(y))?
        .with_truth(cast(mu0), cast(mu1))?
        .with_propensity(cast(e))
}

/// Built-in response pairs for randomized cohorts.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum RctEffect {
    /// `mu1 = mu0`.
    Zero,
    /// `mu1 = mu0 + 1 + x1`.
    Linear,
    /// `mu1 = exp(0.5 Σ c_j (x_j + 0.5))`.
    ExpLinear,
    /// `mu1 = mu0 + sign(x1 - threshold)`.
    Step { threshold: f64 },
    /// Binary outcomes: `mu0 = σ(base - 0.5)`, `mu1 = σ(base - 0.5 + 2 x1)`.
    Logistic,
}

impl RctEffect {
    /// `(mu0, mu1)` at covariate row `x`.
    pub fn evaluate(&self, x: &[f64]) -> (f64, f64) {
        let d = x.len() as f64;
        let c = 0.5 / d.sqrt();
        let base: f64 = x.iter().map(|v| c * v).sum();
        match *self {
            RctEffect::Zero => (base, base),
            RctEffect::Linear => (base, base + 1.0 + x[0]),
            RctEffect::ExpLinear => (base, (0.5 * x.iter().map(|v| c * (v + 0.5)).sum::<f64>()).exp()),
            RctEffect::Step { threshold } => {
                let s = if x[0] > threshold {
                    1.0
                } else if x[0] < threshold {
                    -1.0
                } else {
                    0.0
                };
                (base, base + s)
            }
            RctEffect::Logistic => (sigmoid(base - 0.5), sigmoid(base - 0.5 + 2.0 * x[0])),
        }
    }

    pub fn is_binary(&self) -> bool {
        matches!(self, RctEffect::Logistic)
    }
}

impl FromStr for RctEffect {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "zero" => Ok(RctEffect::Zero),
            "linear" => Ok(RctEffect::Linear),
            "exp-linear" | "exponential-linear" => Ok(RctEffect::ExpLinear),
            "step" => Ok(RctEffect::Step { threshold: 0.0 }),
            "logistic" | "binary" => Ok(RctEffect::Logistic),
            other => Err(CfrError::Config(format!(
                "unknown effect function '{other}' (expected zero, linear, exp-linear, step, logistic)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RctConfig {
    pub n: usize,
    pub d: usize,
    pub effect: RctEffect,
    /// Gaussian outcome noise; ignored for binary outcomes.
    pub noise_std: f64,
}

impl RctConfig {
    pub fn new(n: usize, d: usize, effect: RctEffect) -> Self {
        RctConfig { n, d, effect, noise_std: 1.0 }
    }
}

/// Randomized cohort: `T ~ Bernoulli(0.5)` independent of `X ~ N(0, I)`.
pub fn generate_rct<S: Scalar>(cfg: &RctConfig, seed: u64) -> Result<ObservationalDataset<S>> {
    if cfg.n < 2 || cfg.d < 1 {
        return Err(CfrError::Config(format!("need n >= 2 and d >= 1, got n={} d={}", cfg.n, cfg.d)));
    }
    let mut rng = rng::stream(seed, rng::DATA);
    let (n, d) = (cfg.n, cfg.d);
    let x = Array2::<f64>::from_shape_fn((n, d), |_| rng.sample(StandardNormal));
    let t: Vec<u8> = (0..n).map(|_| u8::from(rng.random::<bool>())).collect();
    let mut mu0 = Vec::with_capacity(n);
    let mut mu1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let row = x.row(i).to_vec();
        let (m0, m1) = cfg.effect.evaluate(&row);
        let m = if t[i] == 1 { m1 } else { m0 };
        y.push(if cfg.effect.is_binary() {
            f64::from(u8::from(rng.random::<f64>() < m))
        } else {
            let eps: f64 = rng.sample(StandardNormal);
            m + cfg.noise_std * eps
        });
        mu0.push(m0);
        mu1.push(m1);
    }
    let cast = |v: Vec<f64>| Array1::from_iter(v.into_iter().map(S::c));
    ObservationalDataset::new(x.mapv(S::c), t, cast(y))?
        .with_truth(cast(mu0), cast(mu1))?
        .with_propensity(Array1::from_elem(n, S::c(0.5)))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsampleConfig {
    /// Probability of removing the highest-propensity control at each step.
    pub q: f64,
    pub target_size: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SubsampleOutcome<S> {
    /// Surviving row indices, ascending.
    pub kept: Vec<usize>,
    /// Removed control indices in removal order.
    pub removed: Vec<usize>,
    /// Estimated propensities of all input rows.
    pub propensity: Array1<S>,
}

/// Removes controls one at a time until `target_size` rows remain: with
/// probability `q` the remaining control of highest estimated propensity
/// (lowest index on ties), otherwise a uniformly random remaining control.
///
/// The propensity model is a logistic regression on standardized covariates.
pub fn biased_subsample_indices<S: Scalar>(ds: &ObservationalDataset<S>, cfg: &SubsampleConfig) -> Result<SubsampleOutcome<S>> {
    if !(0.0..=1.0).contains(&cfg.q) {
        return Err(CfrError::Config(format!("q = {} outside [0,1]", cfg.q)));
    }
    let n = ds.n();
    if cfg.target_size >= n {
        return Err(CfrError::Size(format!("target size {} must be below n = {n}", cfg.target_size)));
    }
    let deficit = n - cfg.target_size;
    let (control, _) = ds.treatment_groups();
    if control.len() < deficit + 2 {
        return Err(CfrError::Size(format!(
            "{} controls cannot absorb {deficit} removals and keep two controls",
            control.len()
        )));
    }
    let all: Vec<usize> = (0..n).collect();
    let (std_ds, _) = standardize(ds, &all)?;
    let eta = fit_propensity(&std_ds)?.predict(std_ds.x.view());

    // remaining controls ordered by descending propensity, then index
    let mut remaining = control;
    remaining.sort_by(|&a, &b| eta[b].partial_cmp(&eta[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    let mut rng = rng::stream(cfg.seed, rng::SUBSAMPLE);
    let mut removed = Vec::with_capacity(deficit);
    for _ in 0..deficit {
        let u: f64 = rng.random();
        let pos = if u < cfg.q { 0 } else { rng.random_range(0..remaining.len()) };
        removed.push(remaining.remove(pos));
    }
    let mut gone = vec![false; n];
    for &i in &removed {
        gone[i] = true;
    }
    Ok(SubsampleOutcome {
        kept: (0..n).filter(|&i| !gone[i]).collect(),
        removed,
        propensity: eta,
    })
}

pub fn biased_subsample<S: Scalar>(ds: &ObservationalDataset<S>, cfg: &SubsampleConfig) -> Result<ObservationalDataset<S>> {
    let out = biased_subsample_indices(ds, cfg)?;
    Ok(ds.subset(&out.kept))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn small_cfg() -> IhdpLikeConfig {
        IhdpLikeConfig {
            n: 200,
            d: 5,
            ..Default::default()
        }
    }

    #[test]
    fn ihdp_calibrates_att_exactly() {
        for swap in [false, true] {
            let cfg = IhdpLikeConfig { swap_arms: swap, ..small_cfg() };
            let ds: ObservationalDataset<f64> = generate_ihdp_like(&cfg, 3).unwrap();
            let tau = ds.tau().unwrap();
            let (_, tr) = ds.treatment_groups();
            let att = tr.iter().map(|&i| tau[i]).sum::<f64>() / tr.len() as f64;
            assert!((att - cfg.target_att).abs() < 1e-9, "swap={swap} att={att}");
        }
    }

    #[test]
    fn ihdp_rct_limit_and_noiseless_limit() {
        let cfg = IhdpLikeConfig {
            confounding_strength: 0.0,
            noise_std: 0.0,
            ..small_cfg()
        };
        let ds: ObservationalDataset<f64> = generate_ihdp_like(&cfg, 9).unwrap();
        assert!(ds.e.as_ref().unwrap().iter().all(|&p| p == 0.5));
        for i in 0..ds.n() {
            assert_eq!(ds.y[i], ds.mu(ds.t[i]).unwrap()[i]);
        }
    }

    #[test]
    fn ihdp_is_deterministic() {
        let a: ObservationalDataset<f64> = generate_ihdp_like(&small_cfg(), 5).unwrap();
        let b: ObservationalDataset<f64> = generate_ihdp_like(&small_cfg(), 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn sparsity_matches_binomial_mean() {
        let cfg = IhdpLikeConfig::default();
        let seeds = 1000;
        let total: usize = (0..seeds)
            .map(|s| {
                let mut rng = rng::stream(s, rng::DATA);
                draw_coefficients(&cfg, &mut rng).iter().filter(|&&b| b != 0.0).count()
            })
            .sum();
        let mean = total as f64 / seeds as f64;
        assert!((mean - 10.0).abs() < 0.5, "mean nonzero count {mean}");
    }

    #[test]
    fn rct_effects() {
        let zero: ObservationalDataset<f64> = generate_rct(&RctConfig::new(50, 3, RctEffect::Zero), 1).unwrap();
        assert!(zero.tau().unwrap().iter().all(|&v| v == 0.0));
        let step: ObservationalDataset<f64> = generate_rct(&RctConfig::new(200, 3, "step".parse().unwrap()), 2).unwrap();
        let tau = step.tau().unwrap();
        for i in 0..step.n() {
            assert_eq!(tau[i].signum(), step.x[[i, 0]].signum());
            let (m0, m1) = RctEffect::Step { threshold: 0.0 }.evaluate(&step.x.row(i).to_vec());
            assert_eq!((m0, m1), (step.mu0.as_ref().unwrap()[i], step.mu1.as_ref().unwrap()[i]));
        }
        assert!(step.e.as_ref().unwrap().iter().all(|&p| p == 0.5));
        assert!("bogus".parse::<RctEffect>().is_err());
        let bin: ObservationalDataset<f64> = generate_rct(&RctConfig::new(100, 2, RctEffect::Logistic), 3).unwrap();
        assert!(bin.y.iter().all(|&v| v == 0.0 || v == 1.0));
    }

    #[test]
    fn rct_group_sizes_binomial() {
        let n = 10_000;
        let ds: ObservationalDataset<f64> = generate_rct(&RctConfig::new(n, 2, RctEffect::Linear), 17).unwrap();
        let (c, t) = ds.treatment_groups();
        let bound = 3.0 * (n as f64).sqrt();
        assert!((t.len() as f64 - n as f64 / 2.0).abs() < bound);
        assert_eq!(c.len() + t.len(), n);
    }

    fn imbalanced() -> ObservationalDataset<f64> {
        let cfg = IhdpLikeConfig {
            n: 120,
            d: 3,
            confounding_strength: 1.5,
            treatment_intercept: -0.5,
            ..Default::default()
        };
        generate_ihdp_like(&cfg, 21).unwrap()
    }

    #[test]
    fn subsample_q1_removes_top_propensity_controls() {
        let ds = imbalanced();
        let target = 90;
        let out = biased_subsample_indices(&ds, &SubsampleConfig { q: 1.0, target_size: target, seed: 0 }).unwrap();
        assert_eq!(out.kept.len(), target);
        let (control, treated) = ds.treatment_groups();
        assert!(treated.iter().all(|i| out.kept.binary_search(i).is_ok()));
        let mut ranked = control.clone();
        ranked.sort_by(|&a, &b| out.propensity[b].partial_cmp(&out.propensity[a]).unwrap().then(a.cmp(&b)));
        assert_eq!(out.removed, ranked[..ds.n() - target].to_vec());
    }

    #[test]
    fn subsample_removes_control_twin_of_treated_first() {
        // controls near -2, treated near +2, plus one control sitting on a treated unit
        let x = array![[-2.0], [-2.5], [-1.5], [-2.2], [-1.8], [2.5], [2.0], [1.5], [2.4], [2.5]];
        let t = vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 0];
        let ds = ObservationalDataset::<f64>::new(x, t, Array1::zeros(10)).unwrap();
        let out = biased_subsample_indices(&ds, &SubsampleConfig { q: 1.0, target_size: 8, seed: 4 }).unwrap();
        let eta = &out.propensity;
        assert!((0..9).filter(|&i| ds.t[i] == 0).all(|i| eta[9] > eta[i]));
        assert_eq!(out.removed[0], 9);
    }

    #[test]
    fn subsample_errors() {
        let ds = imbalanced();
        let n = ds.n();
        assert!(matches!(
            biased_subsample(&ds, &SubsampleConfig { q: 0.5, target_size: n, seed: 0 }),
            Err(CfrError::Size(_))
        ));
        let (c, _) = ds.treatment_groups();
        let too_far = n - c.len();
        assert!(matches!(
            biased_subsample(&ds, &SubsampleConfig { q: 0.5, target_size: too_far, seed: 0 }),
            Err(CfrError::Size(_))
        ));
    }

    #[test]
    fn subsample_q0_is_uniform_over_controls() {
        // 10 treated, 40 controls; 2 removals leave each control with survival rate 0.95
        let x = Array2::from_shape_fn((50, 2), |(i, j)| ((i * 7 + j * 3) % 11) as f64 / 5.0 - 1.0 + if i < 10 { 1.0 } else { 0.0 });
        let t: Vec<u8> = (0..50).map(|i| u8::from(i < 10)).collect();
        let ds = ObservationalDataset::<f64>::new(x, t, Array1::zeros(50)).unwrap();
        let seeds = 200;
        let mut survived = vec![0usize; 50];
        for s in 0..seeds {
            let out = biased_subsample_indices(&ds, &SubsampleConfig { q: 0.0, target_size: 48, seed: s }).unwrap();
            for i in out.kept {
                survived[i] += 1;
            }
        }
        let rate = 38.0 / 40.0;
        for (i, &count) in survived.iter().enumerate().skip(10) {
            let f = count as f64 / seeds as f64;
            assert!((f - rate).abs() <= 0.05, "control {i} survived {f}");
        }
        assert!(survived[..10].iter().all(|&c| c == seeds as usize));
    }
}
