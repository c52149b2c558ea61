//! Learning objectives and the optimization loop.

mod objective;

use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{DatasetSplit, ObservationalDataset};
use crate::error::{CfrError, Result};
use crate::evaluation::{policy_risk, surrogate_mse_nn, PolicyRiskForm};
use crate::ipm::IpmConfig;
use crate::nnet::{init_model, Architecture, CfrModel};
use crate::rng;
use crate::scalar::Scalar;

pub use objective::{
    factual_weighted_risk, head_weight_indices, objective_gradient_check, term_gradients, total_objective, update_direction, Batch, ObjectiveValue, TermGradients, WeightUpdate,
    Weighting,
};

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    /// Weight of the IPM penalty between group representations.
    pub alpha: f64,
    /// Weight of the outcome-head norm penalty.
    pub lambda_h: f64,
    /// Weight of the learned-weight norm penalty.
    pub lambda_w: f64,
    pub ipm: IpmConfig,
    pub weighting: Weighting,
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("alpha", self.alpha), ("lambda_h", self.lambda_h), ("lambda_w", self.lambda_w)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(CfrError::Config(format!("{name} must be finite and nonnegative, got {v}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValidationCriterion {
    /// Training objective evaluated on the validation split.
    #[default]
    Objective,
    /// Nearest-neighbour CATE surrogate on the validation split.
    SurrogateMse,
    /// Policy risk at threshold 0 on the validation split.
    PolicyRisk,
}

impl std::str::FromStr for ValidationCriterion {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "objective" => Ok(ValidationCriterion::Objective),
            "surrogate" | "surrogate-mse" => Ok(ValidationCriterion::SurrogateMse),
            "policy-risk" => Ok(ValidationCriterion::PolicyRisk),
            other => Err(CfrError::Config(format!("unknown validation criterion '{other}'"))),
        }
    }
}

impl std::fmt::Display for ValidationCriterion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ValidationCriterion::Objective => "objective",
            ValidationCriterion::SurrogateMse => "surrogate-mse",
            ValidationCriterion::PolicyRisk => "policy-risk",
        })
    }
}

/// Adam step-size adaptation coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { beta1: 0.9, beta2: 0.999, epsilon: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub learning_rate: f64,
    /// Epochs without validation improvement before stopping; 0 disables
    /// stopping early (the best epoch is still restored).
    pub early_stop_patience: usize,
    pub validation_objective: ValidationCriterion,
    pub seed: u64,
    pub adam: AdamConfig,
    #[serde(default)]
    pub weight_update: WeightUpdate,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 100,
            max_epochs: 300,
            learning_rate: 1e-3,
            early_stop_patience: 30,
            validation_objective: ValidationCriterion::Objective,
            seed: 0,
            adam: AdamConfig::default(),
            weight_update: WeightUpdate::Joint,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 4 {
            return Err(CfrError::Config(format!("batch_size must be at least 4, got {}", self.batch_size)));
        }
        if self.max_epochs == 0 {
            return Err(CfrError::Config("max_epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(CfrError::Config(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Factual weighted risk on the training split.
    pub risk: f64,
    /// Unscaled IPM between group representations on the training split.
    pub ipm: f64,
    pub wnorm: f64,
    pub objective_train: f64,
    pub objective_valid: f64,
    /// Validation criterion used for early stopping.
    pub criterion: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
}

impl TrainHistory {
    pub const CSV_HEADER: &'static str = "epoch,risk,ipm,wnorm,objective_train,objective_valid,criterion";

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in &self.records {
            out.push_str(&format!(
                "{},{:e},{:e},{:e},{:e},{:e},{:e}\n",
                r.epoch, r.risk, r.ipm, r.wnorm, r.objective_train, r.objective_valid, r.criterion
            ));
        }
        out
    }

    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::File::create(path)
            .and_then(|mut f| f.write_all(self.to_csv().as_bytes()))
            .map_err(|e| CfrError::io(path, e))
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<S> {
    /// Parameters from the best validation epoch.
    pub model: CfrModel<S>,
    pub history: TrainHistory,
    /// 1-based epoch whose parameters were restored.
    pub best_epoch: usize,
    pub best_criterion: f64,
}

/// Stratified mini-batches: each group is shuffled and cut into the same
/// number of nearly equal chunks, so every batch holds both groups in the
/// overall proportion (within one sample).
pub fn stratified_batches(t: &[u8], batch_size: usize, rng: &mut impl rand::Rng) -> Result<Vec<Vec<usize>>> {
    let (mut c, mut tr) = crate::data::treatment_groups(t);
    if c.len() < 2 || tr.len() < 2 {
        return Err(CfrError::Batching(format!(
            "need at least 2 units per group for stratified batches (controls {}, treated {})",
            c.len(),
            tr.len()
        )));
    }
    let n = t.len();
    let wanted = ((n as f64 / batch_size as f64).round() as usize).max(1);
    let nb = wanted.min(c.len() / 2).min(tr.len() / 2);
    c.shuffle(rng);
    tr.shuffle(rng);
    let chunk = |v: &[usize], k: usize| v[k * v.len() / nb..(k + 1) * v.len() / nb].to_vec();
    Ok((0..nb).map(|k| [chunk(&c, k), chunk(&tr, k)].concat()).collect())
}

struct Adam<S> {
    cfg: AdamConfig,
    lr: f64,
    m: Array1<S>,
    v: Array1<S>,
    step: i32,
}

impl<S: Scalar> Adam<S> {
    fn new(len: usize, lr: f64, cfg: AdamConfig) -> Self {
        Adam { cfg, lr, m: Array1::zeros(len), v: Array1::zeros(len), step: 0 }
    }

    fn update(&mut self, params: &mut Array1<S>, grad: &Array1<S>) {
        self.step += 1;
        let (b1, b2) = (S::c(self.cfg.beta1), S::c(self.cfg.beta2));
        let c1 = S::one() - b1.powi(self.step);
        let c2 = S::one() - b2.powi(self.step);
        let (lr, eps) = (S::c(self.lr), S::c(self.cfg.epsilon));
        ndarray::Zip::from(params).and(&mut self.m).and(&mut self.v).and(grad).for_each(|p, m, v, &g| {
            *m = b1 * *m + (S::one() - b1) * g;
            *v = b2 * *v + (S::one() - b2) * g * g;
            *p -= lr * (*m / c1) / ((*v / c2).sqrt() + eps);
        });
    }
}

fn batch_of<S: Scalar>(ds: &ObservationalDataset<S>, rows: &[usize], weights: Option<&Array1<S>>) -> Batch<S> {
    Batch {
        x: ds.x.select(Axis(0), rows),
        t: rows.iter().map(|&i| ds.t[i]).collect(),
        y: rows.iter().map(|&i| ds.y[i]).collect(),
        weights: weights.map(|w| rows.iter().map(|&i| w[i]).collect()),
    }
}

fn criterion<S: Scalar>(
    model: &CfrModel<S>,
    valid: &ObservationalDataset<S>,
    objective_valid: f64,
    which: ValidationCriterion,
) -> Result<f64> {
    match which {
        ValidationCriterion::Objective => Ok(objective_valid),
        ValidationCriterion::SurrogateMse => surrogate_mse_nn(model.predict_cate(valid.x.view())?.view(), valid),
        ValidationCriterion::PolicyRisk => {
            let (f0, f1) = model.predict_potential_outcomes(valid.x.view())?;
            match policy_risk(f0.view(), f1.view(), valid, 0.0, PolicyRiskForm::SelfNormalized) {
                Ok(p) => Ok(p.risk),
                Err(CfrError::NoPolicyMatches { .. }) => Ok(f64::INFINITY),
                Err(e) => Err(e),
            }
        }
    }
}

/// Trains with uniform or learned weighting; see [`train_with_weights`].
pub fn train<S: Scalar>(
    model: CfrModel<S>,
    ds: &ObservationalDataset<S>,
    split: &DatasetSplit,
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
) -> Result<TrainOutcome<S>> {
    train_with_weights(model, ds, split, ocfg, tcfg, None)
}

/// Mini-batch Adam on the objective, with per-epoch metrics on the full
/// training and validation splits and early stopping on the configured
/// validation criterion. `weights` (indexed over all rows of `ds`) are
/// required for fixed weighting.
pub fn train_with_weights<S: Scalar>(
    mut model: CfrModel<S>,
    ds: &ObservationalDataset<S>,
    split: &DatasetSplit,
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
    weights: Option<&Array1<S>>,
) -> Result<TrainOutcome<S>> {
    ocfg.validate()?;
    tcfg.validate()?;
    if split.train.is_empty() || split.valid.is_empty() {
        return Err(CfrError::Size("training needs nonempty train and validation splits".into()));
    }
    if ocfg.weighting == Weighting::Fixed && weights.is_none() {
        return Err(CfrError::Config("fixed weighting needs sample weights".into()));
    }
    if let Some(w) = weights {
        if w.len() != ds.n() {
            return Err(CfrError::Shape(format!("{} weights for {} rows", w.len(), ds.n())));
        }
    }
    let fixed = if ocfg.weighting == Weighting::Fixed { weights } else { None };
    let train_full = batch_of(ds, &split.train, fixed);
    let valid_full = batch_of(ds, &split.valid, fixed);
    let valid_ds = ds.subset(&split.valid);
    let train_t = train_full.t.clone();

    let mut r = rng::stream(tcfg.seed, rng::BATCHING);
    let mut adam = Adam::new(model.parameter_count(), tcfg.learning_rate, tcfg.adam);
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut since_best = 0usize;
    let last_finite = |h: &TrainHistory| h.records.last().map(|r| r.epoch);

    for epoch in 1..=tcfg.max_epochs {
        for rows in stratified_batches(&train_t, tcfg.batch_size, &mut r)? {
            let global: Vec<usize> = rows.iter().map(|&k| split.train[k]).collect();
            let batch = batch_of(ds, &global, fixed);
            let obj = update_direction(&model, &batch, ocfg, tcfg.weight_update)?;
            if !obj.total.is_finite() || obj.grad.iter().any(|g| !g.is_finite()) {
                return Err(CfrError::Diverged { epoch, last_finite_epoch: last_finite(&history) });
            }
            adam.update(&mut model.params, &obj.grad);
        }
        let tr = total_objective(&model, &train_full, ocfg)?;
        let va = total_objective(&model, &valid_full, ocfg)?;
        let crit = criterion(&model, &valid_ds, va.total.as_f64(), tcfg.validation_objective)?;
        let rec = EpochRecord {
            epoch,
            risk: tr.risk.as_f64(),
            ipm: tr.ipm_raw.as_f64(),
            wnorm: tr.weight_norm.as_f64(),
            objective_train: tr.total.as_f64(),
            objective_valid: va.total.as_f64(),
            criterion: crit,
        };
        if !rec.objective_train.is_finite() || !rec.objective_valid.is_finite() || crit.is_nan() {
            return Err(CfrError::Diverged { epoch, last_finite_epoch: last_finite(&history) });
        }
        log::debug!("epoch {epoch}: train {:.6e} valid {:.6e} criterion {:.6e}", rec.objective_train, rec.objective_valid, crit);
        history.records.push(rec);
        if crit < best.0 {
            best = (crit, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if tcfg.early_stop_patience > 0 && since_best >= tcfg.early_stop_patience {
                break;
            }
        }
    }
    if best.1 == 0 {
        // every criterion was +inf; keep the first epoch
        best.1 = 1;
        best.0 = history.records[0].criterion;
    } else {
        model.params = best.2;
    }
    Ok(TrainOutcome { model, history, best_epoch: best.1, best_criterion: best.0 })
}

/// `{10^(k/2)}` for `k = -10..=6`.
pub fn standard_alpha_grid() -> Vec<f64> {
    (-10..=6).map(|k| 10f64.powf(k as f64 / 2.0)).collect()
}

#[derive(Debug, Clone)]
pub struct SweepPoint<S> {
    pub alpha: f64,
    pub outcome: TrainOutcome<S>,
}

/// One training run per α, all from the same initialization and seeds.
pub fn alpha_sweep<S: Scalar>(
    arch: &Architecture,
    ds: &ObservationalDataset<S>,
    split: &DatasetSplit,
    grid: &[f64],
    ocfg: &ObjectiveConfig,
    tcfg: &TrainConfig,
    weights: Option<&Array1<S>>,
) -> Result<Vec<SweepPoint<S>>> {
    if grid.is_empty() {
        return Err(CfrError::Config("alpha grid is empty".into()));
    }
    let init = init_model::<S>(arch, tcfg.seed)?;
    grid.iter()
        .map(|&alpha| {
            let cfg = ObjectiveConfig { alpha, ..ocfg.clone() };
            let outcome = train_with_weights(init.clone(), ds, split, &cfg, tcfg, weights)?;
            Ok(SweepPoint { alpha, outcome })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_has_seventeen_points() {
        let g = standard_alpha_grid();
        assert_eq!(g.len(), 17);
        assert!((g[0] - 1e-5).abs() < 1e-20);
        assert!((g[16] - 1e3).abs() < 1e-9);
        assert!((g[10] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn batches_are_stratified() {
        let t: Vec<u8> = (0..250).map(|i| u8::from(i % 5 == 0)).collect();
        let mut r = rng::stream(1, rng::BATCHING);
        let batches = stratified_batches(&t, 50, &mut r).unwrap();
        assert_eq!(batches.len(), 5);
        let mut seen: Vec<usize> = batches.concat();
        seen.sort_unstable();
        assert_eq!(seen, (0..250).collect::<Vec<_>>());
        for b in &batches {
            let treated = b.iter().filter(|&&i| t[i] == 1).count() as f64;
            assert!((treated - 0.2 * b.len() as f64).abs() <= 1.0);
        }
        assert!(stratified_batches(&[0, 0, 1], 4, &mut r).is_err());
    }

    #[test]
    fn risk_examples() {
        let yhat = ndarray::array![1.0, 3.0];
        let y = ndarray::array![0.0, 0.0];
        assert_eq!(factual_weighted_risk(yhat.view(), y.view(), None).unwrap(), 5.0);
        let w = ndarray::array![2.0, 0.0];
        assert_eq!(factual_weighted_risk(yhat.view(), y.view(), Some(w.view())).unwrap(), 1.0);
        assert_eq!(factual_weighted_risk(y.view(), y.view(), None).unwrap(), 0.0);
        let empty = Array1::<f64>::zeros(0);
        assert!(factual_weighted_risk(empty.view(), empty.view(), None).is_err());
    }
}
