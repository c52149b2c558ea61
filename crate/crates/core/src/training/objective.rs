use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use super::ObjectiveConfig;
use crate::error::{CfrError, Result};
use crate::ipm::{compute_ipm, frozen_plan_cost, resolve_bandwidth, Bandwidth, IpmKind, KernelConfig};
use crate::nnet::{gradient_check, BlockKind, BlockRole, CfrModel, ForwardPass, GradientReport};
use crate::scalar::Scalar;

/// How per-sample weights enter the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Weighting {
    #[default]
    Uniform,
    /// Caller-supplied weights, e.g. balancing weights.
    Fixed,
    /// Weights produced by the model's weight head.
    Learned,
}

/// Which gradient the weighting head follows during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightUpdate {
    /// One step on the full objective for every parameter.
    #[default]
    Joint,
    /// The weighting head steps on the IPM and weight-norm terms only.
    Split,
}

impl std::str::FromStr for WeightUpdate {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "joint" => Ok(WeightUpdate::Joint),
            "split" => Ok(WeightUpdate::Split),
            other => Err(CfrError::Config(format!("unknown weight update '{other}' (joint, split)"))),
        }
    }
}

impl std::fmt::Display for WeightUpdate {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            WeightUpdate::Joint => "joint",
            WeightUpdate::Split => "split",
        })
    }
}

impl std::str::FromStr for Weighting {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Weighting::Uniform),
            "fixed" => Ok(Weighting::Fixed),
            "learned" => Ok(Weighting::Learned),
            other => Err(CfrError::Config(format!("unknown weighting '{other}' (uniform, fixed, learned)"))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Uniform => "uniform",
            Weighting::Fixed => "fixed",
            Weighting::Learned => "learned",
        })
    }
}

/// Rows of a training batch.
#[derive(Debug, Clone)]
pub struct Batch<S> {
    pub x: Array2<S>,
    pub t: Vec<u8>,
    pub y: Array1<S>,
    /// Fixed sample weights (used when weighting is `Fixed`).
    pub weights: Option<Array1<S>>,
}

impl<S: Scalar> Batch<S> {
    pub fn new(x: Array2<S>, t: Vec<u8>, y: Array1<S>) -> Self {
        Batch { x, t, y, weights: None }
    }

    pub fn with_weights(mut self, w: Array1<S>) -> Self {
        self.weights = Some(w);
        self
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

/// Objective value, its terms, and the gradient of the total.
#[derive(Debug, Clone)]
pub struct ObjectiveValue<S> {
    pub total: S,
    pub risk: S,
    /// `λ_h / √n · ‖head weights‖₂`.
    pub head_norm: S,
    /// `α · IPM` (zero when α = 0).
    pub ipm: S,
    /// Unscaled IPM value between the group representations.
    pub ipm_raw: S,
    /// `λ_w ‖w‖₂ / n` (learned weighting only).
    pub weight_norm: S,
    pub grad: Array1<S>,
}

/// Per-term gradients of the objective; they sum to the total gradient.
#[derive(Debug, Clone)]
pub struct TermGradients<S> {
    pub risk: Array1<S>,
    pub head_norm: Array1<S>,
    pub ipm: Array1<S>,
    pub weight_norm: Array1<S>,
}

/// `(1/n) Σ w_i (ŷ_i - y_i)²`, uniform weights when `weights` is `None`.
pub fn factual_weighted_risk<S: Scalar>(yhat: ArrayView1<S>, y: ArrayView1<S>, weights: Option<ArrayView1<S>>) -> Result<S> {
    if y.is_empty() {
        return Err(CfrError::Size("empty batch".into()));
    }
    if yhat.len() != y.len() || weights.is_some_and(|w| w.len() != y.len()) {
        return Err(CfrError::Shape("risk inputs differ in length".into()));
    }
    let n = S::of(y.len());
    let total = match weights {
        None => yhat.iter().zip(y.iter()).map(|(&a, &b)| (a - b) * (a - b)).sum::<S>(),
        Some(w) => yhat.iter().zip(y.iter()).zip(w.iter()).map(|((&a, &b), &wi)| wi * (a - b) * (a - b)).sum::<S>(),
    };
    Ok(total / n)
}

/// Indices of the outcome heads' weight matrices (biases excluded).
pub fn head_weight_indices<S: Scalar>(model: &CfrModel<S>) -> Vec<usize> {
    model
        .blocks()
        .into_iter()
        .filter(|b| b.kind == BlockKind::Weights && matches!(b.role, BlockRole::Head0 | BlockRole::Head1))
        .flat_map(|b| b.range)
        .collect()
}

fn l2<S: Scalar>(v: impl Iterator<Item = S>) -> S {
    v.map(|x| x * x).sum::<S>().sqrt()
}

fn split_groups<S: Scalar>(z: ArrayView2<S>, t: &[u8]) -> ([Vec<usize>; 2], [Array2<S>; 2]) {
    let (c, tr) = crate::data::treatment_groups(t);
    let zc = z.select(ndarray::Axis(0), &c);
    let zt = z.select(ndarray::Axis(0), &tr);
    ([c, tr], [zc, zt])
}

fn all_ones<S: Scalar>(w: &Array1<S>) -> bool {
    w.iter().all(|&v| v == S::one())
}

struct Parts<S> {
    risk: S,
    head_norm: S,
    ipm: S,
    ipm_raw: S,
    weight_norm: S,
    d_yhat: Array1<S>,
    d_z_ipm: Option<Array2<S>>,
    d_w_risk: Option<Array1<S>>,
    d_w_ipm: Option<Array1<S>>,
    d_w_norm: Option<Array1<S>>,
    grad_head: Array1<S>,
}

/// Objective terms and their upstream gradients for one forward pass.
fn parts<S: Scalar>(model: &CfrModel<S>, pass: &ForwardPass<S>, batch: &Batch<S>, cfg: &ObjectiveConfig) -> Result<Parts<S>> {
    let n = batch.len();
    let nf = S::of(n);
    let (groups, clouds) = split_groups(pass.z.view(), &batch.t);
    if groups[0].is_empty() || groups[1].is_empty() {
        return Err(CfrError::Batching("batch must contain both treatment groups".into()));
    }
    let weights: Option<Array1<S>> = match cfg.weighting {
        Weighting::Uniform => None,
        Weighting::Fixed => Some(
            batch.weights.clone().ok_or_else(|| CfrError::Config("fixed weighting needs sample weights".into()))?,
        ),
        Weighting::Learned => Some(
            pass.weights.clone().ok_or_else(|| CfrError::Config("learned weighting needs a model with a weight head".into()))?,
        ),
    };
    if let Some(w) = &weights {
        if w.len() != n {
            return Err(CfrError::Shape(format!("{} weights for a batch of {n}", w.len())));
        }
    }

    let risk = factual_weighted_risk(pass.yhat.view(), batch.y.view(), weights.as_ref().map(|w| w.view()))?;
    let resid = &pass.yhat - &batch.y;
    let two_over_n = S::c(2.0) / nf;
    let d_yhat_risk = match &weights {
        None => resid.mapv(|r| r * two_over_n),
        Some(w) => &resid * w * two_over_n,
    };
    let mut d_w_risk = None;
    if cfg.weighting == Weighting::Learned {
        d_w_risk = Some(resid.mapv(|r| r * r / nf));
    }

    let lambda_h = S::c(cfg.lambda_h);
    let mut grad_head = Array1::zeros(model.parameter_count());
    let mut head_norm = S::zero();
    if cfg.lambda_h > 0.0 {
        let idx = head_weight_indices(model);
        let norm = l2(idx.iter().map(|&i| model.params[i]));
        let scale = lambda_h / nf.sqrt();
        head_norm = scale * norm;
        if norm > S::zero() {
            for &i in &idx {
                grad_head[i] = scale * model.params[i] / norm;
            }
        }
    }

    let (mut ipm, mut ipm_raw, mut d_z_ipm) = (S::zero(), S::zero(), None);
    let mut d_w_ipm = None;
    if cfg.alpha > 0.0 {
        let alpha = S::c(cfg.alpha);
        let group_w = |g: usize| weights.as_ref().map(|w| groups[g].iter().map(|&i| w[i]).collect::<Array1<S>>());
        let (mut w0, mut w1) = (group_w(0), group_w(1));
        // fixed unit weights take the uniform (unbiased) path
        if cfg.weighting == Weighting::Fixed && w0.as_ref().is_some_and(all_ones) && w1.as_ref().is_some_and(all_ones) {
            w0 = None;
            w1 = None;
        }
        let est = compute_ipm(&cfg.ipm, clouds[0].view(), clouds[1].view(), w0.as_ref().map(|w| w.view()), w1.as_ref().map(|w| w.view()))?;
        ipm_raw = est.value;
        ipm = alpha * est.value;
        let s = alpha * est.penalty_scale();
        let mut dz = Array2::zeros(pass.z.raw_dim());
        for (k, &i) in groups[0].iter().enumerate() {
            dz.row_mut(i).scaled_add(s, &est.grad_a.row(k));
        }
        for (k, &i) in groups[1].iter().enumerate() {
            dz.row_mut(i).scaled_add(s, &est.grad_b.row(k));
        }
        d_z_ipm = Some(dz);
        if cfg.weighting == Weighting::Learned {
            let mut dw = Array1::zeros(n);
            if let Some(g) = &est.grad_weights_a {
                groups[0].iter().zip(g.iter()).for_each(|(&i, &v)| dw[i] = s * v);
            }
            if let Some(g) = &est.grad_weights_b {
                groups[1].iter().zip(g.iter()).for_each(|(&i, &v)| dw[i] = s * v);
            }
            d_w_ipm = Some(dw);
        }
    }

    let mut weight_norm = S::zero();
    let mut d_w_norm = None;
    if cfg.weighting == Weighting::Learned && cfg.lambda_w > 0.0 {
        let w = weights.as_ref().expect("learned weights");
        let norm = l2(w.iter().copied());
        let lw = S::c(cfg.lambda_w);
        weight_norm = lw * norm / nf;
        d_w_norm = Some(w.mapv(|v| lw * v / (norm * nf)));
    }

    Ok(Parts { risk, head_norm, ipm, ipm_raw, weight_norm, d_yhat: d_yhat_risk, d_z_ipm, d_w_risk, d_w_ipm, d_w_norm, grad_head })
}

fn sum_opt<S: Scalar>(terms: [&Option<Array1<S>>; 3]) -> Option<Array1<S>> {
    terms.into_iter().flatten().fold(None, |acc: Option<Array1<S>>, t| Some(match acc {
        Some(a) => a + t,
        None => t.clone(),
    }))
}

/// Total objective on one batch with its gradient:
/// `risk + λ_h/√n ‖θ_h‖₂ + α IPM(Φ-clouds) + λ_w ‖w‖₂ / n`, where `n` is the
/// batch size and `θ_h` the outcome heads' weight matrices.
pub fn total_objective<S: Scalar>(model: &CfrModel<S>, batch: &Batch<S>, cfg: &ObjectiveConfig) -> Result<ObjectiveValue<S>> {
    update_direction(model, batch, cfg, WeightUpdate::Joint)
}

/// [`total_objective`] with the gradient used for a training step. Under
/// [`WeightUpdate::Split`] the weighting-head entries of the gradient are
/// those of `α IPM + λ_w ‖w‖₂ / n` alone; every other entry is unchanged.
pub fn update_direction<S: Scalar>(
    model: &CfrModel<S>,
    batch: &Batch<S>,
    cfg: &ObjectiveConfig,
    update: WeightUpdate,
) -> Result<ObjectiveValue<S>> {
    cfg.validate()?;
    let pass = model.forward(batch.x.view(), &batch.t)?;
    let p = parts(model, &pass, batch, cfg)?;
    let d_w = sum_opt([&p.d_w_risk, &p.d_w_ipm, &p.d_w_norm]);
    let mut grad = model.backward(&pass, p.d_yhat.view(), p.d_z_ipm.as_ref().map(|d| d.view()), d_w.as_ref().map(|d| d.view()))?;
    grad += &p.grad_head;
    if update == WeightUpdate::Split && cfg.weighting == Weighting::Learned {
        let zeros = Array1::zeros(batch.len());
        let balance = match sum_opt([&p.d_w_ipm, &p.d_w_norm, &None]) {
            Some(d) => model.backward(&pass, zeros.view(), None, Some(d.view()))?,
            None => Array1::zeros(model.parameter_count()),
        };
        for block in model.blocks().iter().filter(|b| b.role == BlockRole::WeightHead) {
            grad.slice_mut(ndarray::s![block.range.clone()]).assign(&balance.slice(ndarray::s![block.range.clone()]));
        }
    }
    let total = p.risk + p.head_norm + p.ipm + p.weight_norm;
    Ok(ObjectiveValue { total, risk: p.risk, head_norm: p.head_norm, ipm: p.ipm, ipm_raw: p.ipm_raw, weight_norm: p.weight_norm, grad })
}

/// Gradients of each objective term separately.
pub fn term_gradients<S: Scalar>(model: &CfrModel<S>, batch: &Batch<S>, cfg: &ObjectiveConfig) -> Result<TermGradients<S>> {
    cfg.validate()?;
    let pass = model.forward(batch.x.view(), &batch.t)?;
    let p = parts(model, &pass, batch, cfg)?;
    let n = batch.len();
    let zeros = Array1::zeros(n);
    let zero_params = || Array1::zeros(model.parameter_count());
    let risk = model.backward(&pass, p.d_yhat.view(), None, p.d_w_risk.as_ref().map(|d| d.view()))?;
    let ipm = match &p.d_z_ipm {
        Some(dz) => model.backward(&pass, zeros.view(), Some(dz.view()), p.d_w_ipm.as_ref().map(|d| d.view()))?,
        None => zero_params(),
    };
    let weight_norm = match &p.d_w_norm {
        Some(d) => model.backward(&pass, zeros.view(), None, Some(d.view()))?,
        None => zero_params(),
    };
    Ok(TermGradients { risk, head_norm: p.grad_head, ipm, weight_norm })
}

/// Central-difference check of [`total_objective`]'s gradient.
///
/// Two parts of the analytic gradient are defined with quantities held
/// fixed, and the check holds them fixed too: a median kernel bandwidth is
/// resolved once at the current parameters, and a Sinkhorn penalty is
/// replaced by the cost of its transport plan frozen at the current
/// parameters (see [`crate::ipm::frozen_plan_cost`]).
pub fn objective_gradient_check<S: Scalar>(
    model: &CfrModel<S>,
    batch: &Batch<S>,
    cfg: &ObjectiveConfig,
    step: f64,
) -> Result<GradientReport> {
    cfg.validate()?;
    let pass = model.forward(batch.x.view(), &batch.t)?;
    let (groups, clouds) = split_groups(pass.z.view(), &batch.t);
    let mut cfg = cfg.clone();
    if cfg.ipm.kind != IpmKind::Sinkhorn {
        if let Bandwidth::Median = cfg.ipm.kernel.bandwidth {
            let (sigma, _) = resolve_bandwidth(&cfg.ipm.kernel, &[clouds[0].view(), clouds[1].view()])?;
            cfg.ipm.kernel = KernelConfig::fixed(sigma.as_f64());
        }
    }
    let analytic = total_objective(model, batch, &cfg)?.grad;
    let mut m = model.clone();
    if cfg.ipm.kind != IpmKind::Sinkhorn || cfg.alpha == 0.0 {
        return Ok(gradient_check(model, &analytic, step, |p| {
            m.params = p.clone();
            total_objective(&m, batch, &cfg).map_or(S::nan(), |o| o.total)
        }));
    }

    let learned = cfg.weighting == Weighting::Learned;
    let fixed_w = match cfg.weighting {
        Weighting::Fixed => batch.weights.clone().filter(|w| !all_ones(w)),
        _ => None,
    };
    let group_w = |w: Option<&Array1<S>>, g: usize| w.map(|w| groups[g].iter().map(|&i| w[i]).collect::<Array1<S>>());
    let base_w = if learned { pass.weights.clone() } else { fixed_w.clone() };
    let (wa0, wb0) = (group_w(base_w.as_ref(), 0), group_w(base_w.as_ref(), 1));
    let est = compute_ipm(&cfg.ipm, clouds[0].view(), clouds[1].view(), wa0.as_ref().map(|w| w.view()), wb0.as_ref().map(|w| w.view()))?;
    let plan = est.transport.ok_or_else(|| CfrError::Numeric("sinkhorn returned no plan".into()))?;
    let rest = ObjectiveConfig { alpha: 0.0, ..cfg.clone() };
    let alpha = S::c(cfg.alpha);
    Ok(gradient_check(model, &analytic, step, |p| {
        m.params = p.clone();
        let eval = || -> Result<S> {
            let base = total_objective(&m, batch, &rest)?.total;
            let pass = m.forward(batch.x.view(), &batch.t)?;
            let (_, clouds) = split_groups(pass.z.view(), &batch.t);
            let w = if learned { pass.weights.clone() } else { fixed_w.clone() };
            let (wa, wb) = (group_w(w.as_ref(), 0), group_w(w.as_ref(), 1));
            let cost = frozen_plan_cost(
                clouds[0].view(),
                clouds[1].view(),
                plan.view(),
                wa0.as_ref().map(|w| w.view()),
                wb0.as_ref().map(|w| w.view()),
                wa.as_ref().map(|w| w.view()),
                wb.as_ref().map(|w| w.view()),
            )?;
            Ok(base + alpha * cost)
        };
        eval().unwrap_or(S::nan())
    }))
}
