//! Feed-forward networks for counterfactual regression: a shared
//! representation Φ, one outcome head per treatment arm and an optional
//! sample-weighting head.
//!
//! With no representation layers Φ is the identity and the model is a
//! T-learner on the raw covariates.

mod forward;
mod gradcheck;
mod io;

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{Array1, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::rng;
use crate::scalar::Scalar;

pub use forward::ForwardPass;
pub use gradcheck::{central_differences, gradient_check, relative_error, BlockError, GradientReport, GRADCHECK_FLOOR};
pub use io::{load_model, read_model, save_model, write_model, MODEL_FORMAT_VERSION};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Activation {
    Elu,
    Identity,
}

impl Activation {
    #[inline]
    pub fn apply<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Elu if x <= S::zero() => x.exp_m1(),
            _ => x,
        }
    }

    /// Derivative expressed in terms of the pre-activation.
    #[inline]
    pub fn derivative<S: Scalar>(self, x: S) -> S {
        match self {
            Activation::Elu if x <= S::zero() => x.exp(),
            _ => S::one(),
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Activation::Elu => "elu",
            Activation::Identity => "identity",
        })
    }
}

impl FromStr for Activation {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "elu" => Ok(Activation::Elu),
            "identity" | "linear" => Ok(Activation::Identity),
            other => Err(CfrError::Config(format!("unknown activation '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub width: usize,
    pub activation: Activation,
}

impl LayerSpec {
    pub fn elu(width: usize) -> Self {
        LayerSpec { width, activation: Activation::Elu }
    }

    pub fn identity(width: usize) -> Self {
        LayerSpec { width, activation: Activation::Identity }
    }
}

/// Layer shapes of a model. Head and weight-head stacks must end in a
/// single output unit.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub rep_layers: Vec<LayerSpec>,
    pub head_layers: Vec<LayerSpec>,
    pub weight_head_layers: Option<Vec<LayerSpec>>,
}

impl Architecture {
    /// ELU hidden layers of the given widths followed by a linear output unit
    /// in each head. An empty `rep_widths` gives the identity representation.
    pub fn new(input_dim: usize, rep_widths: &[usize], head_widths: &[usize]) -> Self {
        Architecture {
            input_dim,
            rep_layers: rep_widths.iter().map(|&w| LayerSpec::elu(w)).collect(),
            head_layers: stack_with_output(head_widths),
            weight_head_layers: None,
        }
    }

    /// Adds a weighting head with the given hidden widths.
    pub fn with_weight_head(mut self, widths: &[usize]) -> Self {
        self.weight_head_layers = Some(stack_with_output(widths));
        self
    }

    pub fn representation_dim(&self) -> usize {
        self.rep_layers.last().map_or(self.input_dim, |l| l.width)
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 {
            return Err(CfrError::Config("input dimension must be at least 1".into()));
        }
        let all = self.rep_layers.iter().chain(&self.head_layers).chain(self.weight_head_layers.iter().flatten());
        if all.clone().any(|l| l.width == 0) {
            return Err(CfrError::Config("layer widths must be at least 1".into()));
        }
        check_output_stack(&self.head_layers, "outcome head")?;
        if let Some(w) = &self.weight_head_layers {
            check_output_stack(w, "weight head")?;
        }
        Ok(())
    }

    pub(crate) fn layout(&self) -> Layout {
        let mut offset = 0;
        let mut stack = |layers: &[LayerSpec], mut fan_in: usize| -> Vec<Dense> {
            layers
                .iter()
                .map(|l| {
                    let d = Dense { offset, fan_in, fan_out: l.width, activation: l.activation };
                    offset += d.len();
                    fan_in = l.width;
                    d
                })
                .collect()
        };
        let rep = stack(&self.rep_layers, self.input_dim);
        let z_dim = self.representation_dim();
        let head0 = stack(&self.head_layers, z_dim);
        let head1 = stack(&self.head_layers, z_dim);
        let weight = self.weight_head_layers.as_ref().map(|w| stack(w, z_dim + 1));
        Layout { rep, heads: [head0, head1], weight, len: offset }
    }

    pub fn parameter_count(&self) -> usize {
        self.layout().len
    }
}

fn stack_with_output(hidden: &[usize]) -> Vec<LayerSpec> {
    hidden.iter().map(|&w| LayerSpec::elu(w)).chain([LayerSpec::identity(1)]).collect()
}

fn check_output_stack(layers: &[LayerSpec], name: &str) -> Result<()> {
    match layers.last() {
        None => Err(CfrError::Config(format!("{name} needs at least one layer"))),
        Some(l) if l.width != 1 => Err(CfrError::Config(format!("{name} must end in one output unit, got {}", l.width))),
        _ => Ok(()),
    }
}

/// One dense layer's slice of the parameter vector: an `in × out`
/// row-major weight matrix followed by `out` biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Dense {
    pub offset: usize,
    pub fan_in: usize,
    pub fan_out: usize,
    pub activation: Activation,
}

impl Dense {
    pub fn len(&self) -> usize {
        (self.fan_in + 1) * self.fan_out
    }

    pub fn weight_range(&self) -> Range<usize> {
        self.offset..self.offset + self.fan_in * self.fan_out
    }

    pub fn bias_range(&self) -> Range<usize> {
        self.offset + self.fan_in * self.fan_out..self.offset + self.len()
    }

    pub fn weights<'a, S>(&self, p: &'a [S]) -> ArrayView2<'a, S> {
        ArrayView2::from_shape((self.fan_in, self.fan_out), &p[self.weight_range()]).expect("layout matches")
    }

    pub fn bias<'a, S>(&self, p: &'a [S]) -> ArrayView1<'a, S> {
        ArrayView1::from(&p[self.bias_range()])
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Layout {
    pub rep: Vec<Dense>,
    pub heads: [Vec<Dense>; 2],
    pub weight: Option<Vec<Dense>>,
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockRole {
    Representation,
    Head0,
    Head1,
    WeightHead,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    Weights,
    Bias,
}

/// Named contiguous range of the parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamBlock {
    pub name: String,
    pub role: BlockRole,
    pub kind: BlockKind,
    pub range: Range<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfrModel<S> {
    arch: Architecture,
    layout: Layout,
    pub params: Array1<S>,
    pub seed: u64,
}

/// LeCun-style uniform initialization: weights in `±sqrt(3 / fan_in)`,
/// zero biases. The weight head's output layer starts at zero so learned
/// weights begin uniform.
pub fn init_model<S: Scalar>(arch: &Architecture, seed: u64) -> Result<CfrModel<S>> {
    arch.validate()?;
    let layout = arch.layout();
    let mut params = Array1::zeros(layout.len);
    let mut r = rng::stream(seed, rng::INIT);
    let mut fill = |d: &Dense| {
        let limit = (3.0 / d.fan_in as f64).sqrt();
        for p in params.slice_mut(ndarray::s![d.weight_range()]).iter_mut() {
            *p = S::c(r.random_range(-limit..limit));
        }
    };
    layout.rep.iter().chain(&layout.heads[0]).chain(&layout.heads[1]).for_each(&mut fill);
    if let Some(w) = &layout.weight {
        w[..w.len() - 1].iter().for_each(&mut fill);
    }
    Ok(CfrModel { arch: arch.clone(), layout, params, seed })
}

impl<S: Scalar> CfrModel<S> {
    /// Model with the given parameter vector.
    pub fn from_parameters(arch: &Architecture, params: Array1<S>, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = arch.layout();
        if params.len() != layout.len {
            return Err(CfrError::Shape(format!("{} parameters for an architecture with {}", params.len(), layout.len)));
        }
        Ok(CfrModel { arch: arch.clone(), layout, params, seed })
    }

    pub fn architecture(&self) -> &Architecture {
        &self.arch
    }

    pub fn parameter_count(&self) -> usize {
        self.layout.len
    }

    pub fn has_weight_head(&self) -> bool {
        self.layout.weight.is_some()
    }

    pub fn representation_dim(&self) -> usize {
        self.arch.representation_dim()
    }

    pub fn blocks(&self) -> Vec<ParamBlock> {
        let mut out = Vec::new();
        let mut push = |prefix: &str, role: BlockRole, layers: &[Dense]| {
            for (i, d) in layers.iter().enumerate() {
                out.push(ParamBlock { name: format!("{prefix}.{i}.w"), role, kind: BlockKind::Weights, range: d.weight_range() });
                out.push(ParamBlock { name: format!("{prefix}.{i}.b"), role, kind: BlockKind::Bias, range: d.bias_range() });
            }
        };
        push("rep", BlockRole::Representation, &self.layout.rep);
        push("head0", BlockRole::Head0, &self.layout.heads[0]);
        push("head1", BlockRole::Head1, &self.layout.heads[1]);
        if let Some(w) = &self.layout.weight {
            push("weight", BlockRole::WeightHead, w);
        }
        out
    }

    /// Copies the outcome-head-0 parameters into head 1.
    pub fn tie_heads(&mut self) {
        for (d0, d1) in self.layout.heads[0].clone().iter().zip(self.layout.heads[1].clone().iter()) {
            let src = self.params.slice(ndarray::s![d0.offset..d0.offset + d0.len()]).to_owned();
            self.params.slice_mut(ndarray::s![d1.offset..d1.offset + d1.len()]).assign(&src);
        }
    }
}
