//! Flat `key = value` run configuration.
//!
//! Every key has a default. Files override defaults and command-line flags
//! override files. The fully resolved configuration is written to each run
//! directory as `config.txt` and can be fed back with `--config`.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use cfr_core::baselines::OutcomeLink;
use cfr_core::evaluation::PolicyRiskForm;
use cfr_core::ipm::{Bandwidth, IpmConfig, IpmKind, KernelConfig, SinkhornConfig};
use cfr_core::training::{AdamConfig, ValidationCriterion, WeightUpdate};
use cfr_core::{Architecture, CfrError, ObjectiveConfig, Result, TrainConfig, Weighting};

/// Environment variable naming the default output root.
pub const OUT_ENV: &str = "CFR_BENCH_OUT";
pub const CONFIG_FILE: &str = "config.txt";

/// Source of generated data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataKind {
    Ihdp,
    Rct,
}

impl FromStr for DataKind {
    type Err = CfrError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ihdp" | "ihdp-like" => Ok(DataKind::Ihdp),
            "rct" => Ok(DataKind::Rct),
            other => Err(CfrError::Config(format!("unknown data kind '{other}' (ihdp, rct)"))),
        }
    }
}

impl Display for DataKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            DataKind::Ihdp => "ihdp",
            DataKind::Rct => "rct",
        })
    }
}

/// Conversion between config values and their text form.
pub trait ConfigValue: Sized {
    fn parse_value(s: &str) -> Result<Self>;
    fn render(&self) -> String;
}

macro_rules! plain_values {
    ($($t:ty),*) => {$(
        impl ConfigValue for $t {
            fn parse_value(s: &str) -> Result<Self> {
                s.parse::<$t>().map_err(|e| CfrError::Config(format!("cannot parse '{s}': {e}")))
            }
            fn render(&self) -> String {
                self.to_string()
            }
        }
    )*};
}

plain_values!(String, u64, usize, f64, bool, IpmKind, Weighting, ValidationCriterion, PolicyRiskForm, DataKind, OutcomeLink, WeightUpdate);

impl<T: ConfigValue> ConfigValue for Option<T> {
    fn parse_value(s: &str) -> Result<Self> {
        match s {
            "" | "none" => Ok(None),
            v => T::parse_value(v).map(Some),
        }
    }

    fn render(&self) -> String {
        self.as_ref().map_or_else(|| "none".to_string(), T::render)
    }
}

impl<T: ConfigValue> ConfigValue for Vec<T> {
    fn parse_value(s: &str) -> Result<Self> {
        s.split(',').map(str::trim).filter(|v| !v.is_empty()).map(T::parse_value).collect()
    }

    fn render(&self) -> String {
        self.iter().map(T::render).collect::<Vec<_>>().join(",")
    }
}

impl ConfigValue for Bandwidth {
    fn parse_value(s: &str) -> Result<Self> {
        match s {
            "median" => Ok(Bandwidth::Median),
            v => f64::parse_value(v).map(Bandwidth::Fixed),
        }
    }

    fn render(&self) -> String {
        match self {
            Bandwidth::Median => "median".into(),
            Bandwidth::Fixed(v) => v.to_string(),
        }
    }
}

macro_rules! run_config {
    ($($(#[doc = $doc:literal])* $key:ident : $ty:ty = $default:expr;)*) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct RunConfig {
            $($(#[doc = $doc])* pub $key: $ty,)*
        }

        impl Default for RunConfig {
            fn default() -> Self {
                RunConfig { $($key: $default,)* }
            }
        }

        impl RunConfig {
            pub const KEYS: &'static [&'static str] = &[$(stringify!($key)),*];

            /// Sets one key from its text form.
            pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
                match key {
                    $(stringify!($key) => {
                        self.$key = <$ty as ConfigValue>::parse_value(value)
                            .map_err(|e| CfrError::Config(format!("key '{key}': {e}")))?;
                    })*
                    other => return Err(CfrError::Config(format!("unknown config key '{other}'"))),
                }
                Ok(())
            }

            /// `(key, value)` pairs in declaration order.
            pub fn entries(&self) -> Vec<(&'static str, String)> {
                vec![$((stringify!($key), self.$key.render())),*]
            }
        }
    };
}

fn default_out_dir() -> String {
    std::env::var(OUT_ENV).unwrap_or_else(|_| "runs".into())
}

run_config! {
    /// Name of the run directory under `out_dir`.
    run_id: String = "run".into();
    out_dir: String = default_out_dir();
    /// Seeds model initialization, batching and the split.
    seed: u64 = 0;
    /// Worker threads for sweeps; a single run is always sequential.
    threads: usize = 1;

    /// Dataset CSV; when `none`, data are generated from the keys below.
    data: Option<String> = None;
    data_kind: DataKind = DataKind::Ihdp;
    /// Seed of the data stream; `none` uses `seed`.
    data_seed: Option<u64> = None;
    n: usize = 747;
    d: usize = 25;
    noise_std: f64 = 1.0;
    confounding: f64 = 1.0;
    treatment_intercept: f64 = 0.0;
    target_att: f64 = 4.0;
    /// Randomized-cohort response: zero, linear, exp-linear, step, logistic.
    effect: String = "linear".into();
    /// Biased control subsampling strength; `none` keeps all units.
    subsample_q: Option<f64> = None;
    subsample_target: usize = 400;

    /// Train, validation and test fractions.
    split: Vec<f64> = vec![0.63, 0.27, 0.10];
    standardize: bool = true;

    /// Hidden layer counts and widths; each head adds a linear output unit.
    rep_layers: usize = 2;
    rep_dim: usize = 50;
    head_layers: usize = 2;
    head_dim: usize = 50;
    weight_layers: usize = 2;
    weight_dim: usize = 32;

    alpha: f64 = 0.0;
    lambda_h: f64 = 1e-4;
    lambda_w: f64 = 0.0;
    ipm: IpmKind = IpmKind::Sinkhorn;
    bandwidth: Bandwidth = Bandwidth::Median;
    sinkhorn_lambda: f64 = 10.0;
    sinkhorn_iterations: usize = 10;
    /// Anneal the entropy scale up to `sinkhorn_lambda` over the iterations.
    sinkhorn_scaling: bool = true;
    weighting: Weighting = Weighting::Uniform;
    /// `joint`, or `split`: the weight head follows only the IPM and weight-norm terms.
    weight_update: WeightUpdate = WeightUpdate::Joint;

    batch_size: usize = 100;
    epochs: usize = 300;
    learning_rate: f64 = 1e-3;
    patience: usize = 30;
    criterion: ValidationCriterion = ValidationCriterion::Objective;
    adam_beta1: f64 = 0.9;
    adam_beta2: f64 = 0.999;
    adam_epsilon: f64 = 1e-8;

    policy_thresholds: Vec<f64> = vec![0.0];
    policy_form: PolicyRiskForm = PolicyRiskForm::SelfNormalized;
    /// Link of the OLS baselines (logistic for binary outcomes).
    outcome_link: OutcomeLink = OutcomeLink::Identity;
    knn_k: usize = 5;

    /// Sweep axes; an empty list leaves the key at its single value.
    grid_alpha: Vec<f64> = Vec::new();
    grid_rep_layers: Vec<usize> = Vec::new();
    grid_rep_dim: Vec<usize> = Vec::new();
    grid_head_layers: Vec<usize> = Vec::new();
    grid_head_dim: Vec<usize> = Vec::new();
    grid_batch_size: Vec<usize> = Vec::new();
    grid_lambda_w: Vec<f64> = Vec::new();

    /// Figure data: `alpha` (error ratio against α = 0) or `policy` (risk by inclusion rate).
    figure: String = "alpha".into();
    figure_q: Vec<f64> = vec![0.0, 0.5, 1.0];
    figure_seeds: usize = 10;
    /// α values for the alpha figure; empty means the standard 17-point grid.
    figure_alphas: Vec<f64> = Vec::new();
    policy_rates: Vec<f64> = (0..=20).map(|k| k as f64 / 20.0).collect();

    gradcheck_architectures: usize = 10;
    gradcheck_tolerance: f64 = 1e-4;
}

impl RunConfig {
    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CfrError::Config(format!("line {}: expected 'key = value', got '{line}'", no + 1)))?;
            self.set(k.trim(), v.trim())?;
        }
        Ok(())
    }

    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CfrError::io(path, e))?;
        let mut cfg = RunConfig::default();
        cfg.apply_text(&text)?;
        Ok(cfg)
    }

    /// Applies `--key value` and `--key=value` pairs; dashes in keys may be
    /// written as underscores or hyphens.
    pub fn apply_flags(&mut self, args: &[String]) -> Result<()> {
        let mut it = args.iter();
        while let Some(arg) = it.next() {
            let flag = arg
                .strip_prefix("--")
                .ok_or_else(|| CfrError::Config(format!("unexpected argument '{arg}'")))?;
            let (key, value) = match flag.split_once('=') {
                Some((k, v)) => (k.to_string(), v.to_string()),
                None => {
                    let v = it.next().ok_or_else(|| CfrError::Config(format!("flag --{flag} needs a value")))?;
                    (flag.to_string(), v.clone())
                }
            };
            let key = key.replace('-', "_");
            let key = if key == "kind" { "data_kind".to_string() } else { key };
            self.set(&key, &value)?;
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| CfrError::io(path, e))
    }

    pub fn run_dir(&self) -> PathBuf {
        Path::new(&self.out_dir).join(&self.run_id)
    }

    pub fn data_seed(&self) -> u64 {
        self.data_seed.unwrap_or(self.seed)
    }

    pub fn split_ratios(&self) -> Result<[f64; 3]> {
        match self.split.as_slice() {
            &[a, b, c] => Ok([a, b, c]),
            other => Err(CfrError::Config(format!("split needs three fractions, got {other:?}"))),
        }
    }

    pub fn architecture(&self, input_dim: usize) -> Architecture {
        let arch = Architecture::new(input_dim, &vec![self.rep_dim; self.rep_layers], &vec![self.head_dim; self.head_layers]);
        if self.weighting == Weighting::Learned {
            arch.with_weight_head(&vec![self.weight_dim; self.weight_layers])
        } else {
            arch
        }
    }

    pub fn ipm_config(&self) -> IpmConfig {
        IpmConfig {
            kind: self.ipm,
            kernel: KernelConfig { bandwidth: self.bandwidth },
            sinkhorn: SinkhornConfig::new(self.sinkhorn_lambda, self.sinkhorn_iterations).with_scaling(self.sinkhorn_scaling),
        }
    }

    pub fn objective(&self) -> ObjectiveConfig {
        ObjectiveConfig {
            alpha: self.alpha,
            lambda_h: self.lambda_h,
            lambda_w: self.lambda_w,
            ipm: self.ipm_config(),
            weighting: self.weighting,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            batch_size: self.batch_size,
            max_epochs: self.epochs,
            learning_rate: self.learning_rate,
            early_stop_patience: self.patience,
            validation_objective: self.criterion,
            seed: self.seed,
            adam: AdamConfig { beta1: self.adam_beta1, beta2: self.adam_beta2, epsilon: self.adam_epsilon },
            weight_update: self.weight_update,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut cfg = RunConfig::default();
        cfg.apply_flags(&["--alpha".into(), "0.31622776601683794".into(), "--subsample-q=1".into(), "--grid_alpha=0,1".into()])
            .unwrap();
        let mut back = RunConfig::default();
        back.apply_text(&cfg.to_text()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.subsample_q, Some(1.0));
        assert_eq!(back.grid_alpha, vec![0.0, 1.0]);
        assert_eq!(cfg.to_text().lines().count(), RunConfig::KEYS.len());
    }

    #[test]
    fn bad_input_is_a_config_error() {
        let mut cfg = RunConfig::default();
        assert!(matches!(cfg.set("nope", "1"), Err(CfrError::Config(_))));
        assert!(matches!(cfg.set("alpha", "abc"), Err(CfrError::Config(_))));
        assert!(cfg.apply_flags(&["--alpha".into()]).is_err());
        assert!(cfg.apply_flags(&["alpha".into()]).is_err());
        assert!(cfg.apply_text("alpha 3").is_err());
        cfg.split = vec![0.5, 0.5];
        assert!(cfg.split_ratios().is_err());
    }

    #[test]
    fn architecture_shapes() {
        let mut cfg = RunConfig { rep_layers: 3, rep_dim: 20, head_layers: 2, head_dim: 10, ..Default::default() };
        let arch = cfg.architecture(5);
        assert_eq!(arch.rep_layers.len(), 3);
        assert_eq!(arch.head_layers.len(), 3);
        assert!(arch.weight_head_layers.is_none());
        cfg.weighting = Weighting::Learned;
        assert_eq!(cfg.architecture(5).weight_head_layers.map(|l| l.len()), Some(3));
    }
}
