//! Experiment orchestration shared by the subcommands.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cfr_core::baselines::{balancing_weights, fit_outcome_s, fit_outcome_t, fit_propensity, knn_cate};
use cfr_core::data::{load_dataset, DatasetSchema};
use cfr_core::evaluation::{evaluate, surrogate_mse_nn, EvaluationOptions, SampleScope};
use cfr_core::nnet::{load_model, save_model};
use cfr_core::synth::{biased_subsample, generate_ihdp_like, generate_rct, IhdpLikeConfig, RctConfig, RctEffect, SubsampleConfig};
use cfr_core::training::{train_with_weights, TrainOutcome};
use cfr_core::{
    init_model, split_dataset, standardize, CfrError, Dataset, DatasetSplit, EvaluationReport, Model, Result, Standardizer,
    TrainHistory, Weighting,
};
use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::config::{DataKind, RunConfig, CONFIG_FILE};

pub const DATA_FILE: &str = "data.csv";
pub const MODEL_FILE: &str = "model.txt";
pub const HISTORY_FILE: &str = "history.csv";
pub const REPORT_FILE: &str = "report.json";
pub const STANDARDIZER_FILE: &str = "standardizer.json";
pub const SUMMARY_FILE: &str = "summary.csv";

/// Loads the configured dataset file or generates one.
pub fn load_or_generate(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data {
        Some(path) => load_dataset(path, &DatasetSchema::default()),
        None => generate(cfg),
    }
}

/// Generates data from the config, applying biased subsampling when
/// `subsample_q` is set.
pub fn generate(cfg: &RunConfig) -> Result<Dataset> {
    let ds = match cfg.data_kind {
        DataKind::Ihdp => {
            let gen = IhdpLikeConfig {
                n: cfg.n,
                d: cfg.d,
                noise_std: cfg.noise_std,
                target_att: cfg.target_att,
                confounding_strength: cfg.confounding,
                treatment_intercept: cfg.treatment_intercept,
                ..IhdpLikeConfig::default()
            };
            generate_ihdp_like(&gen, cfg.data_seed())?
        }
        DataKind::Rct => {
            let effect: RctEffect = cfg.effect.parse()?;
            generate_rct(&RctConfig { n: cfg.n, d: cfg.d, effect, noise_std: cfg.noise_std }, cfg.data_seed())?
        }
    };
    match cfg.subsample_q {
        Some(q) => biased_subsample(&ds, &SubsampleConfig { q, target_size: cfg.subsample_target, seed: cfg.data_seed() }),
        None => Ok(ds),
    }
}

/// Split and (optionally) standardized copy of a dataset; statistics come
/// from the training split only.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub data: Dataset,
    pub split: DatasetSplit,
    pub standardizer: Standardizer,
}

impl Prepared {
    pub fn part(&self, idx: &[usize]) -> Dataset {
        self.data.subset(idx)
    }
}

pub fn prepare(cfg: &RunConfig, raw: &Dataset) -> Result<Prepared> {
    let split = split_dataset(raw.n(), cfg.split_ratios()?, cfg.seed)?;
    let (data, standardizer) = if cfg.standardize {
        standardize(raw, &split.train)?
    } else {
        (raw.clone(), Standardizer::identity(raw.d()))
    };
    Ok(Prepared { data, split, standardizer })
}

/// Metrics of a fitted model on the train (within-sample), validation and
/// test (out-of-sample) splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub run_id: String,
    pub method: String,
    pub best_epoch: Option<usize>,
    pub epochs_run: Option<usize>,
    pub valid_surrogate_mse_nn: Option<f64>,
    pub within_sample: EvaluationReport,
    pub out_of_sample: Option<EvaluationReport>,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| CfrError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| CfrError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| CfrError::Validation(format!("{}: {e}", path.display())))
    }
}

fn eval_options(cfg: &RunConfig) -> EvaluationOptions {
    EvaluationOptions { policy_thresholds: cfg.policy_thresholds.clone(), policy_form: cfg.policy_form }
}

/// Evaluates potential-outcome predictions `(f0, f1)` given for all rows.
pub fn report_from_predictions(
    cfg: &RunConfig,
    prep: &Prepared,
    method: &str,
    f0: &Array1<f64>,
    f1: &Array1<f64>,
) -> Result<RunReport> {
    let opts = eval_options(cfg);
    let scoped = |idx: &[usize], scope| -> Result<EvaluationReport> {
        let sel = |v: &Array1<f64>| Array1::from_iter(idx.iter().map(|&i| v[i]));
        evaluate(sel(f0).view(), sel(f1).view(), &prep.part(idx), scope, &opts)
    };
    let valid_surrogate = if prep.split.valid.is_empty() {
        None
    } else {
        let valid = prep.part(&prep.split.valid);
        let tau = Array1::from_iter(prep.split.valid.iter().map(|&i| f1[i] - f0[i]));
        surrogate_mse_nn(tau.view(), &valid).ok()
    };
    Ok(RunReport {
        run_id: cfg.run_id.clone(),
        method: method.into(),
        best_epoch: None,
        epochs_run: None,
        valid_surrogate_mse_nn: valid_surrogate,
        within_sample: scoped(&prep.split.train, SampleScope::WithinSample)?,
        out_of_sample: if prep.split.test.is_empty() { None } else { Some(scoped(&prep.split.test, SampleScope::OutOfSample)?) },
    })
}

pub fn model_report(cfg: &RunConfig, prep: &Prepared, model: &Model) -> Result<RunReport> {
    let (f0, f1) = model.predict_potential_outcomes(prep.data.x.view())?;
    let method = if model.has_weight_head() {
        "rcfr"
    } else if cfg.alpha > 0.0 {
        "cfr"
    } else {
        "tarnet"
    };
    report_from_predictions(cfg, prep, method, &f0, &f1)
}

/// Balancing weights for every row: known propensities when the data carry
/// them, otherwise a logistic fit on the training split.
pub fn fixed_weights(prep: &Prepared) -> Result<Array1<f64>> {
    let eta = match &prep.data.e {
        Some(e) => e.clone(),
        None => fit_propensity(&prep.part(&prep.split.train))?.predict(prep.data.x.view()),
    };
    Ok(balancing_weights(&eta, &prep.data.t)?.normalized)
}

/// Trained model with its history and report.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub model: Model,
    pub history: TrainHistory,
    pub report: RunReport,
}

pub fn run_training(cfg: &RunConfig, prep: &Prepared) -> Result<RunResult> {
    let arch = cfg.architecture(prep.data.d());
    let model = init_model(&arch, cfg.seed)?;
    run_training_from(cfg, prep, model)
}

pub fn run_training_from(cfg: &RunConfig, prep: &Prepared, init: Model) -> Result<RunResult> {
    let weights = if cfg.weighting == Weighting::Fixed { Some(fixed_weights(prep)?) } else { None };
    let TrainOutcome { model, history, best_epoch, .. } =
        train_with_weights(init, &prep.data, &prep.split, &cfg.objective(), &cfg.train_config(), weights.as_ref())?;
    let mut report = model_report(cfg, prep, &model)?;
    report.best_epoch = Some(best_epoch);
    report.epochs_run = Some(history.len());
    Ok(RunResult { model, history, report })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CfrError::io(dir, e))
}

fn save_standardizer(st: &Standardizer, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(st).expect("standardizer serializes");
    std::fs::write(path, text + "\n").map_err(|e| CfrError::io(path, e))
}

fn load_standardizer(path: &Path) -> Result<Standardizer> {
    let text = std::fs::read_to_string(path).map_err(|e| CfrError::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| CfrError::Validation(format!("{}: {e}", path.display())))
}

/// `train`: fits one model and writes config, data, model, history and
/// report into the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<(PathBuf, RunReport)> {
    let raw = load_or_generate(cfg)?;
    train_into(cfg, &raw, &cfg.run_dir())
}

fn train_into(cfg: &RunConfig, raw: &Dataset, dir: &Path) -> Result<(PathBuf, RunReport)> {
    let prep = prepare(cfg, raw)?;
    let res = run_training(cfg, &prep)?;
    create_dir(dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    raw.save_csv(dir.join(DATA_FILE))?;
    save_model(&res.model, dir.join(MODEL_FILE))?;
    save_standardizer(&prep.standardizer, &dir.join(STANDARDIZER_FILE))?;
    res.history.save_csv(dir.join(HISTORY_FILE))?;
    res.report.save(dir.join(REPORT_FILE))?;
    log::info!("run {} finished after {} epochs (best {})", cfg.run_id, res.history.len(), res.report.best_epoch.unwrap_or(0));
    Ok((dir.to_path_buf(), res.report))
}

/// `eval`: re-evaluates a saved run. Without `data`, the run's own data and
/// split are used, reproducing its report; with `data`, every row of that
/// file is scored out-of-sample using the run's standardizer.
pub fn cmd_eval(run_dir: &Path, data: Option<&Path>) -> Result<RunReport> {
    let cfg = RunConfig::from_file(run_dir.join(CONFIG_FILE))?;
    let model: Model = load_model(run_dir.join(MODEL_FILE))?;
    let report = match data {
        None => {
            let raw: Dataset = load_dataset(run_dir.join(DATA_FILE), &DatasetSchema::default())?;
            let prep = prepare(&cfg, &raw)?;
            let mut r = model_report(&cfg, &prep, &model)?;
            let saved = RunReport::load(run_dir.join(REPORT_FILE)).ok();
            r.best_epoch = saved.as_ref().and_then(|s| s.best_epoch);
            r.epochs_run = saved.as_ref().and_then(|s| s.epochs_run);
            r
        }
        Some(path) => {
            let st = load_standardizer(&run_dir.join(STANDARDIZER_FILE))?;
            let mut ds: Dataset = load_dataset(path, &DatasetSchema::default())?;
            ds.x = st.transform(ds.x.view());
            let (f0, f1) = model.predict_potential_outcomes(ds.x.view())?;
            let out = evaluate(f0.view(), f1.view(), &ds, SampleScope::OutOfSample, &eval_options(&cfg))?;
            RunReport {
                run_id: cfg.run_id.clone(),
                method: "external".into(),
                best_epoch: None,
                epochs_run: None,
                valid_surrogate_mse_nn: None,
                within_sample: out.clone(),
                out_of_sample: Some(out),
            }
        }
    };
    report.save(run_dir.join("eval_report.json"))?;
    Ok(report)
}

/// `gen`: writes the configured dataset as CSV.
pub fn cmd_gen(cfg: &RunConfig, path: &Path) -> Result<Dataset> {
    let ds = load_or_generate(cfg)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    ds.save_csv(path)?;
    Ok(ds)
}

/// Fits the linear and nearest-neighbour baselines on the training split.
pub fn baseline_reports(cfg: &RunConfig, prep: &Prepared) -> Result<Vec<RunReport>> {
    let train = prep.part(&prep.split.train);
    let x = prep.data.x.view();
    let mut out = Vec::new();
    let s = fit_outcome_s(&train, cfg.outcome_link)?;
    let (f0, f1) = s.predict_potential_outcomes(x);
    out.push(report_from_predictions(cfg, prep, "ols-s", &f0, &f1)?);
    let t = fit_outcome_t(&train, cfg.outcome_link)?;
    let (f0, f1) = t.predict_potential_outcomes(x);
    out.push(report_from_predictions(cfg, prep, "ols-t", &f0, &f1)?);
    // kNN predicts effects only; centre its potential outcomes on zero
    let tau = knn_cate(&train, cfg.knn_k, x)?;
    let half = tau.mapv(|v| v / 2.0);
    out.push(report_from_predictions(cfg, prep, "knn", &half.mapv(|v| -v), &half)?);
    Ok(out)
}

/// `baseline`: writes one report per baseline into the run directory.
pub fn cmd_baseline(cfg: &RunConfig) -> Result<Vec<RunReport>> {
    let raw = load_or_generate(cfg)?;
    let prep = prepare(cfg, &raw)?;
    let reports = baseline_reports(cfg, &prep)?;
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    for r in &reports {
        r.save(dir.join(format!("baseline_{}.json", r.method)))?;
    }
    Ok(reports)
}

/// Grid points of a sweep: the cartesian product of the non-empty
/// `grid_*` lists, each applied on top of `base`.
pub fn sweep_points(base: &RunConfig) -> Vec<RunConfig> {
    let axes: Vec<(&str, Vec<String>)> = [
        ("alpha", base.grid_alpha.iter().map(f64::to_string).collect::<Vec<_>>()),
        ("rep_layers", base.grid_rep_layers.iter().map(usize::to_string).collect()),
        ("rep_dim", base.grid_rep_dim.iter().map(usize::to_string).collect()),
        ("head_layers", base.grid_head_layers.iter().map(usize::to_string).collect()),
        ("head_dim", base.grid_head_dim.iter().map(usize::to_string).collect()),
        ("batch_size", base.grid_batch_size.iter().map(usize::to_string).collect()),
        ("lambda_w", base.grid_lambda_w.iter().map(f64::to_string).collect()),
    ]
    .into_iter()
    .filter(|(_, v)| !v.is_empty())
    .collect();
    let mut points = vec![base.clone()];
    for (key, values) in &axes {
        points = points
            .into_iter()
            .flat_map(|p| {
                values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.set(key, v).expect("grid values parse");
                    q
                })
            })
            .collect();
    }
    let sweep_dir = base.run_dir();
    for (i, p) in points.iter_mut().enumerate() {
        p.run_id = format!("run-{i:03}");
        p.out_dir = sweep_dir.to_string_lossy().into_owned();
        p.grid_alpha.clear();
        p.grid_rep_layers.clear();
        p.grid_rep_dim.clear();
        p.grid_head_layers.clear();
        p.grid_head_dim.clear();
        p.grid_batch_size.clear();
        p.grid_lambda_w.clear();
    }
    points
}

/// Runs `f` over `items` on `threads` workers; results keep item order.
pub fn parallel_map<T: Sync, R: Send>(items: &[T], threads: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<R>>> = Mutex::new((0..items.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..threads.clamp(1, items.len().max(1)) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                slots.lock().expect("worker panicked")[i] = Some(r);
            });
        }
    });
    slots.into_inner().expect("worker panicked").into_iter().map(|r| r.expect("every slot filled")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub run_id: String,
    pub alpha: f64,
    pub rep_layers: usize,
    pub rep_dim: usize,
    pub head_layers: usize,
    pub head_dim: usize,
    pub batch_size: usize,
    pub lambda_w: f64,
    pub best_epoch: Option<usize>,
    pub valid_surrogate_mse_nn: Option<f64>,
    pub mse_cate_within: Option<f64>,
    pub mse_cate_out: Option<f64>,
    pub selected: bool,
}

/// `sweep`: one run directory per grid point under the sweep directory and
/// a summary CSV marking the point with the lowest validation surrogate.
pub fn cmd_sweep(base: &RunConfig) -> Result<(PathBuf, Vec<SweepRow>)> {
    let raw = load_or_generate(base)?;
    let points = sweep_points(base);
    let dir = base.run_dir();
    create_dir(&dir)?;
    base.save(dir.join(CONFIG_FILE))?;
    let results = parallel_map(&points, base.threads, |p| train_into(p, &raw, &p.run_dir()));
    let mut rows = Vec::with_capacity(points.len());
    for (p, r) in points.iter().zip(results) {
        let (_, report) = r?;
        rows.push(SweepRow {
            run_id: p.run_id.clone(),
            alpha: p.alpha,
            rep_layers: p.rep_layers,
            rep_dim: p.rep_dim,
            head_layers: p.head_layers,
            head_dim: p.head_dim,
            batch_size: p.batch_size,
            lambda_w: p.lambda_w,
            best_epoch: report.best_epoch,
            valid_surrogate_mse_nn: report.valid_surrogate_mse_nn,
            mse_cate_within: report.within_sample.mse_cate,
            mse_cate_out: report.out_of_sample.as_ref().and_then(|r| r.mse_cate),
            selected: false,
        });
    }
    let best = rows
        .iter()
        .enumerate()
        .filter_map(|(i, r)| r.valid_surrogate_mse_nn.map(|v| (i, v)))
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(i, _)| i);
    if let Some(i) = best {
        rows[i].selected = true;
    }
    write_csv(&dir.join(SUMMARY_FILE), &rows)?;
    Ok((dir, rows))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| CfrError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaCurvePoint {
    pub q: f64,
    pub seed: u64,
    pub alpha: f64,
    pub mse_cate: f64,
    /// `mse_cate` divided by the α = 0 value for the same data and seed.
    pub ratio: f64,
}

/// Out-of-sample CATE error across α for one dataset per seed, all runs of
/// a seed starting from the same initialization. `alphas` need not contain
/// 0; the reference run is always made.
pub fn alpha_curve(base: &RunConfig, q: Option<f64>, alphas: &[f64], seeds: usize) -> Result<Vec<AlphaCurvePoint>> {
    let jobs: Vec<u64> = (0..seeds as u64).collect();
    let per_seed = parallel_map(&jobs, base.threads, |&s| -> Result<Vec<AlphaCurvePoint>> {
        let mut cfg = base.clone();
        cfg.seed = base.seed + s;
        cfg.data_seed = Some(base.data_seed() + s);
        cfg.subsample_q = q;
        cfg.threads = 1;
        let raw = generate(&cfg)?;
        let prep = prepare(&cfg, &raw)?;
        let init = init_model(&cfg.architecture(prep.data.d()), cfg.seed)?;
        let mse = |alpha: f64| -> Result<f64> {
            let run = RunConfig { alpha, ..cfg.clone() };
            let res = run_training_from(&run, &prep, init.clone())?;
            res.report
                .out_of_sample
                .and_then(|r| r.mse_cate)
                .ok_or_else(|| CfrError::MissingTruth("alpha curve needs a test split with known outcomes".into()))
        };
        let reference = mse(0.0)?;
        alphas
            .iter()
            .map(|&alpha| {
                let m = if alpha == 0.0 { reference } else { mse(alpha)? };
                Ok(AlphaCurvePoint { q: q.unwrap_or(0.0), seed: cfg.seed, alpha, mse_cate: m, ratio: m / reference })
            })
            .collect()
    });
    let mut out = Vec::new();
    for r in per_seed {
        out.extend(r?);
    }
    Ok(out)
}

pub fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AlphaCurveSummary {
    pub q: f64,
    pub alpha: f64,
    pub median_ratio: f64,
    pub seeds: usize,
}

pub fn summarize_alpha_curve(points: &[AlphaCurvePoint]) -> Vec<AlphaCurveSummary> {
    let mut keys: Vec<(f64, f64)> = Vec::new();
    for p in points {
        if !keys.contains(&(p.q, p.alpha)) {
            keys.push((p.q, p.alpha));
        }
    }
    keys.into_iter()
        .map(|(q, alpha)| {
            let mut r: Vec<f64> = points.iter().filter(|p| p.q == q && p.alpha == alpha).map(|p| p.ratio).collect();
            let seeds = r.len();
            AlphaCurveSummary { q, alpha, median_ratio: median(&mut r), seeds }
        })
        .collect()
}

/// `figure`: CSV data for the α curve or the policy-risk curve.
pub fn cmd_figure(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    cfg.save(dir.join(CONFIG_FILE))?;
    match cfg.figure.as_str() {
        "alpha" => {
            let alphas = if cfg.figure_alphas.is_empty() { cfr_core::training::standard_alpha_grid() } else { cfg.figure_alphas.clone() };
            let mut points = Vec::new();
            for &q in &cfg.figure_q {
                points.extend(alpha_curve(cfg, Some(q), &alphas, cfg.figure_seeds)?);
            }
            let raw_path = dir.join("figure_alpha.csv");
            let summary_path = dir.join("figure_alpha_summary.csv");
            write_csv(&raw_path, &points)?;
            write_csv(&summary_path, &summarize_alpha_curve(&points))?;
            Ok(vec![raw_path, summary_path])
        }
        "policy" => {
            let raw = load_or_generate(cfg)?;
            let prep = prepare(cfg, &raw)?;
            let res = run_training(cfg, &prep)?;
            let mut paths = Vec::new();
            for (name, idx) in [("within", &prep.split.train), ("out", &prep.split.test)] {
                if idx.is_empty() {
                    continue;
                }
                let part = prep.part(idx);
                let (f0, f1) = res.model.predict_potential_outcomes(part.x.view())?;
                let curve = cfr_core::evaluation::policy_curve(f0.view(), f1.view(), &part, &cfg.policy_rates, cfg.policy_form)?;
                let path = dir.join(format!("figure_policy_{name}.csv"));
                cfr_core::evaluation::write_policy_curve_csv(&curve, &path)?;
                paths.push(path);
            }
            Ok(paths)
        }
        other => Err(CfrError::Config(format!("unknown figure '{other}' (alpha, policy)"))),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckRow {
    pub architecture: String,
    pub ipm: String,
    pub weighting: String,
    pub max_relative_error: f64,
    pub worst_block: String,
    pub passed: bool,
}

/// Random small architectures spanning 1-3 representation and hypothesis
/// layers, every third one with a weighting head.
pub fn gradcheck_architectures(count: usize, input_dim: usize, seed: u64) -> Vec<cfr_core::Architecture> {
    use rand::Rng;
    let mut r = cfr_core::rng::stream(seed, "gradcheck-arch");
    (0..count)
        .map(|i| {
            let widths = |r: &mut cfr_core::rng::Rng, k: usize| (0..k).map(|_| r.random_range(2..=6usize)).collect::<Vec<_>>();
            let rep = widths(&mut r, 1 + i % 3);
            let head = widths(&mut r, 1 + (i / 3) % 3);
            let arch = cfr_core::Architecture::new(input_dim, &rep, &head);
            if i % 3 != 1 {
                let wl = r.random_range(0..=2usize);
                arch.with_weight_head(&widths(&mut r, wl))
            } else {
                arch
            }
        })
        .collect()
}

fn describe(arch: &cfr_core::Architecture) -> String {
    let widths = |l: &[cfr_core::nnet::LayerSpec]| l.iter().map(|s| s.width.to_string()).collect::<Vec<_>>().join("-");
    let mut s = format!("{}|rep {}|head {}", arch.input_dim, widths(&arch.rep_layers), widths(&arch.head_layers));
    if let Some(w) = &arch.weight_head_layers {
        s.push_str(&format!("|weight {}", widths(w)));
    }
    s
}

/// Gradient checks of the full objective over random architectures, each
/// IPM, and uniform and (when a weighting head exists) learned weights.
pub fn gradcheck_rows(count: usize, tolerance: f64, seed: u64) -> Result<Vec<GradcheckRow>> {
    use cfr_core::ipm::{IpmConfig, IpmKind, KernelConfig};
    use cfr_core::training::{objective_gradient_check, Batch, ObjectiveConfig};
    use rand::Rng;
    use rand_distr::StandardNormal;

    let d = 4;
    let mut rows = Vec::new();
    for (i, arch) in gradcheck_architectures(count, d, seed).iter().enumerate() {
        let mut model = init_model(arch, seed + i as u64)?;
        let mut r = cfr_core::rng::stream(seed + i as u64, "gradcheck");
        model.params.mapv_inplace(|_| 0.5 * r.sample::<f64, _>(StandardNormal));
        let mut weightings = vec![Weighting::Uniform];
        if model.has_weight_head() {
            weightings.push(Weighting::Learned);
        }
        for kind in [IpmKind::MmdQuadratic, IpmKind::MmdLinear, IpmKind::Sinkhorn] {
            for &weighting in &weightings {
                let cfg = ObjectiveConfig {
                    alpha: 1.0,
                    lambda_h: 0.1,
                    lambda_w: 0.1,
                    ipm: IpmConfig { kind, kernel: KernelConfig::fixed(1.0), ..IpmConfig::default() },
                    weighting,
                };
                // batches whose penalty sits at the zero clip are skipped
                let mut found = None;
                for attempt in 0..50 {
                    let t: Vec<u8> = (0..10).map(|k| (k % 2) as u8).collect();
                    let x = Array2::from_shape_fn((10, d), |(k, _)| r.sample::<f64, _>(StandardNormal) + f64::from(t[k]));
                    let y = Array1::from_shape_fn(10, |_| r.sample::<f64, _>(StandardNormal));
                    let batch = Batch::new(x, t, y);
                    let obj = cfr_core::training::total_objective(&model, &batch, &cfg)?;
                    if obj.ipm_raw > 1e-3 || attempt == 49 {
                        found = Some(batch);
                        break;
                    }
                }
                let batch = found.expect("batch chosen");
                let report = objective_gradient_check(&model, &batch, &cfg, 1e-5)?;
                rows.push(GradcheckRow {
                    architecture: describe(arch),
                    ipm: kind.to_string(),
                    weighting: weighting.to_string(),
                    max_relative_error: report.max_relative_error,
                    passed: report.passes(tolerance),
                    worst_block: report.worst_block,
                });
            }
        }
    }
    Ok(rows)
}

/// `gradcheck`: writes `gradcheck.csv`; fails with a numeric error when any
/// check exceeds the tolerance.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<Vec<GradcheckRow>> {
    let rows = gradcheck_rows(cfg.gradcheck_architectures, cfg.gradcheck_tolerance, cfg.seed)?;
    let dir = cfg.run_dir();
    create_dir(&dir)?;
    write_csv(&dir.join("gradcheck.csv"), &rows)?;
    let failed = rows.iter().filter(|r| !r.passed).count();
    if failed > 0 {
        return Err(CfrError::Numeric(format!("{failed} of {} gradient checks exceed tolerance {}", rows.len(), cfg.gradcheck_tolerance)));
    }
    Ok(rows)
}
