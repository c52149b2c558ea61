//! Observational datasets: CSV ingestion, splitting, standardization and
//! treatment-group views.

use std::collections::HashSet;
use std::fs::File;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{CfrError, Result};
use crate::rng;
use crate::scalar::Scalar;

/// Covariates, binary treatments and outcomes, with optional ground truth.
///
/// `mu0`/`mu1` are the expected potential outcomes (known only for synthetic
/// data) and `e` the true propensity `p(T=1 | X)` (known for randomized or
/// synthetic data).
#[derive(Debug, Clone, PartialEq)]
pub struct ObservationalDataset<S> {
    pub x: Array2<S>,
    pub t: Vec<u8>,
    pub y: Array1<S>,
    pub mu0: Option<Array1<S>>,
    pub mu1: Option<Array1<S>>,
    pub e: Option<Array1<S>>,
    pub feature_names: Vec<String>,
}

impl<S: Scalar> ObservationalDataset<S> {
    pub fn new(x: Array2<S>, t: Vec<u8>, y: Array1<S>) -> Result<Self> {
        let d = x.ncols();
        let ds = ObservationalDataset {
            x,
            t,
            y,
            mu0: None,
            mu1: None,
            e: None,
            feature_names: (1..=d).map(|j| format!("x{j}")).collect(),
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_truth(mut self, mu0: Array1<S>, mu1: Array1<S>) -> Result<Self> {
        self.mu0 = Some(mu0);
        self.mu1 = Some(mu1);
        self.validate()?;
        Ok(self)
    }

    pub fn with_propensity(mut self, e: Array1<S>) -> Result<Self> {
        self.e = Some(e);
        self.validate()?;
        Ok(self)
    }

    pub fn with_feature_names(mut self, names: Vec<String>) -> Result<Self> {
        self.feature_names = names;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.x.nrows();
        let d = self.x.ncols();
        if d < 1 {
            return Err(CfrError::Validation("at least one covariate is required".into()));
        }
        if n < 2 {
            return Err(CfrError::Validation(format!("at least 2 rows are required, got {n}")));
        }
        if self.t.len() != n || self.y.len() != n {
            return Err(CfrError::Validation(format!(
                "length mismatch: x has {n} rows, t has {}, y has {}",
                self.t.len(),
                self.y.len()
            )));
        }
        if self.feature_names.len() != d {
            return Err(CfrError::Validation(format!(
                "{} feature names for {d} covariates",
                self.feature_names.len()
            )));
        }
        if let Some(i) = self.t.iter().position(|&t| t > 1) {
            return Err(CfrError::Validation(format!(
                "row {}: treatment must be 0 or 1, got {}",
                i + 1,
                self.t[i]
            )));
        }
        for (name, col) in [("mu0", &self.mu0), ("mu1", &self.mu1), ("e", &self.e)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(CfrError::Validation(format!("{name} has {} entries, expected {n}", c.len())));
                }
            }
        }
        if self.mu0.is_some() != self.mu1.is_some() {
            return Err(CfrError::Validation("mu0 and mu1 must be given together".into()));
        }
        if let (Some(m0), Some(m1)) = (&self.mu0, &self.mu1) {
            if let Some(i) = (0..n).find(|&i| !(m1[i] - m0[i]).is_finite()) {
                return Err(CfrError::Validation(format!("row {}: non-finite true effect", i + 1)));
            }
        }
        if let Some(e) = &self.e {
            if let Some(i) = e.iter().position(|&p| !(p > S::zero() && p < S::one())) {
                return Err(CfrError::Validation(format!(
                    "row {}: propensity must lie strictly inside (0,1), got {}",
                    i + 1,
                    e[i]
                )));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn d(&self) -> usize {
        self.x.ncols()
    }

    pub fn has_truth(&self) -> bool {
        self.mu0.is_some() && self.mu1.is_some()
    }

    /// True conditional effect `mu1 - mu0`, if known.
    pub fn tau(&self) -> Option<Array1<S>> {
        match (&self.mu0, &self.mu1) {
            (Some(m0), Some(m1)) => Some(m1 - m0),
            _ => None,
        }
    }

    pub fn mu(&self, arm: u8) -> Option<&Array1<S>> {
        if arm == 0 {
            self.mu0.as_ref()
        } else {
            self.mu1.as_ref()
        }
    }

    pub fn treated_fraction(&self) -> f64 {
        self.t.iter().filter(|&&t| t == 1).count() as f64 / self.n() as f64
    }

    /// Rows at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Self {
        let pick = |a: &Array1<S>| a.select(Axis(0), indices);
        ObservationalDataset {
            x: self.x.select(Axis(0), indices),
            t: indices.iter().map(|&i| self.t[i]).collect(),
            y: pick(&self.y),
            mu0: self.mu0.as_ref().map(pick),
            mu1: self.mu1.as_ref().map(pick),
            e: self.e.as_ref().map(pick),
            feature_names: self.feature_names.clone(),
        }
    }

    /// Control and treated indices.
    pub fn treatment_groups(&self) -> (Vec<usize>, Vec<usize>) {
        treatment_groups(&self.t)
    }

    /// Writes the dataset as CSV: covariates, `t`, `y`, then whichever of
    /// `mu0`, `mu1`, `e` are present. Reals use 17 significant digits.
    pub fn save_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| CfrError::io(path, e))?;
        self.write_csv(file)
    }

    pub fn write_csv<W: Write>(&self, sink: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(sink);
        let mut header: Vec<&str> = self.feature_names.iter().map(String::as_str).collect();
        header.extend(["t", "y"]);
        let extras: Vec<(&str, &Array1<S>)> = [("mu0", &self.mu0), ("mu1", &self.mu1), ("e", &self.e)]
            .into_iter()
            .filter_map(|(n, c)| c.as_ref().map(|c| (n, c)))
            .collect();
        header.extend(extras.iter().map(|(n, _)| *n));
        w.write_record(&header)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for i in 0..self.n() {
            row.clear();
            row.extend(self.x.row(i).iter().map(|v| fmt_real(*v)));
            row.push(self.t[i].to_string());
            row.push(fmt_real(self.y[i]));
            row.extend(extras.iter().map(|(_, c)| fmt_real(c[i])));
            w.write_record(&row)?;
        }
        w.flush().map_err(|e| CfrError::io("<csv sink>", e))?;
        Ok(())
    }
}

/// Decimal rendering with 17 significant digits; round-trips `f64` exactly.
pub fn fmt_real<S: Scalar>(v: S) -> String {
    format!("{v:.16e}")
}

pub fn treatment_groups(t: &[u8]) -> (Vec<usize>, Vec<usize>) {
    let mut control = Vec::new();
    let mut treated = Vec::new();
    for (i, &ti) in t.iter().enumerate() {
        if ti == 1 {
            treated.push(i);
        } else {
            control.push(i);
        }
    }
    (control, treated)
}

/// Which CSV columns carry treatment, outcome and ground truth. Every other
/// column is read as a covariate.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSchema {
    pub treatment: String,
    pub outcome: String,
    /// Optional columns are used when present in the header.
    pub mu0: Option<String>,
    pub mu1: Option<String>,
    pub propensity: Option<String>,
    /// Columns to drop entirely (ids and the like).
    pub ignore: Vec<String>,
}

impl Default for DatasetSchema {
    fn default() -> Self {
        DatasetSchema {
            treatment: "t".into(),
            outcome: "y".into(),
            mu0: Some("mu0".into()),
            mu1: Some("mu1".into()),
            propensity: Some("e".into()),
            ignore: Vec::new(),
        }
    }
}

pub fn load_dataset<S: Scalar>(path: impl AsRef<Path>, schema: &DatasetSchema) -> Result<ObservationalDataset<S>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| CfrError::io(path, e))?;
    read_dataset(file, schema)
}

pub fn read_dataset<S: Scalar, R: std::io::Read>(source: R, schema: &DatasetSchema) -> Result<ObservationalDataset<S>> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(source);
    let header: Vec<String> = rdr.headers()?.iter().map(str::to_owned).collect();
    let find = |name: &str| header.iter().position(|h| h == name);
    let t_col = find(&schema.treatment)
        .ok_or_else(|| CfrError::Schema(format!("treatment column '{}' not found", schema.treatment)))?;
    let y_col = find(&schema.outcome)
        .ok_or_else(|| CfrError::Schema(format!("outcome column '{}' not found", schema.outcome)))?;
    let opt = |c: &Option<String>| c.as_deref().and_then(find);
    let mu0_col = opt(&schema.mu0);
    let mu1_col = opt(&schema.mu1);
    let e_col = opt(&schema.propensity);
    if mu0_col.is_some() != mu1_col.is_some() {
        return Err(CfrError::Schema("mu0 and mu1 columns must both be present or both absent".into()));
    }
    let reserved: HashSet<usize> = [Some(t_col), Some(y_col), mu0_col, mu1_col, e_col]
        .into_iter()
        .flatten()
        .chain(schema.ignore.iter().filter_map(|n| find(n)))
        .collect();
    let cov_cols: Vec<usize> = (0..header.len()).filter(|c| !reserved.contains(c)).collect();
    if cov_cols.is_empty() {
        return Err(CfrError::Schema("no covariate columns".into()));
    }

    let mut xs: Vec<S> = Vec::new();
    let mut t = Vec::new();
    let mut y = Vec::new();
    let (mut mu0, mut mu1, mut e) = (Vec::new(), Vec::new(), Vec::new());
    for (r, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let row = r + 1;
        let cell = |c: usize| -> Result<S> {
            let raw = rec.get(c).unwrap_or("");
            raw.parse::<S>().map_err(|_| CfrError::Parse {
                row,
                column: header[c].clone(),
                value: raw.to_owned(),
            })
        };
        for &c in &cov_cols {
            xs.push(cell(c)?);
        }
        let tv = cell(t_col)?;
        if tv == S::zero() {
            t.push(0u8);
        } else if tv == S::one() {
            t.push(1u8);
        } else {
            return Err(CfrError::Validation(format!(
                "row {row}: treatment '{}' must be 0 or 1",
                rec.get(t_col).unwrap_or("")
            )));
        }
        y.push(cell(y_col)?);
        if let (Some(a), Some(b)) = (mu0_col, mu1_col) {
            mu0.push(cell(a)?);
            mu1.push(cell(b)?);
        }
        if let Some(c) = e_col {
            e.push(cell(c)?);
        }
    }
    let n = t.len();
    let x = Array2::from_shape_vec((n, cov_cols.len()), xs).map_err(|e| CfrError::Shape(e.to_string()))?;
    let ds = ObservationalDataset {
        x,
        t,
        y: Array1::from(y),
        mu0: mu0_col.map(|_| Array1::from(mu0)),
        mu1: mu1_col.map(|_| Array1::from(mu1)),
        e: e_col.map(|_| Array1::from(e)),
        feature_names: cov_cols.iter().map(|&c| header[c].clone()).collect(),
    };
    ds.validate()?;
    Ok(ds)
}

/// Disjoint train/validation/test index lists covering `0..n`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
    pub ratios: [f64; 3],
    pub seed: u64,
}

impl DatasetSplit {
    /// Everything in train, nothing held out.
    pub fn all_train(n: usize) -> Self {
        DatasetSplit {
            train: (0..n).collect(),
            valid: Vec::new(),
            test: Vec::new(),
            ratios: [1.0, 0.0, 0.0],
            seed: 0,
        }
    }
}

/// Random split with sizes `floor(n * ratio)` for validation and test; the
/// remainder goes to train. Each index list is returned sorted.
pub fn split_dataset(n: usize, ratios: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
        return Err(CfrError::Config(format!("split ratios must be nonnegative, got {ratios:?}")));
    }
    let total: f64 = ratios.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(CfrError::Config(format!("split ratios must sum to 1, got {total}")));
    }
    // The epsilon absorbs representation error such as 0.29 * 100 = 28.999...
    let alloc = |r: f64| ((n as f64) * r + 1e-9).floor() as usize;
    let n_valid = alloc(ratios[1]);
    let n_test = alloc(ratios[2]);
    for (name, r, k) in [("validation", ratios[1], n_valid), ("test", ratios[2], n_test)] {
        if r > 0.0 && k == 0 {
            return Err(CfrError::Size(format!("n = {n} is too small for a nonempty {name} split at ratio {r}")));
        }
    }
    if n_valid + n_test > n {
        return Err(CfrError::Size(format!("n = {n} cannot hold the requested split")));
    }
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::stream(seed, rng::SPLIT));
    let n_train = n - n_valid - n_test;
    let take = |range: std::ops::Range<usize>| {
        let mut v = perm[range].to_vec();
        v.sort_unstable();
        v
    };
    Ok(DatasetSplit {
        train: take(0..n_train),
        valid: take(n_train..n_train + n_valid),
        test: take(n_train + n_valid..n),
        ratios,
        seed,
    })
}

/// Per-feature affine standardization (population standard deviation).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer<S> {
    pub mean: Vec<S>,
    pub std: Vec<S>,
}

impl<S: Scalar> Standardizer<S> {
    pub fn fit(x: ArrayView2<S>, fit_indices: &[usize]) -> Result<Self> {
        if fit_indices.is_empty() {
            return Err(CfrError::Size("cannot fit a standardizer on zero rows".into()));
        }
        let rows = x.select(Axis(0), fit_indices);
        let m = S::of(fit_indices.len());
        let mut mean = Vec::with_capacity(x.ncols());
        let mut std = Vec::with_capacity(x.ncols());
        for col in rows.columns() {
            let mu = col.sum() / m;
            let var = col.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / m;
            let sd = var.sqrt();
            mean.push(mu);
            // constant features map to zero
            std.push(if sd > S::zero() && sd.is_finite() { sd } else { S::one() });
        }
        Ok(Standardizer { mean, std })
    }

    pub fn identity(d: usize) -> Self {
        Standardizer {
            mean: vec![S::zero(); d],
            std: vec![S::one(); d],
        }
    }

    pub fn transform(&self, x: ArrayView2<S>) -> Array2<S> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| (v - self.mean[j]) / self.std[j]);
        }
        out
    }

    pub fn inverse_transform(&self, x: ArrayView2<S>) -> Array2<S> {
        let mut out = x.to_owned();
        for (j, mut col) in out.columns_mut().into_iter().enumerate() {
            col.mapv_inplace(|v| v * self.std[j] + self.mean[j]);
        }
        out
    }
}

/// Standardizes covariates using statistics measured on `fit_indices`.
pub fn standardize<S: Scalar>(
    ds: &ObservationalDataset<S>,
    fit_indices: &[usize],
) -> Result<(ObservationalDataset<S>, Standardizer<S>)> {
    let st = Standardizer::fit(ds.x.view(), fit_indices)?;
    let mut out = ds.clone();
    out.x = st.transform(ds.x.view());
    Ok((out, st))
}
