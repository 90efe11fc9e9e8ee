//! Per-timestep sample sets, their CSV forms, preprocessing, synthetic
//! generation, pathway definitions and the gene-knockout dataset builder.

mod csv_io;
mod knockout;
mod pathway;
mod synthetic;

pub use csv_io::{
    load_dataset_csv, load_expression_csv, load_expression_matrix, save_dataset_csv, save_expression_csv,
    save_ground_truth_csv,
};
pub use knockout::{knockout_generate, top_k_expressed, FluxEstimator, KnockoutConfig, KnockoutDataset, KnockoutSpec};
pub use pathway::{MetaboliteDef, ModuleDef, PathwayDef};
pub use synthetic::{generate_synthetic, oscillator_state, GroundTruth, SyntheticKind, SyntheticSpec};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}, row {row}: {detail}")]
    Row { path: String, row: usize, detail: String },
    #[error("invalid dataset: {0}")]
    Invalid(String),
    #[error("invalid pathway: {0}")]
    Pathway(String),
    #[error("knockout: {0}")]
    Knockout(String),
    #[error("flux estimation failed at timestep {timestep}: {detail}")]
    Estimator { timestep: usize, detail: String },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl DataError {
    pub fn is_numerical(&self) -> bool {
        matches!(self, DataError::Estimator { .. })
    }
}

pub type Result<T> = std::result::Result<T, DataError>;

/// Name prefix of appended knockout indicator columns.
pub const KNOCKOUT_PREFIX: &str = "ko:";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Expression,
    Flux,
    Balance,
}

/// Samples `Y(θ_t)` at each of `V` timesteps. Each timestep holds a
/// `[cells, d_y]` matrix (one row per sampled cell).
#[derive(Clone, Debug, PartialEq)]
pub struct TimeSeriesDataset {
    kind: DataKind,
    normalized: bool,
    times: Vec<f64>,
    samples: Vec<Tensor>,
    feature_names: Vec<String>,
    /// trailing feature columns holding a knockout indicator vector
    knockout_columns: usize,
}

impl TimeSeriesDataset {
    pub fn new(kind: DataKind, times: Vec<f64>, samples: Vec<Tensor>, feature_names: Vec<String>) -> Result<Self> {
        let ds = Self {
            kind,
            normalized: false,
            times,
            samples,
            feature_names,
            knockout_columns: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Builds from per-timestep row lists.
    pub fn from_rows(kind: DataKind, times: Vec<f64>, rows: Vec<Vec<Vec<f64>>>, feature_names: Vec<String>) -> Result<Self> {
        let mut samples = Vec::with_capacity(rows.len());
        for (t, r) in rows.iter().enumerate() {
            if r.is_empty() {
                return Err(DataError::Invalid(format!("timestep {t} has no samples")));
            }
            samples.push(Tensor::from_rows(r).map_err(|e| DataError::Invalid(format!("timestep {t}: {e}")))?);
        }
        Self::new(kind, times, samples, feature_names)
    }

    fn validate(&self) -> Result<()> {
        if self.times.is_empty() {
            return Err(DataError::Invalid("no timesteps".into()));
        }
        if self.times.len() != self.samples.len() {
            return Err(DataError::Invalid(format!(
                "{} times but {} sample blocks",
                self.times.len(),
                self.samples.len()
            )));
        }
        for w in self.times.windows(2) {
            if !(w[1] > w[0]) {
                return Err(DataError::Invalid(format!("times not strictly ascending ({} then {})", w[0], w[1])));
            }
        }
        let d = self.feature_names.len();
        if d == 0 {
            return Err(DataError::Invalid("no features".into()));
        }
        if self.knockout_columns > d {
            return Err(DataError::Invalid("more knockout columns than features".into()));
        }
        for (t, s) in self.samples.iter().enumerate() {
            if s.shape().len() != 2 || s.shape()[0] == 0 {
                return Err(DataError::Invalid(format!("timestep {t} has no samples")));
            }
            if s.shape()[1] != d {
                return Err(DataError::Invalid(format!(
                    "timestep {t} has {} features, expected {d}",
                    s.shape()[1]
                )));
            }
            if let Some(v) = s.data().iter().find(|v| !v.is_finite()) {
                return Err(DataError::Invalid(format!("timestep {t} holds non-finite value {v}")));
            }
            if self.is_count_data() {
                if let Some(v) = s.data().iter().find(|&&v| v < 0.0 || v.fract() != 0.0) {
                    return Err(DataError::Invalid(format!(
                        "expression counts must be non-negative integers; timestep {t} holds {v}"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn kind(&self) -> DataKind {
        self.kind
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    /// Raw (non-normalized) expression counts.
    pub fn is_count_data(&self) -> bool {
        self.kind == DataKind::Expression && !self.normalized
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.feature_names.len()
    }

    pub fn feature_names(&self) -> &[String] {
        &self.feature_names
    }

    pub fn knockout_columns(&self) -> usize {
        self.knockout_columns
    }

    pub fn samples(&self, t: usize) -> &Tensor {
        &self.samples[t]
    }

    pub fn sample_counts(&self) -> Vec<usize> {
        self.samples.iter().map(Tensor::rows).collect()
    }

    pub(crate) fn with_flags(mut self, normalized: bool, knockout_columns: usize) -> Result<Self> {
        self.normalized = normalized;
        self.knockout_columns = knockout_columns;
        self.validate()?;
        Ok(self)
    }

    /// Appends a constant vector to every sample as knockout indicator
    /// columns named `ko:<name>`.
    pub fn append_constant_columns(&self, names: &[String], values: &[f64]) -> Result<Self> {
        if self.knockout_columns != 0 {
            return Err(DataError::Invalid("knockout columns already present".into()));
        }
        let d = self.dim();
        if names.len() != values.len() {
            return Err(DataError::Invalid("knockout names and values differ in length".into()));
        }
        let w = d + values.len();
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let mut data = Vec::with_capacity(s.rows() * w);
                for r in 0..s.rows() {
                    data.extend_from_slice(s.row(r));
                    data.extend_from_slice(values);
                }
                Tensor::new(vec![s.rows(), w], data).expect("shape bookkeeping")
            })
            .collect();
        let mut feature_names = self.feature_names.clone();
        feature_names.extend(names.iter().map(|n| format!("{KNOCKOUT_PREFIX}{n}")));
        let ds = Self {
            kind: self.kind,
            normalized: self.normalized,
            times: self.times.clone(),
            samples,
            feature_names,
            knockout_columns: values.len(),
        };
        ds.validate()?;
        Ok(ds)
    }

    /// Copy with the named feature columns set to zero.
    pub fn zero_features(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.dim()) {
            return Err(DataError::Invalid(format!("feature index {c} out of range")));
        }
        let mut out = self.clone();
        for s in &mut out.samples {
            let w = s.cols();
            for r in 0..s.rows() {
                for &c in columns {
                    s.data_mut()[r * w + c] = 0.0;
                }
            }
        }
        Ok(out)
    }

    /// Keeps only the given feature columns, in order.
    pub fn select_features(&self, columns: &[usize]) -> Result<Self> {
        if let Some(&c) = columns.iter().find(|&&c| c >= self.dim()) {
            return Err(DataError::Invalid(format!("feature index {c} out of range")));
        }
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let data = (0..s.rows()).flat_map(|r| columns.iter().map(move |&c| s.at(r, c))).collect();
                Tensor::new(vec![s.rows(), columns.len()], data).expect("shape bookkeeping")
            })
            .collect();
        let ds = Self {
            kind: self.kind,
            normalized: self.normalized,
            times: self.times.clone(),
            samples,
            feature_names: columns.iter().map(|&c| self.feature_names[c].clone()).collect(),
            knockout_columns: 0,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn feature_index(&self, name: &str) -> Option<usize> {
        self.feature_names.iter().position(|n| n == name)
    }

    /// Per-feature mean over every sample in the first `timesteps` timesteps.
    pub fn global_mean(&self, timesteps: usize) -> Vec<f64> {
        let d = self.dim();
        let mut sum = vec![0.0; d];
        let mut n = 0usize;
        for s in self.samples.iter().take(timesteps.max(1)) {
            for r in 0..s.rows() {
                for (acc, v) in sum.iter_mut().zip(s.row(r)) {
                    *acc += v;
                }
            }
            n += s.rows();
        }
        sum.into_iter().map(|v| v / n as f64).collect()
    }

    /// Splits every timestep's samples into train/test parts. Each part gets
    /// at least one sample, so every timestep needs at least two.
    pub fn split_samples(&self, test_fraction: f64, seed: u64) -> Result<(Self, Self)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(DataError::Invalid(format!("test fraction {test_fraction} must lie in (0, 1)")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (t, s) in self.samples.iter().enumerate() {
            let n = s.rows();
            if n < 2 {
                return Err(DataError::Invalid(format!("timestep {t} needs at least 2 samples to split")));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
            let pick = |ids: &[usize]| {
                let data = ids.iter().flat_map(|&r| s.row(r).iter().copied()).collect();
                Tensor::new(vec![ids.len(), s.cols()], data).expect("shape bookkeeping")
            };
            let (te, tr) = idx.split_at(n_test);
            let mut tr = tr.to_vec();
            let mut te = te.to_vec();
            tr.sort_unstable();
            te.sort_unstable();
            train.push(pick(&tr));
            test.push(pick(&te));
        }
        let make = |samples| Self {
            samples,
            ..self.clone()
        };
        Ok((make(train), make(test)))
    }
}

/// `log1p` followed by per-feature standardisation with statistics from the
/// first `window` timesteps (all when `None`). Zero-variance features map to 0.
pub fn log_normalize_scale(ds: &TimeSeriesDataset, window: Option<usize>) -> Result<TimeSeriesDataset> {
    if ds.kind != DataKind::Expression {
        return Err(DataError::Invalid("log-normalisation applies to expression data only".into()));
    }
    if ds.normalized {
        return Err(DataError::Invalid("dataset is already log-normalised".into()));
    }
    let d = ds.dim();
    let w = window.unwrap_or(ds.len()).clamp(1, ds.len());
    let logged: Vec<Tensor> = ds.samples.iter().map(|s| s.map(f64::ln_1p)).collect();
    let mut mean = vec![0.0; d];
    let mut n = 0usize;
    for s in &logged[..w] {
        for r in 0..s.rows() {
            for (m, v) in mean.iter_mut().zip(s.row(r)) {
                *m += v;
            }
        }
        n += s.rows();
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for s in &logged[..w] {
        for r in 0..s.rows() {
            for ((acc, v), m) in var.iter_mut().zip(s.row(r)).zip(&mean) {
                *acc += (v - m).powi(2);
            }
        }
    }
    let std: Vec<f64> = var.iter().map(|v| (v / n as f64).sqrt()).collect();
    let samples = logged
        .into_iter()
        .map(|mut s| {
            let c = s.cols();
            for (i, v) in s.data_mut().iter_mut().enumerate() {
                let j = i % c;
                *v = if std[j] > 0.0 { (*v - mean[j]) / std[j] } else { 0.0 };
            }
            s
        })
        .collect();
    let out = TimeSeriesDataset {
        samples,
        ..ds.clone()
    };
    out.with_flags(true, ds.knockout_columns)
}
