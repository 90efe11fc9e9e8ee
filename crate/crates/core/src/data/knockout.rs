use std::collections::HashSet;

use rand::seq::{index::sample, SliceRandom};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{DataError, PathwayDef, Result, TimeSeriesDataset};

/// Maps an expression dataset to per-timestep flux and balance datasets.
pub trait FluxEstimator {
    fn estimate(
        &self,
        expression: &TimeSeriesDataset,
        pathway: &PathwayDef,
        seed: u64,
    ) -> Result<(TimeSeriesDataset, TimeSeriesDataset)>;
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KnockoutConfig {
    /// candidate pool: the `k` most expressed genes
    pub k: usize,
    /// number of knockout configurations `S`
    pub configurations: usize,
    pub test_fraction: f64,
    pub max_redraws: usize,
}

impl Default for KnockoutConfig {
    fn default() -> Self {
        Self {
            k: 20,
            configurations: 5,
            test_fraction: 0.2,
            max_redraws: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct KnockoutSpec {
    /// knocked-out feature indices, ascending
    pub genes: Vec<usize>,
    /// `b^g`: 0 for knocked genes, 1 otherwise; one entry per dataset gene
    pub indicator: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct KnockoutDataset {
    pub top_k: Vec<usize>,
    pub configs: Vec<KnockoutSpec>,
    pub flux: Vec<TimeSeriesDataset>,
    pub balance: Vec<TimeSeriesDataset>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

/// Indices of the `k` genes with the largest total count over all cells and
/// timesteps, largest first; ties go to the lower index.
pub fn top_k_expressed(ds: &TimeSeriesDataset, k: usize) -> Vec<usize> {
    let d = ds.dim();
    let mut totals = vec![0.0; d];
    for t in 0..ds.len() {
        let s = ds.samples(t);
        for r in 0..s.rows() {
            for (acc, v) in totals.iter_mut().zip(s.row(r)) {
                *acc += v;
            }
        }
    }
    let mut idx: Vec<usize> = (0..d).collect();
    idx.sort_by(|&a, &b| totals[b].total_cmp(&totals[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

pub fn knockout_generate(
    ds: &TimeSeriesDataset,
    pathway: &PathwayDef,
    cfg: &KnockoutConfig,
    seed: u64,
    estimator: &dyn FluxEstimator,
) -> Result<KnockoutDataset> {
    let d = ds.dim();
    if !ds.is_count_data() {
        return Err(DataError::Knockout("needs raw expression counts".into()));
    }
    if cfg.k < 2 || cfg.k > d {
        return Err(DataError::Knockout(format!("k = {} must lie in 2..={d}", cfg.k)));
    }
    if cfg.configurations < 2 {
        return Err(DataError::Knockout(format!(
            "need at least 2 configurations for a train/test split, got {}",
            cfg.configurations
        )));
    }
    if !(cfg.test_fraction > 0.0 && cfg.test_fraction < 1.0) {
        return Err(DataError::Knockout(format!("test fraction {} must lie in (0, 1)", cfg.test_fraction)));
    }
    pathway.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top_k = top_k_expressed(ds, cfg.k);
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut configs = Vec::with_capacity(cfg.configurations);
    for s in 0..cfg.configurations {
        let mut attempts = 0;
        let genes = loop {
            let size = rng.random_range(1..=cfg.k / 2);
            let mut genes: Vec<usize> = sample(&mut rng, cfg.k, size).into_iter().map(|i| top_k[i]).collect();
            genes.sort_unstable();
            if seen.insert(genes.clone()) {
                break genes;
            }
            attempts += 1;
            if attempts >= cfg.max_redraws {
                return Err(DataError::Knockout(format!(
                    "configuration {s}: no new gene subset after {attempts} draws"
                )));
            }
        };
        let mut indicator = vec![1.0; d];
        for &g in &genes {
            indicator[g] = 0.0;
        }
        configs.push(KnockoutSpec { genes, indicator });
    }
    let names: Vec<String> = ds.feature_names().to_vec();
    let mut flux = Vec::with_capacity(configs.len());
    let mut balance = Vec::with_capacity(configs.len());
    for (s, spec) in configs.iter().enumerate() {
        let knocked = ds.zero_features(&spec.genes)?;
        let (f, b) = estimator.estimate(&knocked, pathway, seed.wrapping_add(1 + s as u64))?;
        flux.push(f.append_constant_columns(&names, &spec.indicator)?);
        balance.push(b.append_constant_columns(&names, &spec.indicator)?);
    }
    let n = cfg.configurations;
    let n_test = ((n as f64 * cfg.test_fraction).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut test = order[..n_test].to_vec();
    let mut train = order[n_test..].to_vec();
    test.sort_unstable();
    train.sort_unstable();
    Ok(KnockoutDataset {
        top_k,
        configs,
        flux,
        balance,
        train,
        test,
    })
}
