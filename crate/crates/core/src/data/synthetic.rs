use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::{DataError, DataKind, Result, TimeSeriesDataset};
use crate::tensor::{softplus, Tensor};

pub const GAUSSIAN_NOISE_SD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SyntheticKind {
    Poisson,
    Gaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticSpec {
    pub kind: SyntheticKind,
    pub d_y: usize,
    pub timesteps: usize,
    pub cells_per_t: usize,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            kind: SyntheticKind::Poisson,
            d_y: 4,
            timesteps: 16,
            cells_per_t: 200,
            seed: 0,
        }
    }
}

/// True per-timestep parameters: λ(t) for Poisson data, μ(t) for Gaussian.
#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub kind: SyntheticKind,
    pub times: Vec<f64>,
    pub params: Vec<Vec<f64>>,
    /// Gaussian observation noise; zero for Poisson data.
    pub noise_sd: f64,
}

/// Closed-form state of `dz/dt = [[-0.1, 1], [-1, -0.1]] z`, `z(0) = [1, 0]`.
pub fn oscillator_state(t: f64) -> [f64; 2] {
    let decay = (-0.1 * t).exp();
    [decay * t.cos(), -decay * t.sin()]
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<(TimeSeriesDataset, GroundTruth)> {
    if spec.d_y == 0 || spec.timesteps == 0 || spec.cells_per_t == 0 {
        return Err(DataError::Invalid(format!(
            "synthetic spec needs positive d_y, timesteps and cells (got {}, {}, {})",
            spec.d_y, spec.timesteps, spec.cells_per_t
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let loadings: Vec<([f64; 2], f64)> = (0..spec.d_y)
        .map(|_| {
            let a = [rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)];
            let b = rng.random_range(0.5..2.0);
            (a, b)
        })
        .collect();
    let times: Vec<f64> = (0..spec.timesteps).map(|t| t as f64).collect();
    let params: Vec<Vec<f64>> = times
        .iter()
        .map(|&t| {
            let z = oscillator_state(t);
            loadings
                .iter()
                .map(|(a, b)| {
                    let eta = a[0] * z[0] + a[1] * z[1] + b;
                    match spec.kind {
                        SyntheticKind::Poisson => softplus(eta),
                        SyntheticKind::Gaussian => eta,
                    }
                })
                .collect()
        })
        .collect();
    let noise = Normal::new(0.0, GAUSSIAN_NOISE_SD).expect("positive sd");
    let mut samples = Vec::with_capacity(spec.timesteps);
    for p in &params {
        let mut data = Vec::with_capacity(spec.cells_per_t * spec.d_y);
        for _ in 0..spec.cells_per_t {
            for &v in p {
                data.push(match spec.kind {
                    SyntheticKind::Poisson => Poisson::new(v).expect("softplus is positive").sample(&mut rng),
                    SyntheticKind::Gaussian => v + noise.sample(&mut rng),
                });
            }
        }
        samples.push(Tensor::new(vec![spec.cells_per_t, spec.d_y], data).expect("shape bookkeeping"));
    }
    let (kind, noise_sd) = match spec.kind {
        SyntheticKind::Poisson => (DataKind::Expression, 0.0),
        SyntheticKind::Gaussian => (DataKind::Flux, GAUSSIAN_NOISE_SD),
    };
    let names = (0..spec.d_y).map(|g| format!("g{g}")).collect();
    let ds = TimeSeriesDataset::new(kind, times.clone(), samples, names)?;
    Ok((
        ds,
        GroundTruth {
            kind: spec.kind,
            times,
            params,
            noise_sd,
        },
    ))
}
