//! Diagonal Normal, LogNormal and Poisson distributions over tape variables.
//!
//! Parameters are `[B, d]` tensors (or `[d]` for a single draw). Log-densities
//! sum over the trailing dimension, so a `[B, d]` input gives a `[B]` result.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{LgammaTable, Tape, TensorError, Var};

pub const SIGMA_MIN: f64 = 1e-3;
pub const LAMBDA_MIN: f64 = 1e-6;

const LN_2PI: f64 = 1.837_877_066_409_345_3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DistError {
    #[error("{dist}: observation {value} at index {index} is outside the support")]
    Support {
        dist: &'static str,
        index: usize,
        value: f64,
    },
    #[error("kl_divergence: cannot compare {0} with {1}")]
    FamilyMismatch(&'static str, &'static str),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, DistError>;

/// `SIGMA_MIN + softplus(raw)`.
pub fn positive_scale(tape: &mut Tape, raw: Var) -> Var {
    let sp = tape.softplus(raw);
    tape.add_scalar(sp, SIGMA_MIN)
}

/// `LAMBDA_MIN + softplus(raw)`.
pub fn positive_rate(tape: &mut Tape, raw: Var) -> Var {
    let sp = tape.softplus(raw);
    tape.add_scalar(sp, LAMBDA_MIN)
}

fn check_same_shape(tape: &Tape, op: &'static str, a: Var, b: Var) -> Result<()> {
    if tape.shape(a) != tape.shape(b) {
        return Err(TensorError::Shape {
            op,
            lhs: tape.shape(a).to_vec(),
            rhs: tape.shape(b).to_vec(),
        }
        .into());
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LatentFamily {
    Normal,
    #[serde(alias = "log_normal")]
    LogNormal,
}

#[derive(Clone, Copy, Debug)]
pub struct DiagNormal {
    pub mu: Var,
    pub sigma: Var,
}

impl DiagNormal {
    pub fn reparam_sample(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        check_same_shape(tape, "reparam_sample", self.mu, noise)?;
        let scaled = tape.mul(self.sigma, noise)?;
        Ok(tape.add(self.mu, scaled)?)
    }

    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        check_same_shape(tape, "normal_log_prob", self.mu, x)?;
        let diff = tape.sub(x, self.mu)?;
        let z = tape.div(diff, self.sigma)?;
        let z2 = tape.square(z);
        let half_z2 = tape.scale(z2, -0.5);
        let log_sigma = tape.log(self.sigma)?;
        let t = tape.sub(half_z2, log_sigma)?;
        let t = tape.add_scalar(t, -0.5 * LN_2PI);
        Ok(tape.sum_last(t))
    }

    /// `KL(self || other)` summed over the trailing dimension.
    pub fn kl(&self, tape: &mut Tape, other: &DiagNormal) -> Result<Var> {
        check_same_shape(tape, "kl_divergence", self.mu, other.mu)?;
        let ratio = tape.div(self.sigma, other.sigma)?;
        let ratio2 = tape.square(ratio);
        let dmu = tape.sub(self.mu, other.mu)?;
        let dmu_scaled = tape.div(dmu, other.sigma)?;
        let dmu2 = tape.square(dmu_scaled);
        let log_ratio = tape.log(ratio)?;
        // 0.5 * (r^2 + dmu^2 - 1) - ln r
        let s = tape.add(ratio2, dmu2)?;
        let s = tape.add_scalar(s, -1.0);
        let s = tape.scale(s, 0.5);
        let s = tape.sub(s, log_ratio)?;
        Ok(tape.sum_last(s))
    }
}

/// `exp` of a diagonal Normal; `mu`/`sigma` parameterise the log.
#[derive(Clone, Copy, Debug)]
pub struct LogNormalD {
    pub mu: Var,
    pub sigma: Var,
}

impl LogNormalD {
    fn underlying(&self) -> DiagNormal {
        DiagNormal {
            mu: self.mu,
            sigma: self.sigma,
        }
    }

    pub fn reparam_sample(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        let z = self.underlying().reparam_sample(tape, noise)?;
        Ok(tape.exp(z))
    }

    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        if let Some((index, &value)) = tape.value(x).data().iter().enumerate().find(|(_, &v)| !(v > 0.0)) {
            return Err(DistError::Support {
                dist: "lognormal",
                index,
                value,
            });
        }
        let lx = tape.log(x)?;
        let base = self.underlying().log_prob(tape, lx)?;
        let jac = tape.sum_last(lx);
        Ok(tape.sub(base, jac)?)
    }

    /// Equal to the KL between the underlying Normals (KL is invariant under
    /// the shared bijection `exp`).
    pub fn kl(&self, tape: &mut Tape, other: &LogNormalD) -> Result<Var> {
        self.underlying().kl(tape, &other.underlying())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct PoissonD {
    pub lambda: Var,
}

impl PoissonD {
    /// `Σ_d [k ln λ − λ − ln k!]`; counts must be non-negative integers.
    pub fn log_prob(&self, tape: &mut Tape, counts: Var, table: &mut LgammaTable) -> Result<Var> {
        check_same_shape(tape, "poisson_log_prob", self.lambda, counts)?;
        if let Some((index, &value)) = tape
            .value(counts)
            .data()
            .iter()
            .enumerate()
            .find(|(_, &v)| !(v >= 0.0) || v.fract() != 0.0)
        {
            return Err(DistError::Support {
                dist: "poisson",
                index,
                value,
            });
        }
        let log_lambda = tape.log(self.lambda)?;
        let k_log_lambda = tape.mul(log_lambda, counts)?;
        let t = tape.sub(k_log_lambda, self.lambda)?;
        let k_plus_one = tape.add_scalar(counts, 1.0);
        let log_fact = tape.lgamma_int(k_plus_one, table)?;
        let t = tape.sub(t, log_fact)?;
        Ok(tape.sum_last(t))
    }
}

/// Latent distribution of either family; `L_0` and `D` share one family.
#[derive(Clone, Copy, Debug)]
pub enum Latent {
    Normal(DiagNormal),
    LogNormal(LogNormalD),
}

impl Latent {
    pub fn new(family: LatentFamily, mu: Var, sigma: Var) -> Self {
        match family {
            LatentFamily::Normal => Latent::Normal(DiagNormal { mu, sigma }),
            LatentFamily::LogNormal => Latent::LogNormal(LogNormalD { mu, sigma }),
        }
    }

    pub fn family(&self) -> LatentFamily {
        match self {
            Latent::Normal(_) => LatentFamily::Normal,
            Latent::LogNormal(_) => LatentFamily::LogNormal,
        }
    }

    pub fn mu(&self) -> Var {
        match self {
            Latent::Normal(d) => d.mu,
            Latent::LogNormal(d) => d.mu,
        }
    }

    pub fn sigma(&self) -> Var {
        match self {
            Latent::Normal(d) => d.sigma,
            Latent::LogNormal(d) => d.sigma,
        }
    }

    pub fn reparam_sample(&self, tape: &mut Tape, noise: Var) -> Result<Var> {
        match self {
            Latent::Normal(d) => d.reparam_sample(tape, noise),
            Latent::LogNormal(d) => d.reparam_sample(tape, noise),
        }
    }

    /// The zero-noise draw: `mu` for Normal, `exp(mu)` for LogNormal.
    pub fn central_draw(&self, tape: &mut Tape) -> Var {
        match self {
            Latent::Normal(d) => d.mu,
            Latent::LogNormal(d) => tape.exp(d.mu),
        }
    }

    pub fn log_prob(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Latent::Normal(d) => d.log_prob(tape, x),
            Latent::LogNormal(d) => d.log_prob(tape, x),
        }
    }

    pub fn kl(&self, tape: &mut Tape, other: &Latent) -> Result<Var> {
        match (self, other) {
            (Latent::Normal(p), Latent::Normal(q)) => p.kl(tape, q),
            (Latent::LogNormal(p), Latent::LogNormal(q)) => p.kl(tape, q),
            (p, q) => Err(DistError::FamilyMismatch(family_name(p.family()), family_name(q.family()))),
        }
    }
}

fn family_name(f: LatentFamily) -> &'static str {
    match f {
        LatentFamily::Normal => "normal",
        LatentFamily::LogNormal => "lognormal",
    }
}
