//! The four process-model variants: encoder, latent heads, latent decoder
//! and per-time output distributions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{positive_rate, positive_scale, DiagNormal, Latent, LatentFamily, PoissonD};
use crate::encoders::{ContextSet, Encoder, EncoderConfig, EncoderKind, LatentHeads};
use crate::error::{ModelError, Result};
use crate::nn::{Linear, Mlp};
use crate::ode::{integrate_path, SolverConfig};
use crate::tensor::{LgammaTable, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Np,
    Nodep,
    Snodep,
    #[serde(alias = "snodep-gruode", alias = "snodep_gru_ode")]
    SnodepGruode,
}

impl ModelKind {
    pub const ALL: [ModelKind; 4] = [ModelKind::Np, ModelKind::Nodep, ModelKind::Snodep, ModelKind::SnodepGruode];

    pub fn encoder_kind(self) -> EncoderKind {
        match self {
            ModelKind::Np | ModelKind::Nodep => EncoderKind::Mean,
            ModelKind::Snodep => EncoderKind::Lstm,
            ModelKind::SnodepGruode => EncoderKind::GruOde,
        }
    }

    pub fn has_ode_decoder(self) -> bool {
        self != ModelKind::Np
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Np => "np",
            ModelKind::Nodep => "nodep",
            ModelKind::Snodep => "snodep",
            ModelKind::SnodepGruode => "snodep_gruode",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        serde_json::from_value(serde_json::Value::String(s.trim().to_ascii_lowercase())).ok()
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    Poisson,
    Gaussian,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub head: HeadKind,
    pub latent_family: LatentFamily,
    pub d_y: usize,
    pub d_r: usize,
    pub d_z: usize,
    pub d_d: usize,
    pub hidden: usize,
    pub append_time: bool,
    pub solver: SolverConfig,
}

impl ModelConfig {
    pub fn new(kind: ModelKind, head: HeadKind, d_y: usize) -> Self {
        Self {
            kind,
            head,
            latent_family: LatentFamily::Normal,
            d_y,
            d_r: 64,
            d_z: 32,
            d_d: 32,
            hidden: 64,
            append_time: false,
            solver: SolverConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("model.d_y", self.d_y),
            ("model.d_r", self.d_r),
            ("model.d_z", self.d_z),
            ("model.d_d", self.d_d),
            ("model.hidden", self.hidden),
        ] {
            if v == 0 {
                return Err(ModelError::config(key, "must be positive"));
            }
        }
        self.solver
            .validate()
            .map_err(|e| ModelError::config("solver", e.to_string()))
    }
}

#[derive(Clone, Debug)]
enum Decoder {
    /// `dl/dt = f(l, d, t)`
    Ode { field: Mlp },
    /// `MLP([l0, d, t])` evaluated independently per time
    Direct { mlp: Mlp },
}

/// Per-time output distribution over `y`, parameters `[B, d_y]`.
#[derive(Clone, Copy, Debug)]
pub enum OutputDist {
    Poisson(PoissonD),
    Gaussian(DiagNormal),
}

impl OutputDist {
    pub fn log_prob(&self, tape: &mut Tape, y: Var, table: &mut LgammaTable) -> Result<Var> {
        Ok(match self {
            OutputDist::Poisson(p) => p.log_prob(tape, y, table)?,
            OutputDist::Gaussian(g) => g.log_prob(tape, y)?,
        })
    }

    pub fn params(&self, tape: &Tape) -> OutputParams {
        match self {
            OutputDist::Poisson(p) => OutputParams::Poisson {
                lambda: tape.value(p.lambda).clone(),
            },
            OutputDist::Gaussian(g) => OutputParams::Gaussian {
                mu: tape.value(g.mu).clone(),
                sigma: tape.value(g.sigma).clone(),
            },
        }
    }
}

/// Detached output parameters at one time, `[B, d_y]` each.
#[derive(Clone, Debug, PartialEq)]
pub enum OutputParams {
    Poisson { lambda: Tensor },
    Gaussian { mu: Tensor, sigma: Tensor },
}

impl OutputParams {
    /// λ or μ.
    pub fn mean(&self) -> &Tensor {
        match self {
            OutputParams::Poisson { lambda } => lambda,
            OutputParams::Gaussian { mu, .. } => mu,
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            OutputParams::Poisson { lambda } => lambda.is_finite(),
            OutputParams::Gaussian { mu, sigma } => mu.is_finite() && sigma.is_finite(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct ProcessModel {
    config: ModelConfig,
    store: ParamStore,
    encoder: Encoder,
    heads: LatentHeads,
    decoder: Decoder,
    output: Linear,
}

impl ProcessModel {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = &config;
        let encoder = Encoder::new(
            &EncoderConfig {
                kind: c.kind.encoder_kind(),
                d_y: c.d_y,
                d_r: c.d_r,
                append_time: c.append_time,
            },
            &mut store,
            &mut rng,
        )?;
        let heads = LatentHeads::new(&mut store, c.d_r, c.d_z, c.d_d, c.latent_family, &mut rng)?;
        let sizes = [c.d_z + c.d_d + 1, c.hidden, c.hidden, c.d_z];
        let decoder = if c.kind.has_ode_decoder() {
            Decoder::Ode {
                field: Mlp::new(&mut store, "decoder.field", &sizes, &mut rng)?,
            }
        } else {
            Decoder::Direct {
                mlp: Mlp::new(&mut store, "decoder.mlp", &sizes, &mut rng)?,
            }
        };
        let out_dim = match c.head {
            HeadKind::Poisson => c.d_y,
            HeadKind::Gaussian => 2 * c.d_y,
        };
        let output = Linear::new(&mut store, "output", c.d_z, out_dim, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            heads,
            decoder,
            output,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn kind(&self) -> ModelKind {
        self.config.kind
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn encoder(&self) -> &Encoder {
        &self.encoder
    }

    /// Decoder vector-field parameters (empty for NP).
    pub fn field_params(&self) -> Vec<ParamId> {
        match &self.decoder {
            Decoder::Ode { field } => field.params(),
            Decoder::Direct { .. } => Vec::new(),
        }
    }

    pub fn output_params(&self) -> [ParamId; 2] {
        self.output.params()
    }

    /// `(L0, D)` conditioned on `ctx`.
    pub fn encode(&self, tape: &mut Tape, ctx: &ContextSet) -> Result<(Latent, Latent)> {
        if ctx.dim() != self.config.d_y {
            return Err(ModelError::Context(format!(
                "context has {} features, model expects {}",
                ctx.dim(),
                self.config.d_y
            )));
        }
        let r = self.encoder.encode(tape, &self.store, ctx, &self.config.solver)?;
        self.heads.latent_params(tape, &self.store, r)
    }

    /// Output distributions at `query_times`; `query_times[0]` is the time of `l0`.
    pub fn decode(&self, tape: &mut Tape, l0: Var, d: Var, query_times: &[f64]) -> Result<Vec<OutputDist>> {
        if query_times.is_empty() {
            return Ok(Vec::new());
        }
        let b = tape.shape(l0)[0];
        let latents = match &self.decoder {
            Decoder::Ode { field } => {
                let store = &self.store;
                let f = move |tape: &mut Tape, t: f64, l: Var, ctx: Option<Var>| -> crate::ode::Result<Var> {
                    let d = ctx.expect("decoder passes d as context");
                    let tcol = tape.constant(Tensor::full(&[b, 1], t));
                    let x = tape.concat(&[l, d, tcol])?;
                    Ok(field.forward(tape, store, x)?)
                };
                integrate_path(&f, tape, l0, query_times, Some(d), &self.config.solver)?
            }
            Decoder::Direct { mlp } => {
                for w in query_times.windows(2) {
                    if !(w[1] > w[0]) {
                        return Err(crate::ode::OdeError::NonAscending { prev: w[0], next: w[1] }.into());
                    }
                }
                let mut out = Vec::with_capacity(query_times.len());
                for &t in query_times {
                    let tcol = tape.constant(Tensor::full(&[b, 1], t));
                    let x = tape.concat(&[l0, d, tcol])?;
                    out.push(mlp.forward(tape, &self.store, x)?);
                }
                out
            }
        };
        latents.into_iter().map(|l| self.output_dist(tape, l)).collect()
    }

    fn output_dist(&self, tape: &mut Tape, l: Var) -> Result<OutputDist> {
        let raw = self.output.forward(tape, &self.store, l)?;
        Ok(match self.config.head {
            HeadKind::Poisson => OutputDist::Poisson(PoissonD {
                lambda: positive_rate(tape, raw),
            }),
            HeadKind::Gaussian => {
                let dy = self.config.d_y;
                let mu = tape.slice(raw, 0, dy)?;
                let s = tape.slice(raw, dy, dy)?;
                OutputDist::Gaussian(DiagNormal {
                    mu,
                    sigma: positive_scale(tape, s),
                })
            }
        })
    }

    /// Origin of the process: the earliest present context time.
    pub fn origin(ctx: &ContextSet) -> f64 {
        ctx.present_indices()
            .into_iter()
            .map(|i| ctx.times()[i])
            .fold(f64::INFINITY, f64::min)
    }

    /// Posterior-mean prediction of the output parameters at `query_times`.
    pub fn predict(&self, ctx: &ContextSet, query_times: &[f64]) -> Result<Vec<OutputParams>> {
        let t0 = Self::origin(ctx);
        if let Some(&t) = query_times.iter().find(|&&t| t < t0) {
            return Err(ModelError::Context(format!("query time {t} precedes the process origin {t0}")));
        }
        let mut times = Vec::with_capacity(query_times.len() + 1);
        let prepended = query_times.first() != Some(&t0);
        if prepended {
            times.push(t0);
        }
        times.extend_from_slice(query_times);
        let mut tape = Tape::new();
        let (ql0, qd) = self.encode(&mut tape, ctx)?;
        let l0 = ql0.central_draw(&mut tape);
        let d = qd.central_draw(&mut tape);
        let dists = self.decode(&mut tape, l0, d, &times)?;
        Ok(dists.iter().skip(usize::from(prepended)).map(|o| o.params(&tape)).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SIGMA_MIN;
    use crate::nn::zero_params;
    use crate::tensor::softplus;

    fn small(kind: ModelKind, head: HeadKind) -> ModelConfig {
        ModelConfig {
            d_r: 6,
            d_z: 3,
            d_d: 2,
            hidden: 8,
            ..ModelConfig::new(kind, head, 2)
        }
    }

    fn ctx(order: &[usize]) -> ContextSet {
        let pts = [(0.0, [1.0, 2.0]), (1.0, [0.5, -1.0]), (2.0, [3.0, 0.0]), (3.0, [-2.0, 1.0])];
        let times = order.iter().map(|&i| pts[i].0).collect();
        let rows: Vec<Vec<f64>> = order.iter().map(|&i| pts[i].1.to_vec()).collect();
        ContextSet::single(times, &rows).unwrap()
    }

    fn latent_values(m: &ProcessModel, c: &ContextSet) -> Vec<f64> {
        let mut tape = Tape::new();
        let (l, d) = m.encode(&mut tape, c).unwrap();
        [l.mu(), l.sigma(), d.mu(), d.sigma()]
            .iter()
            .flat_map(|&v| tape.value(v).data().to_vec())
            .collect()
    }

    #[test]
    fn encoder_follows_kind() {
        for kind in ModelKind::ALL {
            let m = ProcessModel::new(small(kind, HeadKind::Gaussian), 0).unwrap();
            assert_eq!(m.encoder().kind(), kind.encoder_kind());
            assert_eq!(m.field_params().is_empty(), kind == ModelKind::Np);
        }
        assert_eq!(ModelKind::parse("SNODEP_GRUODE"), Some(ModelKind::SnodepGruode));
        assert_eq!(ModelKind::parse("lstm"), None);
    }

    #[test]
    fn permutation_response() {
        let np = ProcessModel::new(small(ModelKind::Np, HeadKind::Poisson), 1).unwrap();
        let a = latent_values(&np, &ctx(&[0, 1, 2, 3]));
        let b = latent_values(&np, &ctx(&[2, 0, 3, 1]));
        assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-12));
        // same time grid, observations reassigned
        let sn = ProcessModel::new(small(ModelKind::Snodep, HeadKind::Poisson), 1).unwrap();
        let c = ctx(&[0, 1, 2, 3]);
        let mut rows: Vec<Vec<f64>> = c.values().iter().map(|v| v.data().to_vec()).collect();
        rows.rotate_left(1);
        let shuffled = ContextSet::single(c.times().to_vec(), &rows).unwrap();
        let a = latent_values(&sn, &c);
        let b = latent_values(&sn, &shuffled);
        assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
    }

    #[test]
    fn zero_weights_give_default_latents() {
        let mut m = ProcessModel::new(small(ModelKind::Nodep, HeadKind::Gaussian), 2).unwrap();
        let ids: Vec<_> = m.store().ids().collect();
        zero_params(m.store_mut(), &ids);
        let v = latent_values(&m, &ctx(&[0, 1, 2]));
        let s0 = SIGMA_MIN + softplus(0.0);
        // layout: mu_l0 (3), sigma_l0 (3), mu_d (2), sigma_d (2)
        assert!(v[..3].iter().all(|&x| x == 0.0));
        assert!(v[3..6].iter().all(|&x| (x - s0).abs() < 1e-15));
        assert!(v[6..8].iter().all(|&x| x == 0.0));
        assert!(v[8..].iter().all(|&x| (x - s0).abs() < 1e-15));
    }

    #[test]
    fn zero_field_gives_constant_outputs() {
        let mut m = ProcessModel::new(small(ModelKind::Snodep, HeadKind::Gaussian), 3).unwrap();
        let f = m.field_params();
        zero_params(m.store_mut(), &f);
        let out = m.predict(&ctx(&[0, 1, 2]), &[0.0, 1.0, 2.5, 7.0]).unwrap();
        for o in &out[1..] {
            assert_eq!(o, &out[0]);
        }
    }

    #[test]
    fn origin_only_is_head_of_l0() {
        let m = ProcessModel::new(small(ModelKind::Nodep, HeadKind::Poisson), 4).unwrap();
        let c = ctx(&[0, 1]);
        let mut tape = Tape::new();
        let (l, d) = m.encode(&mut tape, &c).unwrap();
        let l0 = l.central_draw(&mut tape);
        let d0 = d.central_draw(&mut tape);
        let out = m.decode(&mut tape, l0, d0, &[0.0]).unwrap();
        let direct = m.output_dist(&mut tape, l0).unwrap();
        assert_eq!(out[0].params(&tape), direct.params(&tape));
    }

    #[test]
    fn analytic_decay() {
        let mut cfg = small(ModelKind::Nodep, HeadKind::Gaussian);
        cfg.d_y = 1;
        cfg.d_z = 1;
        cfg.d_d = 1;
        cfg.hidden = 1;
        cfg.solver = SolverConfig::new(crate::ode::Method::Rk4, 50).unwrap();
        let mut m = ProcessModel::new(cfg, 0).unwrap();
        let eps = 1e-3;
        let Decoder::Ode { field } = &m.decoder else { unreachable!() };
        let layers = field.params();
        let set = |m: &mut ProcessModel, id: ParamId, vals: Vec<f64>| {
            let t = m.store_mut().get_mut(id);
            t.data_mut().copy_from_slice(&vals);
        };
        // f(l, d, t) = -(1/eps) tanh(tanh(eps * l)) ≈ -l
        set(&mut m, layers[0], vec![eps, 0.0, 0.0]);
        set(&mut m, layers[1], vec![0.0]);
        set(&mut m, layers[2], vec![1.0]);
        set(&mut m, layers[3], vec![0.0]);
        set(&mut m, layers[4], vec![-1.0 / eps]);
        set(&mut m, layers[5], vec![0.0]);
        let [w, b] = m.output_params();
        set(&mut m, w, vec![2.0, 0.0]);
        set(&mut m, b, vec![0.5, 0.0]);
        let mut tape = Tape::new();
        let l0 = tape.constant(Tensor::from_rows(&[vec![1.0]]).unwrap());
        let d = tape.constant(Tensor::from_rows(&[vec![0.3]]).unwrap());
        let out = m.decode(&mut tape, l0, d, &[0.0, 0.5, 1.0]).unwrap();
        let OutputParams::Gaussian { mu, .. } = out[2].params(&tape) else { unreachable!() };
        let want = 2.0 * (-1.0f64).exp() + 0.5;
        assert!((mu.item() - want).abs() < 1e-5, "{} vs {want}", mu.item());
    }

    #[test]
    fn predict_is_deterministic_and_total() {
        for kind in ModelKind::ALL {
            let m = ProcessModel::new(small(kind, HeadKind::Poisson), 5).unwrap();
            let c = ctx(&[0, 1, 2, 3]);
            let q = [1.0, 5.0, 15.0];
            let a = m.predict(&c, &q).unwrap();
            let b = m.predict(&c, &q).unwrap();
            assert_eq!(a, b);
            assert_eq!(a.len(), 3);
            assert!(a.iter().all(|o| o.is_finite() && o.mean().shape() == [1, 2]));
            assert!(m.predict(&c, &[-1.0]).is_err());
        }
    }

    #[test]
    fn path_concatenation() {
        let m = ProcessModel::new(small(ModelKind::SnodepGruode, HeadKind::Gaussian), 6).unwrap();
        let c = ctx(&[0, 1, 2]);
        let abc = m.predict(&c, &[0.0, 1.3, 4.0]).unwrap();
        let ac = m.predict(&c, &[0.0, 4.0]).unwrap();
        let (x, y) = (abc[2].mean(), ac[1].mean());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-9));
    }

    #[test]
    fn lognormal_draws_positive() {
        let mut cfg = small(ModelKind::Snodep, HeadKind::Poisson);
        cfg.latent_family = LatentFamily::LogNormal;
        let m = ProcessModel::new(cfg, 7).unwrap();
        let mut tape = Tape::new();
        let (l, d) = m.encode(&mut tape, &ctx(&[0, 1, 2])).unwrap();
        let l0 = l.central_draw(&mut tape);
        let d0 = d.central_draw(&mut tape);
        assert!(tape.value(l0).data().iter().chain(tape.value(d0).data()).all(|&v| v > 0.0));
    }
}
