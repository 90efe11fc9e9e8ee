//! Lightweight single-cell flux estimation: one small network per metabolic
//! module maps that module's genes to a positive flux, trained per timestep to
//! balance production and consumption of every metabolite.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{DataError, DataKind, FluxEstimator, PathwayDef, Result, TimeSeriesDataset};
use crate::nn::Mlp;
use crate::tensor::{Adam, AdamConfig, ParamStore, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScfeaConfig {
    pub steps: usize,
    pub lr: f64,
    pub hidden: usize,
    /// weight of the flux-to-activity anchor
    pub lambda_nt: f64,
    /// weight `W` of each hop-2 neighbour's imbalance
    pub hop_weight: f64,
}

impl Default for ScfeaConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            lr: 1e-2,
            hidden: 16,
            lambda_nt: 0.1,
            hop_weight: 1.0,
        }
    }
}

impl ScfeaConfig {
    pub fn validate(&self) -> std::result::Result<(), String> {
        if self.hidden == 0 {
            return Err("scfea.hidden must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(format!("scfea.lr must be a finite non-negative number, got {}", self.lr));
        }
        if !(self.lambda_nt >= 0.0) || !(self.hop_weight >= 0.0) {
            return Err("scfea.lambda_nt and scfea.hop_weight must be non-negative".into());
        }
        Ok(())
    }
}

/// For each metabolite, the other metabolites attached to one of its modules
/// (two steps away in the module/metabolite graph). Sorted ascending.
pub fn hop2_neighbors(p: &PathwayDef) -> Vec<Vec<usize>> {
    let v = p.n_metabolites();
    let mut touching: Vec<Vec<usize>> = vec![Vec::new(); p.n_modules()];
    for (k, c) in p.metabolites.iter().enumerate() {
        for m in c.in_modules.iter().chain(&c.out_modules) {
            touching[p.module_index(m).expect("validated")].push(k);
        }
    }
    let mut adj = vec![vec![false; v]; v];
    for ks in &touching {
        for &a in ks {
            for &b in ks {
                if a != b {
                    adj[a][b] = true;
                }
            }
        }
    }
    adj.iter()
        .map(|row| row.iter().enumerate().filter(|(_, &x)| x).map(|(j, _)| j).collect())
        .collect()
}

/// Per-metabolite weight once hop-2 terms are collected: `1 + W·|hop2(k)|`.
pub fn metabolite_weights(hood: &[Vec<usize>], hop_weight: f64) -> Vec<f64> {
    hood.iter().map(|h| 1.0 + hop_weight * h.len() as f64).collect()
}

fn stoich_tensor(p: &PathwayDef) -> Tensor {
    Tensor::from_rows(&p.stoichiometry()).expect("validated pathway is non-empty")
}

/// `[cells, u]` fluxes to `[cells, v]` balances: in-sum minus out-sum.
pub fn balance_from_flux(flux: &Tensor, p: &PathwayDef) -> Result<Tensor> {
    let u = p.n_modules();
    if flux.shape().len() != 2 || flux.cols() != u {
        return Err(DataError::Invalid(format!("flux shape {:?} does not match {u} modules", flux.shape())));
    }
    let mut tape = Tape::new();
    let f = tape.constant(flux.clone());
    let s = tape.constant(stoich_tensor(p));
    let b = tape.matmul(f, s).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(tape.value(b).clone())
}

/// Mean of each module's gene columns per cell.
pub fn module_activity(x: &Tensor, columns: &[Vec<usize>]) -> Tensor {
    let n = x.rows();
    let data = (0..n)
        .flat_map(|r| columns.iter().map(move |c| c.iter().map(|&g| x.at(r, g)).sum::<f64>() / c.len() as f64))
        .collect();
    Tensor::new(vec![n, columns.len()], data).expect("shape bookkeeping")
}

/// Builds the loss on the tape from `flux [cells, u]` and `activity [cells, u]`.
pub fn balance_loss_var(
    tape: &mut Tape,
    flux: Var,
    activity: Var,
    p: &PathwayDef,
    hood: &[Vec<usize>],
    cfg: &ScfeaConfig,
) -> crate::tensor::Result<Var> {
    let s = tape.constant(stoich_tensor(p));
    let imbalance = tape.matmul(flux, s)?;
    let sq = tape.square(imbalance);
    let w = tape.constant(Tensor::vector(metabolite_weights(hood, cfg.hop_weight)));
    let weighted = tape.mul(sq, w)?;
    let balance = tape.sum(weighted);
    if cfg.lambda_nt == 0.0 {
        return Ok(balance);
    }
    let gap = tape.sub(flux, activity)?;
    let gap = tape.square(gap);
    let anchor = tape.sum(gap);
    let anchor = tape.scale(anchor, cfg.lambda_nt);
    tape.add(balance, anchor)
}

/// Plain evaluation of the balance loss for given fluxes.
pub fn balance_loss(flux: &Tensor, activity: &Tensor, p: &PathwayDef, hood: &[Vec<usize>], cfg: &ScfeaConfig) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(flux.clone());
    let a = tape.constant(activity.clone());
    let l = balance_loss_var(&mut tape, f, a, p, hood, cfg).map_err(|e| DataError::Invalid(e.to_string()))?;
    Ok(tape.value(l).item())
}

#[derive(Clone, Debug)]
pub struct TimestepFit {
    /// `[cells, u]`
    pub flux: Tensor,
    /// `[cells, v]`
    pub balance: Tensor,
    /// loss before each Adam step, then the final loss
    pub losses: Vec<f64>,
}

fn gather(x: &Tensor, cols: &[usize]) -> Tensor {
    let n = x.rows();
    let data = (0..n).flat_map(|r| cols.iter().map(move |&g| x.at(r, g))).collect();
    Tensor::new(vec![n, cols.len()], data).expect("shape bookkeeping")
}

/// Trains the module networks on one expression matrix `x [cells, genes]`
/// (already transformed) and returns the fitted fluxes.
pub fn fit_timestep(
    x: &Tensor,
    p: &PathwayDef,
    columns: &[Vec<usize>],
    cfg: &ScfeaConfig,
    seed: u64,
) -> std::result::Result<TimestepFit, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let nets: Vec<Mlp> = columns
        .iter()
        .enumerate()
        .map(|(m, c)| Mlp::new(&mut store, &format!("module{m}"), &[c.len(), cfg.hidden, 1], &mut rng))
        .collect::<crate::tensor::Result<_>>()
        .map_err(|e| e.to_string())?;
    let inputs: Vec<Tensor> = columns.iter().map(|c| gather(x, c)).collect();
    let activity = module_activity(x, columns);
    let hood = hop2_neighbors(p);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        &store,
    );
    let forward = |tape: &mut Tape, store: &ParamStore| -> crate::tensor::Result<(Var, Var)> {
        let mut outs = Vec::with_capacity(nets.len());
        for (net, inp) in nets.iter().zip(&inputs) {
            let xi = tape.constant(inp.clone());
            let h = net.forward(tape, store, xi)?;
            outs.push(tape.softplus(h));
        }
        let flux = tape.concat(&outs)?;
        let a = tape.constant(activity.clone());
        let loss = balance_loss_var(tape, flux, a, p, &hood, cfg)?;
        Ok((flux, loss))
    };
    let mut losses = Vec::with_capacity(cfg.steps + 1);
    for step in 0..cfg.steps {
        let mut tape = Tape::new();
        let (_, loss) = forward(&mut tape, &store).map_err(|e| e.to_string())?;
        let l = tape.value(loss).item();
        if !l.is_finite() {
            return Err(format!("non-finite balance loss at step {step}"));
        }
        losses.push(l);
        let grads = tape.backward(loss).map_err(|e| e.to_string())?.params(&store);
        adam.step(&mut store, &grads).map_err(|e| e.to_string())?;
    }
    let mut tape = Tape::new();
    let (flux, loss) = forward(&mut tape, &store).map_err(|e| e.to_string())?;
    let l = tape.value(loss).item();
    if !l.is_finite() {
        return Err("non-finite balance loss after training".into());
    }
    losses.push(l);
    let flux = tape.value(flux).clone();
    let balance = balance_from_flux(&flux, p).map_err(|e| e.to_string())?;
    Ok(TimestepFit { flux, balance, losses })
}

/// Estimates flux and balance datasets, training each timestep independently.
/// Raw counts go through `log1p` first; normalised data is used as is.
pub fn estimate_flux_balance(
    ds: &TimeSeriesDataset,
    p: &PathwayDef,
    cfg: &ScfeaConfig,
    seed: u64,
) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
    p.validate()?;
    cfg.validate().map_err(DataError::Invalid)?;
    if ds.kind() != DataKind::Expression {
        return Err(DataError::Invalid("flux estimation needs an expression dataset".into()));
    }
    let columns = p.module_columns(ds.feature_names())?;
    let counts = ds.is_count_data();
    let fits: Vec<Result<TimestepFit>> = (0..ds.len())
        .into_par_iter()
        .map(|t| {
            let x = if counts {
                ds.samples(t).map(f64::ln_1p)
            } else {
                ds.samples(t).clone()
            };
            fit_timestep(&x, p, &columns, cfg, seed.wrapping_add(t as u64))
                .map_err(|detail| DataError::Estimator { timestep: t, detail })
        })
        .collect();
    let mut flux = Vec::with_capacity(fits.len());
    let mut balance = Vec::with_capacity(fits.len());
    for f in fits {
        let f = f?;
        flux.push(f.flux);
        balance.push(f.balance);
    }
    let module_names = p.modules.iter().map(|m| m.name.clone()).collect();
    let metabolite_names = p.metabolites.iter().map(|m| m.name.clone()).collect();
    Ok((
        TimeSeriesDataset::new(DataKind::Flux, ds.times().to_vec(), flux, module_names)?,
        TimeSeriesDataset::new(DataKind::Balance, ds.times().to_vec(), balance, metabolite_names)?,
    ))
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ScfeaEstimator {
    pub config: ScfeaConfig,
}

impl FluxEstimator for ScfeaEstimator {
    fn estimate(
        &self,
        expression: &TimeSeriesDataset,
        pathway: &PathwayDef,
        seed: u64,
    ) -> Result<(TimeSeriesDataset, TimeSeriesDataset)> {
        estimate_flux_balance(expression, pathway, &self.config, seed)
    }
}

/// Pathway `m1 → A → m2 → B → m3` over genes `g0..g5`, two genes per module.
pub fn toy_chain() -> PathwayDef {
    PathwayDef::from_json(
        r#"{
        "genes": ["g0", "g1", "g2", "g3", "g4", "g5"],
        "modules": [
            {"name": "m1", "genes": ["g0", "g1"]},
            {"name": "m2", "genes": ["g2", "g3"]},
            {"name": "m3", "genes": ["g4", "g5"]}
        ],
        "metabolites": [
            {"name": "A", "in_modules": ["m1"], "out_modules": ["m2"]},
            {"name": "B", "in_modules": ["m2"], "out_modules": ["m3"]}
        ]
    }"#,
    )
    .expect("toy chain is valid")
}
