//! Context encoders producing the representation `r`, and the feed-forward
//! heads mapping `r` to the latent distributions of `l_0` and `d`.
//!
//! * [`EncoderKind::Mean`]: order-invariant mean of `MLP([t_i, y_i])`.
//! * [`EncoderKind::Lstm`]: LSTM run from the last context point back to the
//!   first; `r` is the hidden state after consuming the earliest point.
//! * [`EncoderKind::GruOde`]: backward GRU whose hidden state also follows
//!   `dh/dt = g(h)` between consecutive present observation times.
//!
//! Masked points are skipped entirely by every encoder.

use std::cmp::Ordering;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::distributions::{positive_scale, Latent, LatentFamily};
use crate::error::{ModelError, Result};
use crate::nn::{Linear, Mlp};
use crate::ode::{integrate, SolverConfig};
use crate::tensor::{ParamId, ParamStore, Tape, Tensor, Var};

/// Observed `(t_i, y_i)` points for a batch of trajectories sharing one time
/// grid and one presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextSet {
    times: Vec<f64>,
    /// one `[B, d_y]` tensor per time
    values: Vec<Tensor>,
    present: Vec<bool>,
}

impl ContextSet {
    pub fn new(times: Vec<f64>, values: Vec<Tensor>, present: Vec<bool>) -> Result<Self> {
        if times.is_empty() {
            return Err(ModelError::Context("empty context".into()));
        }
        if times.len() != values.len() || times.len() != present.len() {
            return Err(ModelError::Context(format!(
                "{} times, {} value blocks, {} mask entries",
                times.len(),
                values.len(),
                present.len()
            )));
        }
        let shape = values[0].shape().to_vec();
        if shape.len() != 2 {
            return Err(ModelError::Context(format!("values must be [B, d_y], got {shape:?}")));
        }
        if let Some(i) = values.iter().position(|v| v.shape() != shape.as_slice()) {
            return Err(ModelError::Context(format!(
                "value block {i} has shape {:?}, expected {shape:?}",
                values[i].shape()
            )));
        }
        if !present.iter().any(|&p| p) {
            return Err(ModelError::Context("no present context points".into()));
        }
        if let Some(i) = times.iter().position(|t| !t.is_finite()) {
            return Err(ModelError::Context(format!("time {i} is not finite")));
        }
        Ok(Self {
            times,
            values,
            present,
        })
    }

    /// One trajectory (`B = 1`), every point present.
    pub fn single(times: Vec<f64>, rows: &[Vec<f64>]) -> Result<Self> {
        let values = rows
            .iter()
            .map(|r| Tensor::new(vec![1, r.len()], r.clone()))
            .collect::<std::result::Result<Vec<_>, _>>()?;
        let n = times.len();
        Self::new(times, values, vec![true; n])
    }

    pub fn with_mask(mut self, present: Vec<bool>) -> Result<Self> {
        self.present = present;
        Self::new(self.times, self.values, self.present)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn present(&self) -> &[bool] {
        &self.present
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn batch_size(&self) -> usize {
        self.values[0].shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.values[0].shape()[1]
    }

    pub fn present_indices(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.present[i]).collect()
    }

    /// First `n` points.
    pub fn prefix(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        Self::new(
            self.times[..n].to_vec(),
            self.values[..n].to_vec(),
            self.present[..n].to_vec(),
        )
    }

    fn require_ascending(&self) -> Result<()> {
        let idx = self.present_indices();
        for w in idx.windows(2) {
            if !(self.times[w[1]] > self.times[w[0]]) {
                return Err(ModelError::Context(format!(
                    "present times must be strictly ascending ({} then {})",
                    self.times[w[0]], self.times[w[1]]
                )));
            }
        }
        Ok(())
    }

    /// Present indices in a canonical order (time, then values), so that
    /// summing in this order is independent of how points were listed.
    fn canonical_order(&self) -> Vec<usize> {
        let mut idx = self.present_indices();
        idx.sort_by(|&a, &b| {
            self.times[a].total_cmp(&self.times[b]).then_with(|| {
                self.values[a]
                    .data()
                    .iter()
                    .zip(self.values[b].data())
                    .map(|(x, y)| x.total_cmp(y))
                    .find(|o| *o != Ordering::Equal)
                    .unwrap_or(Ordering::Equal)
            })
        });
        idx
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EncoderKind {
    Mean,
    Lstm,
    #[serde(alias = "gru_ode", alias = "gru-ode")]
    GruOde,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EncoderConfig {
    pub kind: EncoderKind,
    pub d_y: usize,
    pub d_r: usize,
    /// recurrent encoders: feed `[t_i, y_i]` instead of `y_i`
    pub append_time: bool,
}

#[derive(Clone, Debug)]
pub enum Encoder {
    Mean {
        mlp: Mlp,
    },
    Lstm {
        /// `[x, h] -> [i, f, g, o]`
        cell: Linear,
        d_r: usize,
        append_time: bool,
    },
    GruOde {
        /// `[x, h] -> [z, r]`
        gates: Linear,
        /// `[x, r * h] -> candidate`
        candidate: Linear,
        /// hidden-state vector field `g(h)`
        field: Mlp,
        d_r: usize,
        append_time: bool,
    },
}

impl Encoder {
    pub fn new(cfg: &EncoderConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let d_in = cfg.d_y + usize::from(cfg.append_time);
        let d_r = cfg.d_r;
        Ok(match cfg.kind {
            EncoderKind::Mean => Encoder::Mean {
                mlp: Mlp::new(store, "encoder.mean", &[cfg.d_y + 1, d_r, d_r], rng)?,
            },
            EncoderKind::Lstm => Encoder::Lstm {
                cell: Linear::new(store, "encoder.lstm", d_in + d_r, 4 * d_r, rng)?,
                d_r,
                append_time: cfg.append_time,
            },
            EncoderKind::GruOde => Encoder::GruOde {
                gates: Linear::new(store, "encoder.gru.gates", d_in + d_r, 2 * d_r, rng)?,
                candidate: Linear::new(store, "encoder.gru.candidate", d_in + d_r, d_r, rng)?,
                field: Mlp::new(store, "encoder.gru.field", &[d_r, d_r, d_r], rng)?,
                d_r,
                append_time: cfg.append_time,
            },
        })
    }

    pub fn kind(&self) -> EncoderKind {
        match self {
            Encoder::Mean { .. } => EncoderKind::Mean,
            Encoder::Lstm { .. } => EncoderKind::Lstm,
            Encoder::GruOde { .. } => EncoderKind::GruOde,
        }
    }

    pub fn params(&self) -> Vec<ParamId> {
        match self {
            Encoder::Mean { mlp } => mlp.params(),
            Encoder::Lstm { cell, .. } => cell.params().to_vec(),
            Encoder::GruOde {
                gates,
                candidate,
                field,
                ..
            } => {
                let mut p = gates.params().to_vec();
                p.extend(candidate.params());
                p.extend(field.params());
                p
            }
        }
    }

    /// Parameters of the GRU-ODE hidden-state field (empty for other kinds).
    pub fn field_params(&self) -> Vec<ParamId> {
        match self {
            Encoder::GruOde { field, .. } => field.params(),
            _ => Vec::new(),
        }
    }

    /// Representation `r`, shape `[B, d_r]`.
    pub fn encode(&self, tape: &mut Tape, store: &ParamStore, ctx: &ContextSet, solver: &SolverConfig) -> Result<Var> {
        match self {
            Encoder::Mean { mlp } => mean_encode(mlp, tape, store, ctx),
            Encoder::Lstm {
                cell,
                d_r,
                append_time,
            } => lstm_encode_backward(cell, *d_r, *append_time, tape, store, ctx),
            Encoder::GruOde {
                gates,
                candidate,
                field,
                d_r,
                append_time,
            } => {
                let gru = Gru {
                    gates,
                    candidate,
                    d_r: *d_r,
                    append_time: *append_time,
                };
                gru_ode_encode(&gru, Some(field), tape, store, ctx, solver)
            }
        }
    }

    /// Backward GRU over the present points with no hidden-state dynamics.
    /// Only defined for the GRU-ODE encoder.
    pub fn backward_gru(&self, tape: &mut Tape, store: &ParamStore, ctx: &ContextSet) -> Result<Var> {
        match self {
            Encoder::GruOde {
                gates,
                candidate,
                d_r,
                append_time,
                ..
            } => {
                let gru = Gru {
                    gates,
                    candidate,
                    d_r: *d_r,
                    append_time: *append_time,
                };
                gru_ode_encode(&gru, None, tape, store, ctx, &SolverConfig::default())
            }
            _ => Err(ModelError::config("model.encoder", "backward_gru needs the gruode encoder")),
        }
    }
}

fn time_column(tape: &mut Tape, batch: usize, t: f64) -> Var {
    tape.constant(Tensor::full(&[batch, 1], t))
}

fn step_input(tape: &mut Tape, ctx: &ContextSet, i: usize, append_time: bool) -> Result<Var> {
    let y = tape.constant(ctx.values[i].clone());
    if append_time {
        let t = time_column(tape, ctx.batch_size(), ctx.times[i]);
        Ok(tape.concat(&[t, y])?)
    } else {
        Ok(y)
    }
}

fn mean_encode(mlp: &Mlp, tape: &mut Tape, store: &ParamStore, ctx: &ContextSet) -> Result<Var> {
    let order = ctx.canonical_order();
    let mut acc: Option<Var> = None;
    for &i in &order {
        let x = step_input(tape, ctx, i, true)?;
        let h = mlp.forward(tape, store, x)?;
        acc = Some(match acc {
            None => h,
            Some(a) => tape.add(a, h)?,
        });
    }
    let sum = acc.ok_or_else(|| ModelError::Context("empty context".into()))?;
    Ok(tape.scale(sum, 1.0 / order.len() as f64))
}

fn lstm_encode_backward(
    cell: &Linear,
    d_r: usize,
    append_time: bool,
    tape: &mut Tape,
    store: &ParamStore,
    ctx: &ContextSet,
) -> Result<Var> {
    ctx.require_ascending()?;
    let b = ctx.batch_size();
    let mut h = tape.constant(Tensor::zeros(&[b, d_r]));
    let mut c = tape.constant(Tensor::zeros(&[b, d_r]));
    for i in ctx.present_indices().into_iter().rev() {
        let x = step_input(tape, ctx, i, append_time)?;
        let xh = tape.concat(&[x, h])?;
        let g = cell.forward(tape, store, xh)?;
        let ig = tape.slice(g, 0, d_r)?;
        let fg = tape.slice(g, d_r, d_r)?;
        let gg = tape.slice(g, 2 * d_r, d_r)?;
        let og = tape.slice(g, 3 * d_r, d_r)?;
        let ig = tape.sigmoid(ig);
        let fg = tape.sigmoid(fg);
        let gg = tape.tanh(gg);
        let og = tape.sigmoid(og);
        let keep = tape.mul(fg, c)?;
        let write = tape.mul(ig, gg)?;
        c = tape.add(keep, write)?;
        let tc = tape.tanh(c);
        h = tape.mul(og, tc)?;
    }
    Ok(h)
}

struct Gru<'a> {
    gates: &'a Linear,
    candidate: &'a Linear,
    d_r: usize,
    append_time: bool,
}

impl Gru<'_> {
    /// `z = σ(W_z[x,h]+b_z)`, `r = σ(W_r[x,h]+b_r)`,
    /// `h~ = tanh(W_h[x, r⊙h]+b_h)`, `h' = (1−z)⊙h + z⊙h~`.
    fn cell(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var> {
        let xh = tape.concat(&[x, h])?;
        let zr = self.gates.forward(tape, store, xh)?;
        let zr = tape.sigmoid(zr);
        let z = tape.slice(zr, 0, self.d_r)?;
        let r = tape.slice(zr, self.d_r, self.d_r)?;
        let rh = tape.mul(r, h)?;
        let xrh = tape.concat(&[x, rh])?;
        let cand = self.candidate.forward(tape, store, xrh)?;
        let cand = tape.tanh(cand);
        // h + z * (cand - h)
        let delta = tape.sub(cand, h)?;
        let step = tape.mul(z, delta)?;
        Ok(tape.add(h, step)?)
    }
}

fn gru_ode_encode(
    gru: &Gru<'_>,
    field: Option<&Mlp>,
    tape: &mut Tape,
    store: &ParamStore,
    ctx: &ContextSet,
    solver: &SolverConfig,
) -> Result<Var> {
    let present = ctx.present_indices();
    if field.is_some() && present.len() < 2 {
        return Err(ModelError::Context(format!(
            "the GRU-ODE encoder needs at least 2 present points, got {}",
            present.len()
        )));
    }
    ctx.require_ascending()?;
    let mut h = tape.constant(Tensor::zeros(&[ctx.batch_size(), gru.d_r]));
    let mut later: Option<f64> = None;
    for (step, &i) in present.iter().rev().enumerate() {
        if let (Some(field), Some(t_next)) = (field, later) {
            let g = |tape: &mut Tape, _t: f64, s: Var, _c: Option<Var>| -> crate::ode::Result<Var> {
                Ok(field.forward(tape, store, s)?)
            };
            h = integrate(&g, tape, h, t_next, ctx.times[i], None, solver)?;
        }
        let x = step_input(tape, ctx, i, gru.append_time)?;
        h = gru.cell(tape, store, x, h)?;
        if !tape.value(h).is_finite() {
            return Err(ModelError::Ode(crate::ode::OdeError::NonFinite {
                step,
                time: ctx.times[i],
            }));
        }
        later = Some(ctx.times[i]);
    }
    Ok(h)
}

/// Feed-forward map `r -> (mu_L0, raw_sigma_L0, mu_D, raw_sigma_D)`.
#[derive(Clone, Debug)]
pub struct LatentHeads {
    pub linear: Linear,
    pub d_z: usize,
    pub d_d: usize,
    pub family: LatentFamily,
}

impl LatentHeads {
    pub fn new(
        store: &mut ParamStore,
        d_r: usize,
        d_z: usize,
        d_d: usize,
        family: LatentFamily,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        Ok(Self {
            linear: Linear::new(store, "latent_heads", d_r, 2 * d_z + 2 * d_d, rng)?,
            d_z,
            d_d,
            family,
        })
    }

    /// Distributions of `l_0` and `d` given `r`.
    pub fn latent_params(&self, tape: &mut Tape, store: &ParamStore, r: Var) -> Result<(Latent, Latent)> {
        let out = self.linear.forward(tape, store, r)?;
        let (z, d) = (self.d_z, self.d_d);
        let mu_l0 = tape.slice(out, 0, z)?;
        let raw_l0 = tape.slice(out, z, z)?;
        let mu_d = tape.slice(out, 2 * z, d)?;
        let raw_d = tape.slice(out, 2 * z + d, d)?;
        let sigma_l0 = positive_scale(tape, raw_l0);
        let sigma_d = positive_scale(tape, raw_d);
        Ok((
            Latent::new(self.family, mu_l0, sigma_l0),
            Latent::new(self.family, mu_d, sigma_d),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::SIGMA_MIN;
    use crate::nn::zero_params;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn encoder(kind: EncoderKind, d_y: usize, seed: u64) -> (Encoder, ParamStore) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = EncoderConfig {
            kind,
            d_y,
            d_r: 6,
            append_time: false,
        };
        let enc = Encoder::new(&cfg, &mut store, &mut rng).unwrap();
        (enc, store)
    }

    fn random_points(rng: &mut ChaCha8Rng, n: usize, d: usize) -> (Vec<f64>, Vec<Vec<f64>>) {
        let times = (0..n).map(|i| i as f64 * 0.7 + 0.1).collect();
        let rows = (0..n).map(|_| (0..d).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        (times, rows)
    }

    fn encode(enc: &Encoder, store: &ParamStore, ctx: &ContextSet) -> Vec<f64> {
        let mut tape = Tape::new();
        let r = enc.encode(&mut tape, store, ctx, &SolverConfig::default()).unwrap();
        tape.value(r).data().to_vec()
    }

    #[test]
    fn mean_single_point_and_duplicate() {
        let (enc, store) = encoder(EncoderKind::Mean, 2, 1);
        let one = ContextSet::single(vec![0.5], &[vec![1.0, -1.0]]).unwrap();
        let two = ContextSet::single(vec![0.5, 0.5], &[vec![1.0, -1.0], vec![1.0, -1.0]]).unwrap();
        let r1 = encode(&enc, &store, &one);
        let r2 = encode(&enc, &store, &two);
        for (a, b) in r1.iter().zip(&r2) {
            assert!((a - b).abs() < 1e-15);
        }
        // direct MLP([t, y])
        let Encoder::Mean { mlp } = &enc else { unreachable!() };
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_rows(&[vec![0.5, 1.0, -1.0]]).unwrap());
        let direct = mlp.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(direct).data(), r1.as_slice());
    }

    #[test]
    fn mean_is_permutation_invariant() {
        let (enc, store) = encoder(EncoderKind::Mean, 3, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..10 {
            let (times, rows) = random_points(&mut rng, 5, 3);
            let base = ContextSet::single(times.clone(), &rows).unwrap();
            let mut perm: Vec<usize> = (0..5).collect();
            perm.shuffle(&mut rng);
            let pt: Vec<f64> = perm.iter().map(|&i| times[i]).collect();
            let pr: Vec<Vec<f64>> = perm.iter().map(|&i| rows[i].clone()).collect();
            let shuffled = ContextSet::single(pt, &pr).unwrap();
            let a = encode(&enc, &store, &base);
            let b = encode(&enc, &store, &shuffled);
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn lstm_zero_weights_give_zero() {
        let (enc, mut store) = encoder(EncoderKind::Lstm, 2, 3);
        zero_params(&mut store, &enc.params());
        let ctx = ContextSet::single(vec![0.0, 1.0, 2.0], &[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        assert!(encode(&enc, &store, &ctx).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn lstm_single_point_is_one_cell() {
        let (enc, store) = encoder(EncoderKind::Lstm, 2, 4);
        let ctx = ContextSet::single(vec![0.0], &[vec![0.3, -0.8]]).unwrap();
        let r = encode(&enc, &store, &ctx);
        // hand-rolled cell on zero state: c = i*g, h = o*tanh(c)
        let Encoder::Lstm { cell, d_r, .. } = &enc else { unreachable!() };
        let w = store.get(cell.weight);
        let b = store.get(cell.bias);
        let x = [0.3, -0.8];
        let pre: Vec<f64> = (0..4 * d_r)
            .map(|j| b.data()[j] + x[0] * w.at(0, j) + x[1] * w.at(1, j))
            .collect();
        let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
        for k in 0..*d_r {
            let c = sig(pre[k]) * pre[2 * d_r + k].tanh();
            let h = sig(pre[3 * d_r + k]) * c.tanh();
            assert!((h - r[k]).abs() < 1e-14);
        }
    }

    #[test]
    fn lstm_is_order_sensitive_and_skips_masked() {
        let (enc, store) = encoder(EncoderKind::Lstm, 2, 5);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..5 {
            let (times, rows) = random_points(&mut rng, 4, 2);
            let fwd = ContextSet::single(times.clone(), &rows).unwrap();
            let rev_rows: Vec<Vec<f64>> = rows.iter().rev().cloned().collect();
            let rev = ContextSet::single(times, &rev_rows).unwrap();
            let a = encode(&enc, &store, &fwd);
            let b = encode(&enc, &store, &rev);
            assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-9));
        }
        // masked points are skipped, not fed as zeros
        let masked = ContextSet::single(vec![0.0, 1.0, 2.0], &[vec![1.0, 1.0], vec![2.0, 2.0], vec![3.0, -1.0]])
            .unwrap()
            .with_mask(vec![true, false, true])
            .unwrap();
        let kept = ContextSet::single(vec![0.0, 2.0], &[vec![1.0, 1.0], vec![3.0, -1.0]]).unwrap();
        assert_eq!(encode(&enc, &store, &masked), encode(&enc, &store, &kept));
    }

    #[test]
    fn gru_ode_zero_field_is_plain_gru() {
        let (enc, mut store) = encoder(EncoderKind::GruOde, 2, 7);
        zero_params(&mut store, &enc.field_params());
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (times, rows) = random_points(&mut rng, 5, 2);
        let ctx = ContextSet::single(times.clone(), &rows).unwrap();
        let a = encode(&enc, &store, &ctx);
        let mut tape = Tape::new();
        let b = enc.backward_gru(&mut tape, &store, &ctx).unwrap();
        for (x, y) in a.iter().zip(tape.value(b).data()) {
            assert!((x - y).abs() < 1e-10);
        }
        // rescaled times: time only enters through the integral
        let scaled = ContextSet::single(times.iter().map(|t| 3.0 * t).collect(), &rows).unwrap();
        assert_eq!(encode(&enc, &store, &scaled), a);
    }

    #[test]
    fn gru_ode_skips_masked_points() {
        let (enc, store) = encoder(EncoderKind::GruOde, 1, 10);
        let times = vec![0.0, 0.5, 1.5, 2.0, 3.0];
        let rows: Vec<Vec<f64>> = vec![vec![0.2], vec![-1.0], vec![0.7], vec![1.1], vec![-0.4]];
        let mask = vec![true, false, true, false, true];
        let ctx = ContextSet::single(times.clone(), &rows).unwrap().with_mask(mask).unwrap();
        let r = encode(&enc, &store, &ctx);

        // manual unroll over the three present points with two segments
        let Encoder::GruOde {
            gates,
            candidate,
            field,
            d_r,
            append_time,
        } = &enc
        else {
            unreachable!()
        };
        let gru = Gru {
            gates,
            candidate,
            d_r: *d_r,
            append_time: *append_time,
        };
        let solver = SolverConfig::default();
        let mut tape = Tape::new();
        let g = |tape: &mut Tape, _t: f64, s: Var, _c: Option<Var>| -> crate::ode::Result<Var> {
            Ok(field.forward(tape, &store, s)?)
        };
        let y = |tape: &mut Tape, v: f64| tape.constant(Tensor::from_rows(&[vec![v]]).unwrap());
        let h0 = tape.constant(Tensor::zeros(&[1, *d_r]));
        let x4 = y(&mut tape, -0.4);
        let h = gru.cell(&mut tape, &store, x4, h0).unwrap();
        let h = integrate(&g, &mut tape, h, 3.0, 1.5, None, &solver).unwrap();
        let x2 = y(&mut tape, 0.7);
        let h = gru.cell(&mut tape, &store, x2, h).unwrap();
        let h = integrate(&g, &mut tape, h, 1.5, 0.0, None, &solver).unwrap();
        let x0 = y(&mut tape, 0.2);
        let h = gru.cell(&mut tape, &store, x0, h).unwrap();
        assert_eq!(tape.value(h).data(), r.as_slice());

        let lonely = ContextSet::single(vec![0.0, 1.0], &[vec![0.0], vec![1.0]])
            .unwrap()
            .with_mask(vec![true, false])
            .unwrap();
        let mut tape = Tape::new();
        assert!(enc.encode(&mut tape, &store, &lonely, &solver).is_err());
    }

    #[test]
    fn encoders_finite_on_large_inputs() {
        for kind in [EncoderKind::Mean, EncoderKind::Lstm, EncoderKind::GruOde] {
            let (enc, store) = encoder(kind, 2, 12);
            let ctx = ContextSet::single(
                vec![0.0, 1.0, 2.0, 3.0],
                &[vec![1e3, -1e3], vec![-1e3, 1e3], vec![1e3, 1e3], vec![-1e3, -1e3]],
            )
            .unwrap();
            let a = encode(&enc, &store, &ctx);
            assert!(a.iter().all(|v| v.is_finite()));
            assert_eq!(a, encode(&enc, &store, &ctx));
        }
    }

    #[test]
    fn zero_heads_give_floor_sigma() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let heads = LatentHeads::new(&mut store, 4, 3, 2, LatentFamily::LogNormal, &mut rng).unwrap();
        zero_params(&mut store, &heads.linear.params());
        let mut tape = Tape::new();
        let r = tape.constant(Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]).unwrap());
        let (l0, d) = heads.latent_params(&mut tape, &store, r).unwrap();
        for lat in [l0, d] {
            assert!(tape.value(lat.mu()).data().iter().all(|&v| v == 0.0));
            let floor = SIGMA_MIN + std::f64::consts::LN_2;
            assert!(tape.value(lat.sigma()).data().iter().all(|&v| (v - floor).abs() < 1e-15));
        }
        let noise = tape.constant(Tensor::from_rows(&[vec![-3.0, 0.5, 2.0]]).unwrap());
        let sample = l0.reparam_sample(&mut tape, noise).unwrap();
        assert!(tape.value(sample).data().iter().all(|&v| v > 0.0));
    }

    #[test]
    fn head_mu_gradient_matches_fd() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let heads = LatentHeads::new(&mut store, 3, 2, 2, LatentFamily::Normal, &mut rng).unwrap();
        let r = Tensor::from_rows(&[vec![0.4, -1.2, 0.9]]).unwrap();
        let objective = |store: &ParamStore| -> (f64, Option<crate::tensor::ParamGrads>) {
            let mut tape = Tape::new();
            let rv = tape.constant(r.clone());
            let (l0, _) = heads.latent_params(&mut tape, store, rv).unwrap();
            let sq = tape.square(l0.mu());
            let loss = tape.sum(sq);
            let g = tape.backward(loss).unwrap().params(store);
            (tape.value(loss).item(), Some(g))
        };
        let (_, g) = objective(&store);
        let g = g.unwrap();
        let w = heads.linear.weight;
        for j in 0..store.get(w).len() {
            let h = 1e-5;
            let mut plus = store.clone();
            plus.get_mut(w).data_mut()[j] += h;
            let mut minus = store.clone();
            minus.get_mut(w).data_mut()[j] -= h;
            let fd = (objective(&plus).0 - objective(&minus).0) / (2.0 * h);
            let an = g.get(w).data()[j];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            assert!((fd - an).abs() / denom < 1e-4 || (fd - an).abs() < 1e-9, "{j}: {fd} vs {an}");
        }
    }
}
