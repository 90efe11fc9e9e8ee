//! Negative-ELBO objective, pseudo-trajectory batching with irregular masks,
//! the training loop and test-MSE evaluation.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::TimeSeriesDataset;
use crate::encoders::ContextSet;
use crate::error::{ModelError, Result};
use crate::model::{HeadKind, ModelConfig, ProcessModel};
use crate::tensor::{Adam, AdamConfig, LgammaTable, Tape, Tensor, Var};

/// `B` pseudo-trajectories on a shared time grid, with one presence mask.
#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryBatch {
    times: Vec<f64>,
    /// one `[B, d_y]` block per time
    values: Vec<Tensor>,
    context_len: usize,
    target_len: usize,
    present: Vec<bool>,
}

impl TrajectoryBatch {
    pub fn new(
        times: Vec<f64>,
        values: Vec<Tensor>,
        context_len: usize,
        target_len: usize,
        present: Vec<bool>,
    ) -> Result<Self> {
        if context_len == 0 || context_len >= target_len || target_len > times.len() {
            return Err(ModelError::Context(format!(
                "need 0 < C < T <= {}; got C = {context_len}, T = {target_len}",
                times.len()
            )));
        }
        if present.len() != times.len() {
            return Err(ModelError::Context("mask length differs from the time grid".into()));
        }
        if !present[0] {
            return Err(ModelError::Context("the first context point must be present".into()));
        }
        // validates shapes and ordering
        ContextSet::new(times.clone(), values.clone(), present.clone())?;
        Ok(Self {
            times,
            values,
            context_len,
            target_len,
            present,
        })
    }

    pub fn batch_size(&self) -> usize {
        self.values[0].rows()
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

    pub fn context_len(&self) -> usize {
        self.context_len
    }

    pub fn target_len(&self) -> usize {
        self.target_len
    }

    fn prefix(&self, n: usize) -> Result<ContextSet> {
        ContextSet::new(
            self.times[..n].to_vec(),
            self.values[..n].to_vec(),
            self.present[..n].to_vec(),
        )
    }

    pub fn context(&self) -> Result<ContextSet> {
        self.prefix(self.context_len)
    }

    pub fn target(&self) -> Result<ContextSet> {
        self.prefix(self.target_len)
    }
}

/// Standard-normal draws for the reparameterised latents.
#[derive(Clone, Debug, PartialEq)]
pub struct ElboNoise {
    pub l0: Tensor,
    pub d: Tensor,
}

impl ElboNoise {
    pub fn sample(rng: &mut impl Rng, batch: usize, d_z: usize, d_d: usize) -> Self {
        let mut draw = |n: usize| {
            let data = (0..batch * n).map(|_| rng.sample(StandardNormal)).collect();
            Tensor::new(vec![batch, n], data).expect("shape bookkeeping")
        };
        let l0 = draw(d_z);
        let d = draw(d_d);
        Self { l0, d }
    }

    pub fn zeros(batch: usize, d_z: usize, d_d: usize) -> Self {
        Self {
            l0: Tensor::zeros(&[batch, d_z]),
            d: Tensor::zeros(&[batch, d_d]),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ElboTerms {
    /// scalar negative ELBO, averaged over the batch
    pub loss: Var,
    /// batch means of the individual terms
    pub log_likelihood: f64,
    pub kl_l0: f64,
    pub kl_d: f64,
}

/// Negative ELBO with latents drawn from the target-conditioned posterior and
/// KL terms against the context-conditioned one.
pub fn elbo_loss(
    model: &ProcessModel,
    tape: &mut Tape,
    batch: &TrajectoryBatch,
    noise: &ElboNoise,
    kl_weight: f64,
    table: &mut LgammaTable,
) -> Result<ElboTerms> {
    let ctx = batch.context()?;
    let tgt = batch.target()?;
    let (q_l0_c, q_d_c) = model.encode(tape, &ctx)?;
    let (q_l0_t, q_d_t) = model.encode(tape, &tgt)?;
    let e_l0 = tape.constant(noise.l0.clone());
    let e_d = tape.constant(noise.d.clone());
    let l0 = q_l0_t.reparam_sample(tape, e_l0)?;
    let d = q_d_t.reparam_sample(tape, e_d)?;
    let idx = tgt.present_indices();
    let times: Vec<f64> = idx.iter().map(|&i| batch.times[i]).collect();
    let outputs = model.decode(tape, l0, d, &times)?;
    let mut ll: Option<Var> = None;
    for (&i, out) in idx.iter().zip(&outputs) {
        let y = tape.constant(batch.values[i].clone());
        let lp = out.log_prob(tape, y, table)?;
        ll = Some(match ll {
            Some(acc) => tape.add(acc, lp)?,
            None => lp,
        });
    }
    let ll = ll.expect("target has a present point");
    let kl_l0 = q_l0_t.kl(tape, &q_l0_c)?;
    let kl_d = q_d_t.kl(tape, &q_d_c)?;
    let kl = tape.add(kl_l0, kl_d)?;
    let kl_w = tape.scale(kl, kl_weight);
    let per = tape.sub(kl_w, ll)?;
    let loss = tape.mean(per);
    let mean_of = |tape: &Tape, v: Var| tape.value(v).data().iter().sum::<f64>() / tape.value(v).len() as f64;
    Ok(ElboTerms {
        loss,
        log_likelihood: mean_of(tape, ll),
        kl_l0: mean_of(tape, kl_l0),
        kl_d: mean_of(tape, kl_d),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    /// fraction of timesteps kept per batch; 1 means regular sampling
    pub frequency: f64,
    pub kl_weight: f64,
    pub context_len: usize,
    pub target_len: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
            frequency: 1.0,
            kl_weight: 1.0,
            context_len: 8,
            target_len: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(ModelError::config("train.batch_size", "must be positive"));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(ModelError::config("train.lr", format!("must be finite and non-negative, got {}", self.lr)));
        }
        if !(self.kl_weight >= 0.0 && self.kl_weight.is_finite()) {
            return Err(ModelError::config("train.kl_weight", "must be finite and non-negative"));
        }
        if self.context_len == 0 || self.context_len >= self.target_len {
            return Err(ModelError::config(
                "train.context_len",
                format!("need 0 < C < T, got C = {}, T = {}", self.context_len, self.target_len),
            ));
        }
        if !(self.frequency > 0.0 && self.frequency <= 1.0) {
            return Err(ModelError::config("train.frequency", format!("must lie in (0, 1], got {}", self.frequency)));
        }
        if self.frequency * (self.context_len as f64) < 2.0 && self.context_len >= 2 {
            return Err(ModelError::config(
                "train.frequency",
                format!(
                    "frequency {} leaves fewer than 2 expected context points out of {}",
                    self.frequency, self.context_len
                ),
            ));
        }
        Ok(())
    }
}

/// Presence mask over `total` timesteps keeping `round(frequency·total)`
/// points: always index 0, plus at least two points among the first
/// `context` when available. Frequency 1 draws nothing from `rng`.
pub fn draw_mask(total: usize, context: usize, frequency: f64, rng: &mut impl Rng) -> Vec<bool> {
    if frequency >= 1.0 || total <= 1 {
        return vec![true; total];
    }
    let keep = ((frequency * total as f64).round() as usize).clamp(1, total);
    let mut present = vec![false; total];
    present[0] = true;
    for i in sample(rng, total - 1, keep - 1) {
        present[i + 1] = true;
    }
    let context = context.min(total);
    let need = 2.min(context);
    while present[..context].iter().filter(|&&p| p).count() < need {
        let absent: Vec<usize> = (1..context).filter(|&i| !present[i]).collect();
        let i = absent[rng.random_range(0..absent.len())];
        present[i] = true;
    }
    present
}

/// Checks that all groups share one time grid and feature width.
fn check_groups(groups: &[TimeSeriesDataset], d_y: usize, head: HeadKind, needed: usize) -> Result<()> {
    let first = groups.first().ok_or_else(|| ModelError::Data("no training data".into()))?;
    for g in groups {
        if g.times() != first.times() {
            return Err(ModelError::Data("datasets disagree on the time grid".into()));
        }
        if g.dim() != d_y {
            return Err(ModelError::config(
                "model.d_y",
                format!("model expects {d_y} features, data has {}", g.dim()),
            ));
        }
        if head == HeadKind::Poisson {
            let t = (0..g.len()).find(|&t| g.samples(t).data().iter().any(|v| *v < 0.0 || v.fract() != 0.0));
            if let Some(t) = t {
                return Err(ModelError::config(
                    "model.head",
                    format!("poisson head needs non-negative integer data; timestep {t} is not"),
                ));
            }
        }
    }
    if first.len() < needed {
        return Err(ModelError::Data(format!(
            "need at least {needed} timesteps, data has {}",
            first.len()
        )));
    }
    Ok(())
}

/// Pseudo-trajectories: each element picks a group, then one random sample per
/// timestep independently.
pub fn sample_batch(
    groups: &[TimeSeriesDataset],
    batch_size: usize,
    context_len: usize,
    target_len: usize,
    frequency: f64,
    rng: &mut impl Rng,
) -> Result<TrajectoryBatch> {
    let times = groups[0].times()[..target_len].to_vec();
    let d = groups[0].dim();
    let mut blocks = vec![Vec::with_capacity(batch_size * d); target_len];
    for _ in 0..batch_size {
        let g = &groups[rng.random_range(0..groups.len())];
        for (t, block) in blocks.iter_mut().enumerate() {
            let s = g.samples(t);
            block.extend_from_slice(s.row(rng.random_range(0..s.rows())));
        }
    }
    let values = blocks
        .into_iter()
        .map(|b| Tensor::new(vec![batch_size, d], b).expect("shape bookkeeping"))
        .collect();
    let present = draw_mask(target_len, context_len, frequency, rng);
    TrajectoryBatch::new(times, values, context_len, target_len, present)
}

/// Trains in place and returns the loss before each update.
pub fn train(model: &mut ProcessModel, groups: &[TimeSeriesDataset], cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mc = *model.config();
    check_groups(groups, mc.d_y, mc.head, cfg.target_len)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
        model.store(),
    );
    let mut table = LgammaTable::new();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch = sample_batch(groups, cfg.batch_size, cfg.context_len, cfg.target_len, cfg.frequency, &mut rng)?;
        let noise = ElboNoise::sample(&mut rng, cfg.batch_size, mc.d_z, mc.d_d);
        let mut tape = Tape::new();
        let terms = elbo_loss(model, &mut tape, &batch, &noise, cfg.kl_weight, &mut table).map_err(|e| match e {
            ModelError::Ode(o @ crate::ode::OdeError::NonFinite { .. }) => ModelError::Diverged {
                step,
                detail: o.to_string(),
            },
            other => other,
        })?;
        let loss = tape.value(terms.loss).item();
        if !loss.is_finite() {
            return Err(ModelError::Diverged {
                step,
                detail: format!("loss is {loss}"),
            });
        }
        losses.push(loss);
        let grads = tape.backward(terms.loss)?.params(model.store());
        if !grads.l2_norm().is_finite() {
            return Err(ModelError::Diverged {
                step,
                detail: "non-finite gradient".into(),
            });
        }
        adam.step(model.store_mut(), &grads)?;
        if log::log_enabled!(log::Level::Debug) && (step % 100 == 0 || step + 1 == cfg.steps) {
            log::debug!(
                "step {step}: loss {loss:.4} (loglik {:.4}, kl {:.4})",
                terms.log_likelihood,
                terms.kl_l0 + terms.kl_d
            );
        }
    }
    Ok(losses)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    /// fraction of context timesteps present at test time
    pub frequency: f64,
    /// share of samples per timestep held out for testing
    pub test_fraction: f64,
    /// number of test contexts averaged per timestep
    pub contexts: usize,
    /// contexts sharing one mask draw
    pub mask_group: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            frequency: 1.0,
            test_fraction: 0.2,
            contexts: 32,
            mask_group: 8,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.frequency > 0.0 && self.frequency <= 1.0) {
            return Err(ModelError::config("eval.frequency", format!("must lie in (0, 1], got {}", self.frequency)));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(ModelError::config("eval.test_fraction", "must lie in (0, 1)"));
        }
        if self.contexts == 0 || self.mask_group == 0 {
            return Err(ModelError::config("eval.contexts", "contexts and mask_group must be positive"));
        }
        Ok(())
    }
}

/// Empirical ground-truth parameters at one timestep.
#[derive(Clone, Debug, PartialEq)]
pub struct EmpiricalTruth {
    pub mean: Vec<f64>,
    /// unbiased sample variance
    pub var: Vec<f64>,
}

impl EmpiricalTruth {
    pub fn from_samples(samples: &Tensor) -> Result<Self> {
        let n = samples.rows();
        if n < 2 {
            return Err(ModelError::Data(format!("need at least 2 test samples, got {n}")));
        }
        let d = samples.cols();
        let mut mean = vec![0.0; d];
        for r in 0..n {
            for (m, v) in mean.iter_mut().zip(samples.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; d];
        for r in 0..n {
            for ((s, v), m) in var.iter_mut().zip(samples.row(r)).zip(&mean) {
                *s += (v - m).powi(2);
            }
        }
        var.iter_mut().for_each(|s| *s /= (n - 1) as f64);
        Ok(Self { mean, var })
    }
}

/// Expected squared error of one dimension: `λ* + (λ − λ*)²` for Poisson,
/// `σ*² + (μ − μ*)²` for Gaussian.
pub fn mse_term(head: HeadKind, predicted: f64, truth_mean: f64, truth_var: f64) -> f64 {
    let floor = match head {
        HeadKind::Poisson => truth_mean,
        HeadKind::Gaussian => truth_var,
    };
    floor + (predicted - truth_mean).powi(2)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub times: Vec<f64>,
    /// summed over dimensions, averaged over contexts
    pub per_timestep: Vec<f64>,
    /// `[timestep][dim]`
    pub per_dim: Vec<Vec<f64>>,
    /// first timestep counted as unseen
    pub unseen_from: usize,
    /// mean over unseen timesteps (NaN when there are none)
    pub unseen_mse: f64,
    /// mean over all timesteps
    pub all_mse: f64,
}

impl MetricReport {
    /// Mean over the given timesteps.
    pub fn mean_over(&self, range: std::ops::Range<usize>) -> f64 {
        let n = range.len();
        if n == 0 {
            return f64::NAN;
        }
        self.per_timestep[range].iter().sum::<f64>() / n as f64
    }

    pub fn to_csv(&self) -> String {
        let d = self.per_dim.first().map_or(0, Vec::len);
        let mut out = String::from("timestep,time,mse");
        for j in 0..d {
            out.push_str(&format!(",dim{j}"));
        }
        out.push('\n');
        for (t, (time, mse)) in self.times.iter().zip(&self.per_timestep).enumerate() {
            out.push_str(&format!("{t},{time},{mse}"));
            for v in &self.per_dim[t] {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

/// Test-MSE from predicted λ/μ. `predicted[t]` is `[n_predictions, d]`, one
/// row per test context; `test[t]` holds the held-out samples.
pub fn test_mse(
    head: HeadKind,
    times: &[f64],
    predicted: &[Tensor],
    test: &[Tensor],
    unseen_from: usize,
) -> Result<MetricReport> {
    if predicted.len() != times.len() || test.len() != times.len() {
        return Err(ModelError::Data("prediction, test and time lists differ in length".into()));
    }
    let mut per_timestep = Vec::with_capacity(times.len());
    let mut per_dim = Vec::with_capacity(times.len());
    for (t, (pred, samples)) in predicted.iter().zip(test).enumerate() {
        let truth = EmpiricalTruth::from_samples(samples).map_err(|e| ModelError::Data(format!("timestep {t}: {e}")))?;
        let d = truth.mean.len();
        if pred.cols() != d {
            return Err(ModelError::Data(format!(
                "timestep {t}: {} predicted dims vs {d} observed",
                pred.cols()
            )));
        }
        let n = pred.rows();
        let dims: Vec<f64> = (0..d)
            .map(|j| (0..n).map(|r| mse_term(head, pred.at(r, j), truth.mean[j], truth.var[j])).sum::<f64>() / n as f64)
            .collect();
        per_timestep.push(dims.iter().sum());
        per_dim.push(dims);
    }
    let mut report = MetricReport {
        times: times.to_vec(),
        per_timestep,
        per_dim,
        unseen_from,
        unseen_mse: f64::NAN,
        all_mse: f64::NAN,
    };
    report.unseen_mse = report.mean_over(unseen_from.min(times.len())..times.len());
    report.all_mse = report.mean_over(0..times.len());
    Ok(report)
}

/// Evaluates `model` on held-out samples: contexts are pseudo-trajectories
/// over the first `context_len` timesteps, predictions cover every timestep.
pub fn evaluate(
    model: &ProcessModel,
    test: &TimeSeriesDataset,
    context_len: usize,
    target_len: usize,
    cfg: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    cfg.validate()?;
    let mc = model.config();
    check_groups(std::slice::from_ref(test), mc.d_y, HeadKind::Gaussian, context_len.max(1))?;
    let times = test.times().to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = test.dim();
    let mut preds: Vec<Vec<f64>> = vec![Vec::with_capacity(cfg.contexts * d); times.len()];
    let mut remaining = cfg.contexts;
    while remaining > 0 {
        let b = remaining.min(cfg.mask_group);
        remaining -= b;
        let mut blocks = vec![Vec::with_capacity(b * d); context_len];
        for _ in 0..b {
            for (t, block) in blocks.iter_mut().enumerate() {
                let s = test.samples(t);
                block.extend_from_slice(s.row(rng.random_range(0..s.rows())));
            }
        }
        let values = blocks
            .into_iter()
            .map(|v| Tensor::new(vec![b, d], v).expect("shape bookkeeping"))
            .collect();
        let present = draw_mask(context_len, context_len, cfg.frequency, &mut rng);
        let ctx = ContextSet::new(times[..context_len].to_vec(), values, present)?;
        let out = model.predict(&ctx, &times)?;
        for (acc, o) in preds.iter_mut().zip(&out) {
            if !o.is_finite() {
                return Err(ModelError::Diverged {
                    step: 0,
                    detail: "non-finite prediction".into(),
                });
            }
            acc.extend_from_slice(o.mean().data());
        }
    }
    let predicted: Vec<Tensor> = preds
        .into_iter()
        .map(|p| Tensor::new(vec![cfg.contexts, d], p).expect("shape bookkeeping"))
        .collect();
    let samples: Vec<Tensor> = (0..times.len()).map(|t| test.samples(t).clone()).collect();
    test_mse(mc.head, &times, &predicted, &samples, target_len)
}

/// Predicts every timestep with the per-feature mean of the training samples
/// over the first `seen` timesteps.
pub fn global_mean_report(
    head: HeadKind,
    train: &TimeSeriesDataset,
    test: &TimeSeriesDataset,
    seen: usize,
) -> Result<MetricReport> {
    let mean = Tensor::new(vec![1, train.dim()], train.global_mean(seen))?;
    let predicted = vec![mean; test.len()];
    let samples: Vec<Tensor> = (0..test.len()).map(|t| test.samples(t).clone()).collect();
    test_mse(head, test.times(), &predicted, &samples, seen)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SweepRow {
    pub context_len: usize,
    pub target_len: usize,
    pub test_mse: f64,
}

/// Trains one model per context length `C` with target length `C + C/2` and
/// reports test-MSE over timesteps `>= C + C/2`.
pub fn context_sweep(
    model_cfg: &ModelConfig,
    train_set: &TimeSeriesDataset,
    test_set: &TimeSeriesDataset,
    contexts: &[usize],
    train_cfg: &TrainConfig,
    eval_cfg: &EvalConfig,
    seed: u64,
) -> Result<Vec<SweepRow>> {
    let v = train_set.len();
    if let Some(&c) = contexts.iter().find(|&&c| c < 2 || c + c / 2 >= v) {
        return Err(ModelError::config(
            "sweep.contexts",
            format!("C = {c} needs 2 <= C and C + C/2 < {v} so that unseen timesteps remain"),
        ));
    }
    let mut rows = Vec::with_capacity(contexts.len());
    for &c in contexts {
        let t = c + c / 2;
        let cfg = TrainConfig {
            context_len: c,
            target_len: t,
            ..*train_cfg
        };
        let mut model = ProcessModel::new(*model_cfg, seed)?;
        train(&mut model, std::slice::from_ref(train_set), &cfg)?;
        let report = evaluate(&model, test_set, c, t, eval_cfg, seed)?;
        rows.push(SweepRow {
            context_len: c,
            target_len: t,
            test_mse: report.unseen_mse,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate_synthetic, SyntheticKind, SyntheticSpec};
    use crate::model::ModelKind;

    fn data(kind: SyntheticKind, seed: u64) -> TimeSeriesDataset {
        generate_synthetic(&SyntheticSpec {
            kind,
            d_y: 3,
            timesteps: 8,
            cells_per_t: 30,
            seed,
        })
        .unwrap()
        .0
    }

    fn tiny(kind: ModelKind, head: HeadKind) -> ModelConfig {
        ModelConfig {
            d_r: 8,
            d_z: 4,
            d_d: 3,
            hidden: 12,
            solver: crate::ode::SolverConfig::new(crate::ode::Method::Rk4, 2).unwrap(),
            ..ModelConfig::new(kind, head, 3)
        }
    }

    fn short() -> TrainConfig {
        TrainConfig {
            steps: 20,
            batch_size: 4,
            lr: 5e-3,
            context_len: 3,
            target_len: 5,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn mse_examples() {
        assert_eq!(mse_term(HeadKind::Poisson, 2.0, 2.0, 99.0), 2.0);
        assert_eq!(mse_term(HeadKind::Gaussian, 0.3, 0.3, 0.0), 0.0);
        assert_eq!(mse_term(HeadKind::Gaussian, 1.0, 3.0, 0.25), 4.25);
    }

    #[test]
    fn test_mse_needs_two_samples() {
        let one = Tensor::from_rows(&[vec![1.0]]).unwrap();
        assert!(test_mse(HeadKind::Gaussian, &[0.0], std::slice::from_ref(&one), std::slice::from_ref(&one), 0).is_err());
    }

    #[test]
    fn test_mse_minimised_at_truth() {
        let samples = Tensor::from_rows(&[vec![1.0, 4.0], vec![3.0, 6.0], vec![2.0, 2.0]]).unwrap();
        let truth = EmpiricalTruth::from_samples(&samples).unwrap();
        for head in [HeadKind::Poisson, HeadKind::Gaussian] {
            let at = |p: Vec<f64>| {
                let pred = Tensor::from_rows(&[p]).unwrap();
                test_mse(head, &[0.0], &[pred], std::slice::from_ref(&samples), 0).unwrap().unseen_mse
            };
            let best = at(truth.mean.clone());
            for delta in [-1.0, -0.1, 0.1, 1.0] {
                for j in 0..2 {
                    let mut p = truth.mean.clone();
                    p[j] += delta;
                    assert!(at(p) > best);
                }
            }
        }
    }

    #[test]
    fn masks_keep_origin_and_two_context_points() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..500 {
            let m = draw_mask(13, 8, 0.2, &mut rng);
            assert!(m[0]);
            assert!(m[..8].iter().filter(|&&p| p).count() >= 2);
        }
        let before = rng.clone();
        assert_eq!(draw_mask(13, 8, 1.0, &mut rng), vec![true; 13]);
        assert_eq!(rng, before);
    }

    #[test]
    fn config_validation_names_key() {
        let cfg = TrainConfig {
            frequency: 0.2,
            ..TrainConfig::default()
        };
        match cfg.validate() {
            Err(ModelError::Config { key, .. }) => assert_eq!(key, "train.frequency"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn identical_context_and_target_has_zero_kl() {
        let model = ProcessModel::new(tiny(ModelKind::Nodep, HeadKind::Gaussian), 0).unwrap();
        let ds = data(SyntheticKind::Gaussian, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let b = sample_batch(&[ds], 4, 3, 5, 1.0, &mut rng).unwrap();
        // mask out the target-only points so both sets hold the same data
        let b = TrajectoryBatch::new(
            b.times.clone(),
            b.values.clone(),
            3,
            5,
            vec![true, true, true, false, false],
        )
        .unwrap();
        let mut tape = Tape::new();
        let noise = ElboNoise::zeros(4, 4, 3);
        let terms = elbo_loss(&model, &mut tape, &b, &noise, 1.0, &mut LgammaTable::new()).unwrap();
        assert!(terms.kl_l0.abs() < 1e-12 && terms.kl_d.abs() < 1e-12);
        assert!((tape.value(terms.loss).item() + terms.log_likelihood).abs() < 1e-9);
    }

    #[test]
    fn poisson_head_rejects_real_data() {
        let mut model = ProcessModel::new(tiny(ModelKind::Np, HeadKind::Poisson), 0).unwrap();
        let err = train(&mut model, &[data(SyntheticKind::Gaussian, 0)], &short()).unwrap_err();
        assert!(matches!(err, ModelError::Config { ref key, .. } if key == "model.head"), "{err}");
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let mut model = ProcessModel::new(tiny(ModelKind::Snodep, HeadKind::Poisson), 0).unwrap();
        let before = model.store().clone();
        let cfg = TrainConfig { lr: 0.0, ..short() };
        train(&mut model, &[data(SyntheticKind::Poisson, 0)], &cfg).unwrap();
        for (id, _, t) in before.iter() {
            assert_eq!(model.store().get(id), t);
        }
    }

    #[test]
    fn seeded_runs_repeat() {
        for kind in ModelKind::ALL {
            let ds = data(SyntheticKind::Gaussian, 3);
            let cfg = TrainConfig {
                frequency: 0.8,
                ..short()
            };
            let run = || {
                let mut m = ProcessModel::new(tiny(kind, HeadKind::Gaussian), 4).unwrap();
                train(&mut m, std::slice::from_ref(&ds), &cfg).unwrap()
            };
            let a = run();
            assert!(a.iter().all(|l| l.is_finite()));
            assert_eq!(a, run());
        }
    }

    #[test]
    fn evaluation_and_baseline_shapes() {
        let ds = data(SyntheticKind::Poisson, 5);
        let (tr, te) = ds.split_samples(0.2, 0).unwrap();
        let model = ProcessModel::new(tiny(ModelKind::Nodep, HeadKind::Poisson), 0).unwrap();
        let r = evaluate(&model, &te, 3, 5, &EvalConfig::default(), 1).unwrap();
        assert_eq!(r.per_timestep.len(), 8);
        assert!(r.per_timestep.iter().all(|&v| v >= 0.0));
        assert!((r.unseen_mse - r.mean_over(5..8)).abs() < 1e-12);
        let base = global_mean_report(HeadKind::Poisson, &tr, &te, 5).unwrap();
        assert!(base.unseen_mse.is_finite());
        assert_eq!(r.to_csv().lines().count(), 9);
    }
}
