//! Command-line front end. Each subcommand writes its artifacts into the
//! `--out` directory.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::{
    generate_synthetic, knockout_generate, load_dataset_csv, load_expression_csv, load_expression_matrix,
    log_normalize_scale, save_dataset_csv, save_ground_truth_csv, DataError, DataKind, PathwayDef, SyntheticKind,
    SyntheticSpec, TimeSeriesDataset, KNOCKOUT_PREFIX,
};
use crate::error::ModelError;
use crate::model::{ModelConfig, ModelKind, ProcessModel};
use crate::scfea::{estimate_flux_balance, ScfeaEstimator};
use crate::tensor::{load_checkpoint, save_checkpoint};
use crate::train::{context_sweep, evaluate, global_mean_report, train, MetricReport};

#[derive(Debug, Parser)]
#[command(name = "snodep", version, about = "Neural ODE processes for time-varying distributions")]
pub struct Cli {
    /// seed for every random choice
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// JSON run configuration
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// output directory
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// only report errors
    #[arg(long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic dataset driven by a damped oscillator.
    Generate {
        /// poisson or gaussian
        #[arg(long)]
        kind: Option<String>,
        #[arg(long)]
        cells: Option<usize>,
        #[arg(long)]
        timesteps: Option<usize>,
        /// number of features
        #[arg(long)]
        dims: Option<usize>,
    },
    /// log1p and per-gene standardisation of raw counts.
    Preprocess {
        #[arg(long)]
        data: PathBuf,
        /// `cell_id,day` sidecar when `--data` is a gene × cell matrix
        #[arg(long)]
        labels: Option<PathBuf>,
    },
    /// Per-timestep module flux and metabolite balance.
    EstimateFlux {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pathway: PathBuf,
    },
    /// Gene-knockout flux and balance datasets.
    Knockout {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pathway: PathBuf,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        configurations: Option<usize>,
    },
    /// Train one model and report test-MSE.
    Train {
        /// training data; repeat for several groups on one time grid
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        /// held-out groups; when absent each group's samples are split
        #[arg(long)]
        test_data: Vec<PathBuf>,
    },
    /// Test-MSE of a trained model on new data.
    Evaluate {
        /// directory written by `train`
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
    },
    /// Test-MSE of several model kinds over several seeds.
    Compare {
        #[arg(long, default_value = "np,nodep,snodep,snodep_gruode")]
        models: String,
        #[arg(long, required = true)]
        data: Vec<PathBuf>,
        #[arg(long, default_value_t = 1)]
        seeds: usize,
    },
    /// Test-MSE as a function of context length.
    SweepContext {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value = "2,4,6,8")]
        contexts: String,
    },
}

#[derive(Debug)]
pub enum CliError {
    /// bad input, configuration or I/O; exit code 2
    Validation(String),
    /// divergence or non-finite numerics; exit code 3
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) => 2,
            CliError::Numerical(_) => 3,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Validation(m) => write!(f, "error: {m}"),
            CliError::Numerical(m) => write!(f, "numerical failure: {m}"),
        }
    }
}

impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        if e.is_numerical() {
            CliError::Numerical(e.to_string())
        } else {
            CliError::Validation(e.to_string())
        }
    }
}

type CliResult<T> = Result<T, CliError>;

fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Validation(format!("{}: {e}", path.display()))
}

fn write_file(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io(path, e))
}

fn out_dir(out: &Path) -> CliResult<()> {
    fs::create_dir_all(out).map_err(|e| io(out, e))
}

/// Loads any supported dataset file. Long-format files whose non-indicator
/// columns are all non-negative integers are read as raw counts.
pub fn load_data(path: &Path) -> CliResult<TimeSeriesDataset> {
    let text = fs::read_to_string(path).map_err(|e| io(path, e))?;
    let header = text.lines().next().unwrap_or("").trim();
    if header == "gene,day,cell_id,count" {
        return Ok(load_expression_csv(path)?);
    }
    if !header.starts_with("time,sample_id") {
        return Err(CliError::Validation(format!(
            "{}: unrecognised header `{header}`",
            path.display()
        )));
    }
    let ds = load_dataset_csv(path, DataKind::Expression)?;
    if ds.is_count_data() {
        return Ok(ds);
    }
    Ok(load_dataset_csv(path, DataKind::Flux)?)
}

fn load_groups(paths: &[PathBuf]) -> CliResult<Vec<TimeSeriesDataset>> {
    paths.iter().map(|p| load_data(p)).collect()
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> CliResult<Vec<T>> {
    s.split(',')
        .filter(|x| !x.trim().is_empty())
        .map(|x| {
            x.trim()
                .parse()
                .map_err(|_| CliError::Validation(format!("bad {what} `{x}`")))
        })
        .collect()
}

/// Averages per-timestep MSE over several reports on one time grid.
pub fn average_reports(reports: &[MetricReport]) -> MetricReport {
    let n = reports.len() as f64;
    let mut out = reports[0].clone();
    for t in 0..out.per_timestep.len() {
        out.per_timestep[t] = reports.iter().map(|r| r.per_timestep[t]).sum::<f64>() / n;
        for j in 0..out.per_dim[t].len() {
            out.per_dim[t][j] = reports.iter().map(|r| r.per_dim[t][j]).sum::<f64>() / n;
        }
    }
    let v = out.times.len();
    out.unseen_mse = out.mean_over(out.unseen_from.min(v)..v);
    out.all_mse = out.mean_over(0..v);
    out
}

/// Everything needed to rebuild a trained model.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SavedRun {
    config: RunConfig,
    d_y: usize,
    counts: bool,
    seed: u64,
    features: Vec<String>,
}

struct Trained {
    model: ProcessModel,
    losses: Vec<f64>,
    report: MetricReport,
    baseline: MetricReport,
}

fn split_groups(
    groups: &[TimeSeriesDataset],
    test: Vec<TimeSeriesDataset>,
    cfg: &RunConfig,
    seed: u64,
) -> CliResult<(Vec<TimeSeriesDataset>, Vec<TimeSeriesDataset>)> {
    if !test.is_empty() {
        return Ok((groups.to_vec(), test));
    }
    let mut train_parts = Vec::new();
    let mut test_parts = Vec::new();
    for (i, g) in groups.iter().enumerate() {
        let (a, b) = g.split_samples(cfg.eval.test_fraction, seed.wrapping_add(i as u64))?;
        train_parts.push(a);
        test_parts.push(b);
    }
    Ok((train_parts, test_parts))
}

fn fit_and_score(
    mc: ModelConfig,
    cfg: &RunConfig,
    train_parts: &[TimeSeriesDataset],
    test_parts: &[TimeSeriesDataset],
    seed: u64,
) -> CliResult<Trained> {
    let tc = cfg.train_config(seed);
    let mut model = ProcessModel::new(mc, seed)?;
    let losses = train(&mut model, train_parts, &tc)?;
    let reports = test_parts
        .iter()
        .map(|t| evaluate(&model, t, tc.context_len, tc.target_len, &cfg.eval, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let baselines = train_parts
        .iter()
        .zip(test_parts)
        .map(|(tr, te)| global_mean_report(mc.head, tr, te, tc.target_len))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(Trained {
        model,
        losses,
        report: average_reports(&reports),
        baseline: average_reports(&baselines),
    })
}

pub fn run(cli: &Cli) -> CliResult<()> {
    let cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let out = cli.out.as_path();
    let seed = cli.seed;
    match &cli.command {
        Command::Generate {
            kind,
            cells,
            timesteps,
            dims,
        } => {
            let kind = match kind.as_deref() {
                None => cfg.data.kind,
                Some(k) => serde_json::from_value::<SyntheticKind>(serde_json::Value::String(k.to_ascii_lowercase()))
                    .map_err(|_| CliError::Validation(format!("--kind must be poisson or gaussian, got `{k}`")))?,
            };
            let spec = SyntheticSpec {
                kind,
                d_y: dims.unwrap_or(cfg.data.d_y),
                timesteps: timesteps.unwrap_or(cfg.data.timesteps),
                cells_per_t: cells.unwrap_or(cfg.data.cells),
                seed,
            };
            let (ds, gt) = generate_synthetic(&spec)?;
            out_dir(out)?;
            save_dataset_csv(&ds, &out.join("data.csv"))?;
            save_ground_truth_csv(&gt, ds.feature_names(), &out.join("ground_truth.csv"))?;
            write_file(
                &out.join("spec.json"),
                &(serde_json::to_string_pretty(&spec).expect("spec serialises") + "\n"),
            )?;
            log::info!("wrote {} timesteps x {} cells to {}", spec.timesteps, spec.cells_per_t, out.display());
        }
        Command::Preprocess { data, labels } => {
            let ds = match labels {
                Some(l) => load_expression_matrix(data, l)?,
                None => load_data(data)?,
            };
            if !ds.is_count_data() {
                return Err(CliError::Validation(format!(
                    "{} does not hold raw counts (already normalised?)",
                    data.display()
                )));
            }
            let window = cfg.data.normalize_window.unwrap_or(cfg.train.target_len);
            let norm = log_normalize_scale(&ds, Some(window))?;
            out_dir(out)?;
            save_dataset_csv(&norm, &out.join("normalized.csv"))?;
        }
        Command::EstimateFlux { data, pathway } => {
            let ds = load_data(data)?;
            let p = PathwayDef::load(pathway)?;
            let (flux, balance) = estimate_flux_balance(&ds, &p, &cfg.scfea, seed)?;
            out_dir(out)?;
            save_dataset_csv(&flux, &out.join("flux.csv"))?;
            save_dataset_csv(&balance, &out.join("balance.csv"))?;
        }
        Command::Knockout {
            data,
            pathway,
            k,
            configurations,
        } => {
            let ds = load_data(data)?;
            let p = PathwayDef::load(pathway)?;
            let mut kc = cfg.knockout;
            kc.k = k.unwrap_or(kc.k);
            kc.configurations = configurations.unwrap_or(kc.configurations);
            let est = ScfeaEstimator { config: cfg.scfea };
            let ko = knockout_generate(&ds, &p, &kc, seed, &est)?;
            out_dir(out)?;
            let mut split = String::from("configuration,role,knocked\n");
            for (s, spec) in ko.configs.iter().enumerate() {
                let dir = out.join(format!("config_{s}"));
                out_dir(&dir)?;
                save_dataset_csv(&ko.flux[s], &dir.join("flux.csv"))?;
                save_dataset_csv(&ko.balance[s], &dir.join("balance.csv"))?;
                let role = if ko.test.contains(&s) { "test" } else { "train" };
                let names: Vec<&str> = spec.genes.iter().map(|&g| ds.feature_names()[g].as_str()).collect();
                let _ = writeln!(split, "{s},{role},{}", names.join(";"));
            }
            write_file(&out.join("split.csv"), &split)?;
        }
        Command::Train { data, test_data } => {
            let groups = load_groups(data)?;
            let tests = load_groups(test_data)?;
            let counts = groups.iter().all(|g| g.is_count_data());
            let mc = cfg.model_config(groups[0].dim(), counts)?;
            let (tr, te) = split_groups(&groups, tests, &cfg, seed)?;
            let fit = fit_and_score(mc, &cfg, &tr, &te, seed)?;
            out_dir(out)?;
            save_checkpoint(fit.model.store(), &out.join("checkpoint.txt"))
                .map_err(|e| CliError::Validation(e.to_string()))?;
            let mut resolved = cfg.clone();
            resolved.model.kind = Some(mc.kind);
            resolved.model.encoder = None;
            resolved.model.head = Some(mc.head);
            let saved = SavedRun {
                config: resolved,
                d_y: mc.d_y,
                counts,
                seed,
                features: groups[0].feature_names().to_vec(),
            };
            write_file(
                &out.join("run.json"),
                &(serde_json::to_string_pretty(&saved).expect("run serialises") + "\n"),
            )?;
            let mut loss = String::from("step,loss\n");
            for (i, l) in fit.losses.iter().enumerate() {
                let _ = writeln!(loss, "{i},{l}");
            }
            write_file(&out.join("loss.csv"), &loss)?;
            write_file(&out.join("metrics.csv"), &fit.report.to_csv())?;
            write_file(
                &out.join("summary.json"),
                &(serde_json::to_string_pretty(&serde_json::json!({
                    "model": mc.kind,
                    "unseen_mse": fit.report.unseen_mse,
                    "all_mse": fit.report.all_mse,
                    "baseline_unseen_mse": fit.baseline.unseen_mse,
                    "final_loss": fit.losses.last(),
                }))
                .expect("summary serialises")
                    + "\n"),
            )?;
            log::info!(
                "{}: unseen test-MSE {:.4} (global-mean baseline {:.4})",
                mc.kind,
                fit.report.unseen_mse,
                fit.baseline.unseen_mse
            );
        }
        Command::Evaluate { model, data } => {
            let run_path = model.join("run.json");
            let text = fs::read_to_string(&run_path).map_err(|e| io(&run_path, e))?;
            let saved: SavedRun = serde_json::from_str(&text)
                .map_err(|e| CliError::Validation(format!("{}: {e}", run_path.display())))?;
            let mc = saved.config.model_config(saved.d_y, saved.counts)?;
            let mut pm = ProcessModel::new(mc, saved.seed)?;
            let ck = model.join("checkpoint.txt");
            let store = load_checkpoint(&ck).map_err(|e| CliError::Validation(format!("{}: {e}", ck.display())))?;
            pm.store_mut()
                .load_from(&store)
                .map_err(|e| CliError::Validation(format!("{}: {e}", ck.display())))?;
            let groups = load_groups(data)?;
            let tc = saved.config.train_config(saved.seed);
            let eval_cfg = crate::train::EvalConfig { ..cfg.eval };
            let reports = groups
                .iter()
                .map(|g| evaluate(&pm, g, tc.context_len, tc.target_len, &eval_cfg, seed))
                .collect::<Result<Vec<_>, _>>()?;
            let report = average_reports(&reports);
            out_dir(out)?;
            write_file(&out.join("metrics.csv"), &report.to_csv())?;
            log::info!("unseen test-MSE {:.4}", report.unseen_mse);
        }
        Command::Compare { models, data, seeds } => {
            let kinds = models
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| {
                    ModelKind::parse(s).ok_or_else(|| CliError::Validation(format!("unknown model kind `{s}`")))
                })
                .collect::<CliResult<Vec<_>>>()?;
            if kinds.is_empty() || *seeds == 0 {
                return Err(CliError::Validation("need at least one model and one seed".into()));
            }
            let groups = load_groups(data)?;
            let counts = groups.iter().all(|g| g.is_count_data());
            let (tr, te) = split_groups(&groups, Vec::new(), &cfg, seed)?;
            let cells: Vec<(usize, usize)> = (0..kinds.len()).flat_map(|k| (0..*seeds).map(move |s| (k, s))).collect();
            let results = cells
                .par_iter()
                .map(|&(k, s)| {
                    let mut c = cfg.clone();
                    c.model.kind = Some(kinds[k]);
                    c.model.encoder = None;
                    let mc = c.model_config(groups[0].dim(), counts)?;
                    let fit = fit_and_score(mc, &c, &tr, &te, seed.wrapping_add(s as u64))?;
                    Ok(fit.report.unseen_mse)
                })
                .collect::<CliResult<Vec<f64>>>()?;
            let table = compare_table(&kinds, *seeds, seed, &results);
            out_dir(out)?;
            write_file(&out.join("compare.csv"), &table)?;
        }
        Command::SweepContext { data, contexts } => {
            let cs: Vec<usize> = parse_list(contexts, "context length")?;
            let ds = load_data(data)?;
            let mc = cfg.model_config(ds.dim(), ds.is_count_data())?;
            let (tr, te) = ds.split_samples(cfg.eval.test_fraction, seed)?;
            let rows = context_sweep(&mc, &tr, &te, &cs, &cfg.train_config(seed), &cfg.eval, seed)?;
            let mut text = String::from("context_len,target_len,test_mse\n");
            for r in rows {
                let _ = writeln!(text, "{},{},{}", r.context_len, r.target_len, r.test_mse);
            }
            out_dir(out)?;
            write_file(&out.join("sweep.csv"), &text)?;
        }
    }
    Ok(())
}

/// One row per seed (plus a mean row for several seeds); `results` is
/// ordered model-major. Adds `nodep_minus_snodep` when both kinds ran, using
/// the GRU-ODE variant when plain SNODEP is absent.
pub fn compare_table(kinds: &[ModelKind], seeds: usize, base_seed: u64, results: &[f64]) -> String {
    let at = |k: usize, s: usize| results[k * seeds + s];
    let nodep = kinds.iter().position(|&k| k == ModelKind::Nodep);
    let snodep = kinds
        .iter()
        .position(|&k| k == ModelKind::Snodep)
        .or_else(|| kinds.iter().position(|&k| k == ModelKind::SnodepGruode));
    let diff = nodep.zip(snodep);
    let mut text = String::from("seed");
    for k in kinds {
        let _ = write!(text, ",{k}");
    }
    if diff.is_some() {
        text.push_str(",nodep_minus_snodep");
    }
    text.push('\n');
    let mut row = |label: String, vals: Vec<f64>| {
        text.push_str(&label);
        for v in &vals {
            let _ = write!(text, ",{v}");
        }
        if let Some((a, b)) = diff {
            let _ = write!(text, ",{}", vals[a] - vals[b]);
        }
        text.push('\n');
    };
    for s in 0..seeds {
        row(
            base_seed.wrapping_add(s as u64).to_string(),
            (0..kinds.len()).map(|k| at(k, s)).collect(),
        );
    }
    if seeds > 1 {
        row(
            "mean".into(),
            (0..kinds.len())
                .map(|k| (0..seeds).map(|s| at(k, s)).sum::<f64>() / seeds as f64)
                .collect(),
        );
    }
    text
}

/// Indicator columns carry this prefix in emitted CSVs.
pub const INDICATOR_PREFIX: &str = KNOCKOUT_PREFIX;
