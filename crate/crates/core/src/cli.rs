//! Benchmark harness: task × surrogate × seed sweeps, oracle comparison and
//! result tables.
//!
//! ```text
//! asvi run --task br,lz --surrogate asvi,mean-field --seeds 1..15 --out results
//! asvi summarize results
//! ```
//!
//! Flags and `--config` JSON files are applied in command-line order, so a
//! later flag overrides an earlier config file and vice versa.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{
    elbo_estimate, fit, surrogate_moments, write_trajectory_csv, EarlyStopping, InferenceError,
    TrainConfig,
};
use crate::oracles::{kalman_filter_smoother, metropolis_sample, MetropolisConfig, OracleError};
use crate::surrogates::SurrogateKind;
use crate::tasks::{OracleKind, RadonData, RadonSource, SdeTaskConfig, Task, TaskError, TaskId};

/// Offset separating evaluation noise from the training stream of the same seed.
const EVAL_SEED_OFFSET: u64 = 0x0e7a_1000;
const MOMENT_DRAWS: usize = 4000;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config file {path}: {reason}")]
    Config { path: PathBuf, reason: String },
    #[error("result directory {0}: no results.csv rows")]
    EmptyResults(PathBuf),
    #[error(transparent)]
    Task(#[from] TaskError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Inference(#[from] InferenceError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Parser)]
#[command(
    name = "asvi",
    version,
    about = "Structured variational inference benchmarks",
    args_override_self = true
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit surrogates over a task × surrogate × seed grid and write result tables.
    Run(RunArgs),
    /// Aggregate a results directory into mean ± standard error per task and surrogate.
    Summarize {
        /// Directory holding results.csv.
        dir: PathBuf,
    },
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Tasks: br, brg, lz, lzg, es, radon (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub task: Vec<TaskId>,
    /// Surrogates: asvi, mean-field, ar1, mvn (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub surrogate: Vec<SurrogateKind>,
    /// Maximum optimization steps per fit.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Adam learning rate (defaults per surrogate).
    #[arg(long)]
    pub lr: Option<f64>,
    /// Monte-Carlo samples per gradient estimate.
    #[arg(long)]
    pub samples: Option<usize>,
    /// Seeds as a list and/or inclusive ranges, e.g. `1,2,3` or `1..15`.
    #[arg(long)]
    pub seeds: Option<SeedList>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// JSON config file; applied at its position among the flags.
    #[arg(long)]
    pub config: Vec<PathBuf>,
    /// Radon records CSV (county, log_uranium, floor, county_mean_floor, log_radon).
    #[arg(long)]
    pub radon_csv: Option<PathBuf>,
}

/// Seed list accepted by `--seeds`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SeedList(pub Vec<u64>);

impl std::str::FromStr for SeedList {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        parse_seeds(s).map(SeedList)
    }
}

/// Parse `1,2,3`, `1..15` (inclusive) or mixtures such as `1..3,8`.
pub fn parse_seeds(s: &str) -> Result<Vec<u64>, String> {
    let mut seeds = Vec::new();
    for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
        if let Some((a, b)) = part.split_once("..") {
            let a: u64 = a
                .trim()
                .parse()
                .map_err(|_| format!("bad seed range `{part}`"))?;
            let b: u64 = b
                .trim()
                .trim_start_matches('=')
                .parse()
                .map_err(|_| format!("bad seed range `{part}`"))?;
            if b < a {
                return Err(format!("empty seed range `{part}`"));
            }
            seeds.extend(a..=b);
        } else {
            seeds.push(part.parse().map_err(|_| format!("bad seed `{part}`"))?);
        }
    }
    if seeds.is_empty() {
        return Err("no seeds given".into());
    }
    Ok(seeds)
}

/// One sweep configuration.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub tasks: Vec<TaskId>,
    pub surrogates: Vec<SurrogateKind>,
    pub steps: usize,
    pub lr: Option<f64>,
    pub n_samples: usize,
    pub seeds: Vec<u64>,
    pub out: PathBuf,
    pub record_every: usize,
    pub early_stopping: Option<EarlyStopping>,
    pub average_last: usize,
    pub final_elbo_samples: usize,
    pub metropolis: MetropolisConfig,
    pub sde: Option<SdeTaskConfig>,
    pub radon_csv: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tasks: Vec::new(),
            surrogates: vec![SurrogateKind::Asvi, SurrogateKind::MeanField],
            steps: 30_000,
            lr: None,
            n_samples: 1,
            seeds: vec![0],
            out: PathBuf::from("results"),
            record_every: 10,
            early_stopping: Some(EarlyStopping::default()),
            average_last: 0,
            final_elbo_samples: 1000,
            metropolis: MetropolisConfig::default(),
            sde: None,
            radon_csv: None,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T> OneOrMany<T> {
    fn into_vec(self) -> Vec<T> {
        match self {
            OneOrMany::One(t) => vec![t],
            OneOrMany::Many(v) => v,
        }
    }
}

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum SeedSpec {
    List(Vec<u64>),
    Text(String),
}

/// Contents of a `--config` file; every field is optional.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    #[serde(alias = "tasks")]
    task: Option<OneOrMany<TaskId>>,
    #[serde(alias = "surrogates")]
    surrogate: Option<OneOrMany<SurrogateKind>>,
    steps: Option<usize>,
    lr: Option<f64>,
    #[serde(alias = "n_samples")]
    samples: Option<usize>,
    seeds: Option<SeedSpec>,
    out: Option<PathBuf>,
    record_every: Option<usize>,
    #[serde(default, deserialize_with = "deserialize_some")]
    early_stopping: Option<Option<EarlyStopping>>,
    average_last: Option<usize>,
    final_elbo_samples: Option<usize>,
    metropolis: Option<MetropolisConfig>,
    sde: Option<SdeTaskConfig>,
    radon_csv: Option<PathBuf>,
}

fn deserialize_some<'de, T, D>(d: D) -> Result<Option<T>, D::Error>
where
    T: Deserialize<'de>,
    D: serde::Deserializer<'de>,
{
    T::deserialize(d).map(Some)
}

impl ConfigFile {
    fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })
    }

    fn apply(self, cfg: &mut RunConfig, path: &Path) -> Result<(), CliError> {
        if let Some(t) = self.task {
            cfg.tasks = t.into_vec();
        }
        if let Some(s) = self.surrogate {
            cfg.surrogates = s.into_vec();
        }
        if let Some(v) = self.steps {
            cfg.steps = v;
        }
        if let Some(v) = self.lr {
            cfg.lr = Some(v);
        }
        if let Some(v) = self.samples {
            cfg.n_samples = v;
        }
        if let Some(s) = self.seeds {
            cfg.seeds = match s {
                SeedSpec::List(v) => v,
                SeedSpec::Text(t) => parse_seeds(&t).map_err(|reason| CliError::Config {
                    path: path.to_path_buf(),
                    reason,
                })?,
            };
        }
        if let Some(v) = self.out {
            cfg.out = v;
        }
        if let Some(v) = self.record_every {
            cfg.record_every = v;
        }
        if let Some(v) = self.early_stopping {
            cfg.early_stopping = v;
        }
        if let Some(v) = self.average_last {
            cfg.average_last = v;
        }
        if let Some(v) = self.final_elbo_samples {
            cfg.final_elbo_samples = v;
        }
        if let Some(v) = self.metropolis {
            cfg.metropolis = v;
        }
        if let Some(v) = self.sde {
            cfg.sde = Some(v);
        }
        if let Some(v) = self.radon_csv {
            cfg.radon_csv = Some(v);
        }
        Ok(())
    }
}

type Setting = Box<dyn FnOnce(&mut RunConfig) -> Result<(), CliError>>;

fn last_index(m: &ArgMatches, id: &str) -> Option<usize> {
    m.indices_of(id).and_then(|mut i| i.next_back())
}

fn run_config_from_matches(m: &ArgMatches) -> Result<RunConfig, CliError> {
    let args = RunArgs::from_arg_matches(m).map_err(|e| CliError::Usage(e.to_string()))?;
    let mut cfg = RunConfig::default();

    // (position, setting) pairs applied in command-line order
    let mut settings: Vec<(usize, Setting)> = Vec::new();
    if let Some(i) = last_index(m, "task") {
        let v = args.task.clone();
        settings.push((
            i,
            Box::new(move |c| {
                c.tasks = v;
                Ok(())
            }),
        ));
    }
    if let Some(i) = last_index(m, "surrogate") {
        let v = args.surrogate.clone();
        settings.push((
            i,
            Box::new(move |c| {
                c.surrogates = v;
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "steps"), args.steps) {
        settings.push((
            i,
            Box::new(move |c| {
                c.steps = v;
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "lr"), args.lr) {
        settings.push((
            i,
            Box::new(move |c| {
                c.lr = Some(v);
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "samples"), args.samples) {
        settings.push((
            i,
            Box::new(move |c| {
                c.n_samples = v;
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "seeds"), args.seeds.clone()) {
        settings.push((
            i,
            Box::new(move |c| {
                c.seeds = v.0;
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "out"), args.out.clone()) {
        settings.push((
            i,
            Box::new(move |c| {
                c.out = v;
                Ok(())
            }),
        ));
    }
    if let (Some(i), Some(v)) = (last_index(m, "radon_csv"), args.radon_csv.clone()) {
        settings.push((
            i,
            Box::new(move |c| {
                c.radon_csv = Some(v);
                Ok(())
            }),
        ));
    }
    if let Some(indices) = m.indices_of("config") {
        for (i, path) in indices.zip(args.config.iter().cloned()) {
            let file = ConfigFile::load(&path)?;
            settings.push((i, Box::new(move |c| file.apply(c, &path))));
        }
    }
    settings.sort_by_key(|(i, _)| *i);
    for (_, apply) in settings {
        apply(&mut cfg)?;
    }
    validate(&cfg)?;
    Ok(cfg)
}

fn validate(cfg: &RunConfig) -> Result<(), CliError> {
    if cfg.tasks.is_empty() {
        return Err(CliError::Usage(
            "no task given (use --task or a config file)".into(),
        ));
    }
    if cfg.surrogates.is_empty() {
        return Err(CliError::Usage("no surrogate given".into()));
    }
    if cfg.seeds.is_empty() {
        return Err(CliError::Usage("no seeds given".into()));
    }
    if cfg.n_samples == 0 || cfg.final_elbo_samples == 0 || cfg.record_every == 0 {
        return Err(CliError::Usage(
            "sample counts and record interval must be positive".into(),
        ));
    }
    Ok(())
}

/// Parse a `run` command line (including the program name) into a [`RunConfig`].
pub fn parse_flags<I, T>(argv: I) -> Result<RunConfig, CliError>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = Cli::command()
        .try_get_matches_from(argv)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    match matches.subcommand() {
        Some(("run", m)) => run_config_from_matches(m),
        _ => Err(CliError::Usage("expected the `run` subcommand".into())),
    }
}

/// One (task, surrogate, seed) outcome. Only deterministic quantities appear here.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub task: TaskId,
    pub surrogate: SurrogateKind,
    pub seed: u64,
    pub status: RunStatus,
    pub negative_elbo: Option<f64>,
    pub negative_elbo_se: Option<f64>,
    /// Mean over latents of |q mean - oracle mean| / oracle SD.
    pub mean_error: Option<f64>,
    /// Mean over latents of |q SD - oracle SD| / oracle SD.
    pub sd_error: Option<f64>,
    pub oracle: OracleKind,
    pub oracle_reliable: Option<bool>,
    pub steps_run: usize,
    pub converged: bool,
    pub message: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RunStatus {
    Ok,
    Diverged,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub task: TaskId,
    pub surrogate: SurrogateKind,
    pub seed: u64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
struct OracleMoments {
    means: Vec<f64>,
    sds: Vec<f64>,
    reliable: bool,
}

fn build_task(id: TaskId, cfg: &RunConfig) -> Result<Task, CliError> {
    let mut task = Task::new(id);
    if let Some(sde) = &cfg.sde {
        if matches!(id, TaskId::Br | TaskId::Brg | TaskId::Lz | TaskId::Lzg) {
            task = task.with_sde(sde.clone());
        }
    }
    if let (TaskId::Radon, Some(path)) = (id, &cfg.radon_csv) {
        task = task.with_radon(RadonSource::Records(RadonData::from_csv(path)?));
    }
    Ok(task)
}

fn oracle_moments(
    task: &Task,
    data: &crate::tasks::TaskData,
    model: &crate::model::JointModel,
    cfg: &RunConfig,
    seed: u64,
) -> Result<Option<OracleMoments>, CliError> {
    match task.id.oracle() {
        OracleKind::Kalman => {
            let (spec, obs) = task
                .kalman_problem(data)
                .ok_or_else(|| CliError::Usage("task has no linear-Gaussian form".into()))?;
            let k = kalman_filter_smoother(&spec, &obs)?;
            Ok(Some(OracleMoments {
                sds: k.smoothed_sds(),
                means: k.smoothed_means,
                reliable: true,
            }))
        }
        OracleKind::Metropolis => {
            let mh = metropolis_sample(
                model,
                &MetropolisConfig {
                    seed,
                    ..cfg.metropolis
                },
            )?;
            Ok(Some(OracleMoments {
                means: mh.means(),
                sds: mh.sds(),
                reliable: mh.reliable,
            }))
        }
        OracleKind::None => Ok(None),
    }
}

struct RunOutput {
    row: ResultRow,
    timing: TimingRow,
    trajectory: Vec<crate::inference::TrajectoryPoint>,
}

fn failed_row(
    task: TaskId,
    kind: SurrogateKind,
    seed: u64,
    status: RunStatus,
    message: String,
) -> ResultRow {
    ResultRow {
        task,
        surrogate: kind,
        seed,
        status,
        negative_elbo: None,
        negative_elbo_se: None,
        mean_error: None,
        sd_error: None,
        oracle: task.oracle(),
        oracle_reliable: None,
        steps_run: 0,
        converged: false,
        message,
    }
}

fn run_one(
    model: &crate::model::JointModel,
    oracle: &Option<OracleMoments>,
    task: TaskId,
    kind: SurrogateKind,
    seed: u64,
    cfg: &RunConfig,
) -> RunOutput {
    let train = TrainConfig {
        steps: cfg.steps,
        lr: cfg.lr,
        n_samples: cfg.n_samples,
        seed,
        record_every: cfg.record_every,
        early_stopping: cfg.early_stopping,
        average_last: cfg.average_last,
    };
    let result = match fit(model, kind, &train) {
        Ok(r) => r,
        Err(e) => {
            return RunOutput {
                row: failed_row(task, kind, seed, RunStatus::Failed, e.to_string()),
                timing: TimingRow {
                    task,
                    surrogate: kind,
                    seed,
                    wall_time_s: 0.0,
                },
                trajectory: Vec::new(),
            }
        }
    };
    let timing = TimingRow {
        task,
        surrogate: kind,
        seed,
        wall_time_s: result.wall_time_s,
    };
    let mut row = failed_row(task, kind, seed, RunStatus::Ok, String::new());
    row.steps_run = result.steps_run;
    row.converged = result.converged;
    if let Some(msg) = &result.diverged {
        row.status = RunStatus::Diverged;
        row.message = msg.clone();
    }
    let eval_seed = seed.wrapping_add(EVAL_SEED_OFFSET);
    match elbo_estimate(
        model,
        &result.surrogate,
        &result.params,
        cfg.final_elbo_samples,
        eval_seed,
    ) {
        Ok(e) => {
            row.negative_elbo = Some(-e.value);
            row.negative_elbo_se = Some(e.standard_error());
        }
        Err(e) => {
            row.status = RunStatus::Failed;
            row.message = format!("final ELBO: {e}");
        }
    }
    if let Some(o) = oracle {
        row.oracle_reliable = Some(o.reliable);
        match surrogate_moments(&result.surrogate, &result.params, MOMENT_DRAWS, eval_seed) {
            Ok(q) => {
                let n = q.means.len() as f64;
                row.mean_error = Some(
                    q.means
                        .iter()
                        .zip(&o.means)
                        .zip(&o.sds)
                        .map(|((m, t), s)| (m - t).abs() / s)
                        .sum::<f64>()
                        / n,
                );
                row.sd_error = Some(
                    q.sds
                        .iter()
                        .zip(&o.sds)
                        .map(|(s, t)| (s - t).abs() / t)
                        .sum::<f64>()
                        / n,
                );
            }
            Err(e) => {
                row.status = RunStatus::Failed;
                row.message = format!("posterior moments: {e}");
            }
        }
    }
    RunOutput {
        row,
        timing,
        trajectory: result.trajectory,
    }
}

#[derive(Serialize)]
struct Meta<'a> {
    version: &'static str,
    crates: BTreeMap<&'static str, &'static str>,
    config: &'a RunConfig,
    oracles: BTreeMap<&'static str, &'static str>,
    metropolis: MetropolisConfig,
    moment_draws: usize,
}

/// Run every (task, surrogate, seed) combination and write
/// `results.csv`, `timings.csv`, `summary.csv`, `meta.json` and one
/// trajectory file per run into `cfg.out`.
pub fn run_benchmark(cfg: &RunConfig) -> Result<Vec<ResultRow>, CliError> {
    validate(cfg)?;
    fs::create_dir_all(&cfg.out)?;
    let mut jobs = Vec::new();
    for &task in &cfg.tasks {
        for &seed in &cfg.seeds {
            jobs.push((task, seed));
        }
    }
    let outputs: Vec<Vec<RunOutput>> = jobs
        .par_iter()
        .map(|&(id, seed)| -> Vec<RunOutput> {
            let prepared = (|| -> Result<_, CliError> {
                let task = build_task(id, cfg)?;
                let data = task.generate_data(seed)?;
                let model = task.posterior_model(&data)?;
                let oracle = oracle_moments(&task, &data, &model, cfg, seed)?;
                Ok((model, oracle))
            })();
            match prepared {
                Ok((model, oracle)) => cfg
                    .surrogates
                    .iter()
                    .map(|&kind| {
                        let out = run_one(&model, &oracle, id, kind, seed, cfg);
                        eprintln!(
                            "{id} {kind} seed {seed}: {:?} negative ELBO {}",
                            out.row.status,
                            out.row
                                .negative_elbo
                                .map_or("-".into(), |v| format!("{v:.3}"))
                        );
                        out
                    })
                    .collect(),
                Err(e) => cfg
                    .surrogates
                    .iter()
                    .map(|&kind| RunOutput {
                        row: failed_row(id, kind, seed, RunStatus::Failed, e.to_string()),
                        timing: TimingRow {
                            task: id,
                            surrogate: kind,
                            seed,
                            wall_time_s: 0.0,
                        },
                        trajectory: Vec::new(),
                    })
                    .collect(),
            }
        })
        .collect();

    let mut rows = Vec::new();
    let mut results = csv::Writer::from_path(cfg.out.join("results.csv"))?;
    let mut timings = csv::Writer::from_path(cfg.out.join("timings.csv"))?;
    for out in outputs.into_iter().flatten() {
        let r = &out.row;
        let name = format!("trajectory_{}_{}_{}.csv", r.task, r.surrogate, r.seed);
        write_trajectory_csv(&cfg.out.join(name), &out.trajectory)?;
        results.serialize(r)?;
        timings.serialize(&out.timing)?;
        rows.push(out.row);
    }
    results.flush()?;
    timings.flush()?;

    let meta = Meta {
        version: env!("CARGO_PKG_VERSION"),
        crates: BTreeMap::from([("rand_chacha", "0.9"), ("nalgebra", "0.35")]),
        config: cfg,
        oracles: cfg
            .tasks
            .iter()
            .map(|t| (t.as_str(), t.oracle().as_str()))
            .collect(),
        metropolis: cfg.metropolis,
        moment_draws: MOMENT_DRAWS,
    };
    fs::write(
        cfg.out.join("meta.json"),
        serde_json::to_string_pretty(&meta)?,
    )?;
    let summary = summarize_rows(&rows);
    write_summary(&cfg.out, &summary)?;
    Ok(rows)
}

/// Aggregate over seeds for one (task, surrogate).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub task: TaskId,
    pub surrogate: SurrogateKind,
    pub runs: usize,
    pub failed: usize,
    pub negative_elbo_mean: Option<f64>,
    pub negative_elbo_se: Option<f64>,
    pub mean_error_mean: Option<f64>,
    pub mean_error_se: Option<f64>,
    pub sd_error_mean: Option<f64>,
    pub sd_error_se: Option<f64>,
    /// Lowest mean negative ELBO among the task's surrogates.
    pub best: bool,
}

/// Mean and standard error (sample SD / sqrt(n); 0 for a single value).
pub fn mean_and_se(values: &[f64]) -> Option<(f64, f64)> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() == 1 {
        return Some((mean, 0.0));
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Some((mean, (var / n).sqrt()))
}

pub fn summarize_rows(rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(TaskId, SurrogateKind), Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        groups.entry((r.task, r.surrogate)).or_default().push(r);
    }
    let mut out: Vec<SummaryRow> = groups
        .into_iter()
        .map(|((task, surrogate), rs)| {
            let ok: Vec<&&ResultRow> = rs.iter().filter(|r| r.status == RunStatus::Ok).collect();
            let collect = |f: fn(&ResultRow) -> Option<f64>| -> Vec<f64> {
                ok.iter().filter_map(|r| f(r)).collect()
            };
            let elbo = mean_and_se(&collect(|r| r.negative_elbo));
            let m = mean_and_se(&collect(|r| r.mean_error));
            let sd = mean_and_se(&collect(|r| r.sd_error));
            SummaryRow {
                task,
                surrogate,
                runs: rs.len(),
                failed: rs.len() - ok.len(),
                negative_elbo_mean: elbo.map(|v| v.0),
                negative_elbo_se: elbo.map(|v| v.1),
                mean_error_mean: m.map(|v| v.0),
                mean_error_se: m.map(|v| v.1),
                sd_error_mean: sd.map(|v| v.0),
                sd_error_se: sd.map(|v| v.1),
                best: false,
            }
        })
        .collect();
    let mut best: BTreeMap<TaskId, (f64, usize)> = BTreeMap::new();
    for (k, s) in out.iter().enumerate() {
        if let Some(v) = s.negative_elbo_mean {
            let e = best.entry(s.task).or_insert((v, k));
            if v < e.0 {
                *e = (v, k);
            }
        }
    }
    for (_, k) in best.values() {
        out[*k].best = true;
    }
    out
}

fn fmt_pm(mean: Option<f64>, se: Option<f64>) -> String {
    match (mean, se) {
        (Some(m), Some(s)) => format!("{m:.3} ± {s:.3}"),
        _ => "-".into(),
    }
}

/// Plain-text table; `*` marks the best surrogate per task.
pub fn format_summary(rows: &[SummaryRow]) -> String {
    let mut s = format!(
        "{:<6} {:<11} {:>5} {:>24} {:>18} {:>18}\n",
        "task", "surrogate", "runs", "negative ELBO", "M", "SD"
    );
    for r in rows {
        let elbo = format!(
            "{}{}",
            fmt_pm(r.negative_elbo_mean, r.negative_elbo_se),
            if r.best { " *" } else { "  " }
        );
        s += &format!(
            "{:<6} {:<11} {:>5} {:>24} {:>18} {:>18}\n",
            r.task.as_str(),
            r.surrogate.as_str(),
            r.runs,
            elbo,
            fmt_pm(r.mean_error_mean, r.mean_error_se),
            fmt_pm(r.sd_error_mean, r.sd_error_se)
        );
    }
    s
}

fn write_summary(dir: &Path, rows: &[SummaryRow]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(dir.join("summary.csv"))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    fs::write(dir.join("summary.txt"), format_summary(rows))?;
    Ok(())
}

pub fn read_results(dir: &Path) -> Result<Vec<ResultRow>, CliError> {
    let mut r = csv::Reader::from_path(dir.join("results.csv"))?;
    Ok(r.deserialize().collect::<Result<Vec<ResultRow>, _>>()?)
}

/// Summarize `dir/results.csv`, writing `summary.csv` and `summary.txt`.
pub fn summarize(dir: &Path) -> Result<Vec<SummaryRow>, CliError> {
    let path = dir.join("results.csv");
    if !path.exists() {
        return Err(CliError::EmptyResults(dir.to_path_buf()));
    }
    let rows = read_results(dir)?;
    if rows.is_empty() {
        return Err(CliError::EmptyResults(dir.to_path_buf()));
    }
    let summary = summarize_rows(&rows);
    write_summary(dir, &summary)?;
    Ok(summary)
}

/// Entry point for the binary; returns the process exit code.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let matches = match Cli::command().try_get_matches_from(argv) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let outcome = match matches.subcommand() {
        Some(("run", m)) => run_config_from_matches(m).and_then(|cfg| {
            let rows = run_benchmark(&cfg)?;
            print!("{}", format_summary(&summarize_rows(&rows)));
            eprintln!("wrote {} rows to {}", rows.len(), cfg.out.display());
            Ok(())
        }),
        Some(("summarize", m)) => {
            let dir: &PathBuf = m.get_one("dir").expect("required argument");
            summarize(dir).map(|s| print!("{}", format_summary(&s)))
        }
        _ => Err(CliError::Usage("expected a subcommand".into())),
    };
    match outcome {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            2
        }
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}
