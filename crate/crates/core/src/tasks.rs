//! Benchmark models and their data generators.
//!
//! | id      | model                                              | oracle     |
//! |---------|----------------------------------------------------|------------|
//! | `br`    | Brownian motion, fixed scales                      | Kalman     |
//! | `brg`   | Brownian motion, LogNormal(0, 2) scale priors      | Metropolis |
//! | `lz`    | stochastic Lorenz system, fixed scales             | none       |
//! | `lzg`   | stochastic Lorenz system, LogNormal(-1, 1) priors  | none       |
//! | `es`    | Eight Schools                                      | Metropolis |
//! | `radon` | hierarchical linear regression                     | Metropolis |

use std::fmt;
use std::io::Read;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::distributions::Family;
use crate::model::{build_joint, JointModel, Link, ModelError, RandomVariableNode, Trace};
use crate::oracles::LinearGaussianChainSpec;

const EIGHT_SCHOOLS_CSV: &str = include_str!("../data/eight_schools.csv");

pub const INNOVATION_SCALE: &str = "innovation_scale";
pub const OBSERVATION_SCALE: &str = "observation_scale";

#[derive(Debug, Error)]
pub enum TaskError {
    #[error("invalid task config: {0}")]
    InvalidConfig(String),
    #[error("malformed record {line}: {reason}")]
    MalformedRecord { line: usize, reason: String },
    #[error("unknown task `{0}` (expected br, brg, lz, lzg, es or radon)")]
    UnknownTask(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskId {
    Br,
    Brg,
    Lz,
    Lzg,
    Es,
    Radon,
}

impl TaskId {
    pub const ALL: [TaskId; 6] = [
        TaskId::Br,
        TaskId::Brg,
        TaskId::Lz,
        TaskId::Lzg,
        TaskId::Es,
        TaskId::Radon,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskId::Br => "br",
            TaskId::Brg => "brg",
            TaskId::Lz => "lz",
            TaskId::Lzg => "lzg",
            TaskId::Es => "es",
            TaskId::Radon => "radon",
        }
    }

    pub fn oracle(self) -> OracleKind {
        match self {
            TaskId::Br => OracleKind::Kalman,
            TaskId::Brg | TaskId::Es | TaskId::Radon => OracleKind::Metropolis,
            TaskId::Lz | TaskId::Lzg => OracleKind::None,
        }
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskId {
    type Err = TaskError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        TaskId::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| TaskError::UnknownTask(s.to_string()))
    }
}

/// Source of reference posterior statistics for a task.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OracleKind {
    Kalman,
    Metropolis,
    None,
}

impl OracleKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OracleKind::Kalman => "kalman",
            OracleKind::Metropolis => "metropolis",
            OracleKind::None => "none",
        }
    }
}

/// Euler–Maruyama discretization settings shared by the SDE tasks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SdeTaskConfig {
    pub steps: usize,
    pub dt: f64,
    pub innovation_scale: f64,
    pub observation_scale: f64,
    /// Observed steps; empty means the default first-third/last-third pattern.
    pub mask: Vec<bool>,
    /// Added to the per-run seed when simulating data.
    pub seed: u64,
}

impl Default for SdeTaskConfig {
    fn default() -> Self {
        SdeTaskConfig {
            mask: Vec::new(),
            ..SdeTaskConfig::brownian()
        }
    }
}

/// Observe the first and last thirds, leaving the middle unobserved.
pub fn middle_unobserved_mask(steps: usize) -> Vec<bool> {
    let third = steps / 3;
    (0..steps)
        .map(|t| t < third || t >= steps - third)
        .collect()
}

impl SdeTaskConfig {
    pub fn brownian() -> Self {
        SdeTaskConfig {
            steps: 30,
            dt: 0.01,
            innovation_scale: 0.1,
            observation_scale: 0.15,
            mask: middle_unobserved_mask(30),
            seed: 0,
        }
    }

    pub fn lorenz() -> Self {
        SdeTaskConfig {
            steps: 30,
            dt: 0.02,
            innovation_scale: 0.1,
            observation_scale: 1.0,
            mask: middle_unobserved_mask(30),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TaskError> {
        if self.steps == 0 {
            return Err(TaskError::InvalidConfig("steps must be positive".into()));
        }
        for (name, v) in [
            ("dt", self.dt),
            ("innovation_scale", self.innovation_scale),
            ("observation_scale", self.observation_scale),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(TaskError::InvalidConfig(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        if self.mask.len() != self.steps {
            return Err(TaskError::InvalidConfig(format!(
                "mask has {} entries for {} steps",
                self.mask.len(),
                self.steps
            )));
        }
        Ok(())
    }

    /// Fill an empty mask with the default pattern and validate.
    fn normalized(&self) -> Result<SdeTaskConfig, TaskError> {
        let mut c = self.clone();
        if c.mask.is_empty() {
            c.mask = middle_unobserved_mask(c.steps);
        }
        c.validate()?;
        Ok(c)
    }
}

pub fn state_name(coord: &str, t: usize) -> String {
    format!("{coord}[{t}]")
}

pub fn obs_name(t: usize) -> String {
    format!("obs[{t}]")
}

fn scale_link(fixed: Option<f64>, factor: f64) -> impl Fn(&mut Tape, Var) -> Var + Clone {
    move |tape, global| match fixed {
        Some(s) => tape.constant(s * factor),
        None => tape.mul_const(global, factor),
    }
}

/// Brownian motion `x[t] ~ N(x[t-1], sigma sqrt(dt))` with `x[-1] = 0` and
/// observations `obs[t] ~ N(x[t], sigma_obs)` at masked steps.
pub fn make_brownian(config: &SdeTaskConfig, with_globals: bool) -> Result<JointModel, TaskError> {
    let c = config.normalized()?;
    let sqrt_dt = c.dt.sqrt();
    let mut nodes = Vec::new();
    let (innov, obs) = if with_globals {
        nodes.push(
            RandomVariableNode::root(INNOVATION_SCALE, Family::LogNormal, &[0.0, 2.0]).global(),
        );
        nodes.push(
            RandomVariableNode::root(OBSERVATION_SCALE, Family::LogNormal, &[0.0, 2.0]).global(),
        );
        (None, None)
    } else {
        (Some(c.innovation_scale), Some(c.observation_scale))
    };
    let step_scale = scale_link(innov, sqrt_dt);
    let obs_scale = scale_link(obs, 1.0);
    for t in 0..c.steps {
        let mut parents: Vec<String> = Vec::new();
        if t > 0 {
            parents.push(state_name("x", t - 1));
        }
        if with_globals {
            parents.push(INNOVATION_SCALE.into());
        }
        let refs: Vec<&str> = parents.iter().map(String::as_str).collect();
        let scale = step_scale.clone();
        let has_prev = t > 0;
        nodes.push(RandomVariableNode::new(
            state_name("x", t),
            Family::Normal,
            &refs,
            Link::new(move |tape, p| {
                let loc = if has_prev { p[0] } else { tape.constant(0.0) };
                let g = if with_globals { p[p.len() - 1] } else { loc };
                Ok(vec![loc, scale(tape, g)])
            }),
        ));
        if c.mask[t] {
            let x = state_name("x", t);
            let mut parents = vec![x.as_str()];
            if with_globals {
                parents.push(OBSERVATION_SCALE);
            }
            let scale = obs_scale.clone();
            nodes.push(RandomVariableNode::new(
                obs_name(t),
                Family::Normal,
                &parents,
                Link::new(move |tape, p| {
                    let g = p[p.len() - 1];
                    Ok(vec![p[0], scale(tape, g)])
                }),
            ));
        }
    }
    Ok(build_joint(nodes)?)
}

/// Lorenz drift `(10 (y - x), x (28 - z) - y, x y - 8/3 z)`.
pub fn lorenz_drift(x: f64, y: f64, z: f64) -> [f64; 3] {
    [10.0 * (y - x), x * (28.0 - z) - y, x * y - 8.0 / 3.0 * z]
}

fn lorenz_drift_var(tape: &mut Tape, x: Var, y: Var, z: Var) -> [Var; 3] {
    let ymx = tape.sub(y, x);
    let fx = tape.mul_const(ymx, 10.0);
    let nz = tape.neg(z);
    let twenty_eight_minus_z = tape.add_const(nz, 28.0);
    let xz = tape.mul(x, twenty_eight_minus_z);
    let fy = tape.sub(xz, y);
    let xy = tape.mul(x, y);
    let bz = tape.mul_const(z, 8.0 / 3.0);
    let fz = tape.sub(xy, bz);
    [fx, fy, fz]
}

/// Euler–Maruyama Lorenz system with the first coordinate observed at masked steps.
pub fn make_lorenz(config: &SdeTaskConfig, with_globals: bool) -> Result<JointModel, TaskError> {
    let c = config.normalized()?;
    let dt = c.dt;
    let sqrt_dt = dt.sqrt();
    let mut nodes = Vec::new();
    let (innov, obs) = if with_globals {
        nodes.push(
            RandomVariableNode::root(INNOVATION_SCALE, Family::LogNormal, &[-1.0, 1.0]).global(),
        );
        nodes.push(
            RandomVariableNode::root(OBSERVATION_SCALE, Family::LogNormal, &[-1.0, 1.0]).global(),
        );
        (None, None)
    } else {
        (Some(c.innovation_scale), Some(c.observation_scale))
    };
    let step_scale = scale_link(innov, sqrt_dt);
    let obs_scale = scale_link(obs, 1.0);
    let coords = ["x", "y", "z"];
    for t in 0..c.steps {
        for (k, coord) in coords.iter().enumerate() {
            if t == 0 {
                nodes.push(RandomVariableNode::root(
                    state_name(coord, 0),
                    Family::Normal,
                    &[0.0, 1.0],
                ));
                continue;
            }
            let mut parents: Vec<String> = coords.iter().map(|c| state_name(c, t - 1)).collect();
            if with_globals {
                parents.push(INNOVATION_SCALE.into());
            }
            let refs: Vec<&str> = parents.iter().map(String::as_str).collect();
            let scale = step_scale.clone();
            nodes.push(RandomVariableNode::new(
                state_name(coord, t),
                Family::Normal,
                &refs,
                Link::new(move |tape, p| {
                    let drift = lorenz_drift_var(tape, p[0], p[1], p[2]);
                    let step = tape.mul_const(drift[k], dt);
                    let loc = tape.add(p[k], step);
                    let g = p[p.len() - 1];
                    Ok(vec![loc, scale(tape, g)])
                }),
            ));
        }
        if c.mask[t] {
            let x = state_name("x", t);
            let mut parents = vec![x.as_str()];
            if with_globals {
                parents.push(OBSERVATION_SCALE);
            }
            let scale = obs_scale.clone();
            nodes.push(RandomVariableNode::new(
                obs_name(t),
                Family::Normal,
                &parents,
                Link::new(move |tape, p| {
                    let g = p[p.len() - 1];
                    Ok(vec![p[0], scale(tape, g)])
                }),
            ));
        }
    }
    Ok(build_joint(nodes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchoolsData {
    pub y: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Deserialize)]
struct SchoolRow {
    #[allow(dead_code)]
    school: String,
    y: f64,
    sigma: f64,
}

impl SchoolsData {
    /// The bundled classic dataset.
    pub fn classic() -> Self {
        Self::from_reader(EIGHT_SCHOOLS_CSV.as_bytes())
            .expect("bundled eight-schools data is valid")
    }

    /// Read `school,y,sigma` rows.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, TaskError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut y = Vec::new();
        let mut sigma = Vec::new();
        for (k, row) in r.deserialize::<SchoolRow>().enumerate() {
            let row = row?;
            if !(row.sigma > 0.0) {
                return Err(TaskError::MalformedRecord {
                    line: k + 2,
                    reason: format!("sigma must be positive, got {}", row.sigma),
                });
            }
            y.push(row.y);
            sigma.push(row.sigma);
        }
        Ok(SchoolsData { y, sigma })
    }
}

/// `mu ~ N(0, 100)`, `tau ~ LogNormal(5, 1)`, `theta[i] ~ N(mu, tau)`,
/// `y[i] ~ N(theta[i], sigma_i)`, conditioned on the effects.
pub fn make_eight_schools(data: &SchoolsData) -> Result<JointModel, TaskError> {
    if data.y.len() != data.sigma.len() || data.y.is_empty() {
        return Err(TaskError::InvalidConfig(
            "schools data needs matching, nonempty y and sigma".into(),
        ));
    }
    let prior = eight_schools_prior(&data.sigma)?;
    let obs: Vec<(String, f64)> = data
        .y
        .iter()
        .enumerate()
        .map(|(i, &y)| (format!("y[{i}]"), y))
        .collect();
    Ok(prior.condition(obs.iter().map(|(n, v)| (n.as_str(), *v)))?)
}

fn eight_schools_prior(sigma: &[f64]) -> Result<JointModel, TaskError> {
    let mut nodes = vec![
        RandomVariableNode::root("mu", Family::Normal, &[0.0, 100.0]).global(),
        RandomVariableNode::root("tau", Family::LogNormal, &[5.0, 1.0]).global(),
    ];
    for (i, &s) in sigma.iter().enumerate() {
        nodes.push(RandomVariableNode::new(
            format!("theta[{i}]"),
            Family::Normal,
            &["mu", "tau"],
            Link::new(|_, p| Ok(vec![p[0], p[1]])),
        ));
        nodes.push(RandomVariableNode::new(
            format!("y[{i}]"),
            Family::Normal,
            &[format!("theta[{i}]").as_str()],
            Link::new(move |tape, p| Ok(vec![p[0], tape.constant(s)])),
        ));
    }
    Ok(build_joint(nodes)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RadonRecord {
    pub county: usize,
    pub log_uranium: f64,
    pub floor: u8,
    pub county_mean_floor: f64,
    pub log_radon: f64,
}

/// Validated radon records with a dense county index.
#[derive(Debug, Clone, PartialEq)]
pub struct RadonData {
    pub records: Vec<RadonRecord>,
    pub counties: usize,
}

impl RadonData {
    pub fn new(records: Vec<RadonRecord>) -> Result<Self, TaskError> {
        if records.is_empty() {
            return Err(TaskError::InvalidConfig(
                "radon data needs at least one record".into(),
            ));
        }
        for (k, r) in records.iter().enumerate() {
            if r.floor > 1 {
                return Err(TaskError::MalformedRecord {
                    line: k + 2,
                    reason: format!("floor must be 0 or 1, got {}", r.floor),
                });
            }
            if ![r.log_uranium, r.county_mean_floor, r.log_radon]
                .iter()
                .all(|v| v.is_finite())
            {
                return Err(TaskError::MalformedRecord {
                    line: k + 2,
                    reason: "non-finite value".into(),
                });
            }
        }
        let counties = records.iter().map(|r| r.county).max().unwrap_or(0) + 1;
        Ok(RadonData { records, counties })
    }

    /// Read `county,log_uranium,floor,county_mean_floor,log_radon` rows.
    pub fn from_reader<R: Read>(reader: R) -> Result<Self, TaskError> {
        let mut r = csv::Reader::from_reader(reader);
        let mut records = Vec::new();
        for (k, row) in r.deserialize::<RadonRecord>().enumerate() {
            records.push(row.map_err(|e| TaskError::MalformedRecord {
                line: k + 2,
                reason: e.to_string(),
            })?);
        }
        Self::new(records)
    }

    pub fn from_csv(path: &Path) -> Result<Self, TaskError> {
        Self::from_reader(std::fs::File::open(path)?)
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), TaskError> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Synthetic covariates: per-county log-uranium, Bernoulli floors and
    /// county floor means. `log_radon` is left at 0 for the generator to fill.
    pub fn synthetic_design(
        counties: usize,
        per_county: usize,
        seed: u64,
    ) -> Result<Self, TaskError> {
        if counties == 0 || per_county == 0 {
            return Err(TaskError::InvalidConfig(
                "need at least one county and one record each".into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(3);
        let mut records = Vec::with_capacity(counties * per_county);
        for c in 0..counties {
            let u: f64 = 0.5 * rng.sample::<f64, _>(StandardNormal);
            let floors: Vec<u8> = (0..per_county)
                .map(|_| rng.random_bool(0.3) as u8)
                .collect();
            let mean = floors.iter().map(|&f| f as f64).sum::<f64>() / per_county as f64;
            for f in floors {
                records.push(RadonRecord {
                    county: c,
                    log_uranium: u,
                    floor: f,
                    county_mean_floor: mean,
                    log_radon: 0.0,
                });
            }
        }
        Self::new(records)
    }
}

fn radon_prior(data: &RadonData) -> Result<JointModel, TaskError> {
    let mut nodes = vec![
        RandomVariableNode::root("mu", Family::Normal, &[0.0, 1.0]).global(),
        RandomVariableNode::root("tau", Family::HalfNormal, &[1.0]).global(),
    ];
    for c in 0..data.counties {
        nodes.push(RandomVariableNode::new(
            format!("theta[{c}]"),
            Family::Normal,
            &["mu", "tau"],
            Link::new(|_, p| Ok(vec![p[0], p[1]])),
        ));
    }
    for k in 1..=3 {
        nodes.push(
            RandomVariableNode::root(format!("beta[{k}]"), Family::Normal, &[0.0, 1.0]).global(),
        );
    }
    nodes.push(RandomVariableNode::root("sigma", Family::HalfNormal, &[1.0]).global());
    for (j, r) in data.records.iter().enumerate() {
        let (z, x, xbar) = (r.log_uranium, r.floor as f64, r.county_mean_floor);
        let theta = format!("theta[{}]", r.county);
        nodes.push(RandomVariableNode::new(
            format!("log_radon[{j}]"),
            Family::Normal,
            &["beta[1]", "beta[2]", "beta[3]", theta.as_str(), "sigma"],
            Link::new(move |tape, p| -> Result<Vec<Var>, AdError> {
                let a = tape.mul_const(p[0], z);
                let b = tape.mul_const(p[1], x);
                let c = tape.mul_const(p[2], xbar);
                let loc = tape.sum(&[a, b, c, p[3]]);
                Ok(vec![loc, p[4]])
            }),
        ));
    }
    Ok(build_joint(nodes)?)
}

/// Hierarchical regression conditioned on the records' `log_radon` values.
pub fn make_radon(data: &RadonData) -> Result<JointModel, TaskError> {
    let prior = radon_prior(data)?;
    let obs: Vec<(String, f64)> = data
        .records
        .iter()
        .enumerate()
        .map(|(j, r)| (format!("log_radon[{j}]"), r.log_radon))
        .collect();
    Ok(prior.condition(obs.iter().map(|(n, v)| (n.as_str(), *v)))?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum RadonSource {
    /// Synthetic design with this many counties and records per county.
    Synthetic { counties: usize, per_county: usize },
    /// Externally supplied records, observed as-is.
    Records(RadonData),
}

impl Default for RadonSource {
    fn default() -> Self {
        RadonSource::Synthetic {
            counties: 8,
            per_county: 6,
        }
    }
}

/// A benchmark task: model structure plus the settings needed to generate data.
#[derive(Debug, Clone)]
pub struct Task {
    pub id: TaskId,
    pub sde: SdeTaskConfig,
    pub schools: SchoolsData,
    pub radon: RadonSource,
}

/// Observations and, for simulated tasks, the latent values that produced them.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskData {
    pub observations: IndexMap<String, f64>,
    pub truth: Option<Trace>,
    /// Radon records with simulated responses, for the radon task.
    pub radon: Option<RadonData>,
}

impl Task {
    pub fn new(id: TaskId) -> Self {
        let sde = match id {
            TaskId::Lz | TaskId::Lzg => SdeTaskConfig::lorenz(),
            _ => SdeTaskConfig::brownian(),
        };
        Task {
            id,
            sde,
            schools: SchoolsData::classic(),
            radon: RadonSource::default(),
        }
    }

    pub fn with_sde(mut self, sde: SdeTaskConfig) -> Self {
        self.sde = sde;
        self
    }

    pub fn with_radon(mut self, radon: RadonSource) -> Self {
        self.radon = radon;
        self
    }

    fn radon_design(&self) -> Result<RadonData, TaskError> {
        match &self.radon {
            RadonSource::Synthetic {
                counties,
                per_county,
            } => RadonData::synthetic_design(*counties, *per_county, 0),
            RadonSource::Records(d) => Ok(d.clone()),
        }
    }

    /// The unconditioned generative model.
    pub fn prior(&self) -> Result<JointModel, TaskError> {
        match self.id {
            TaskId::Br => make_brownian(&self.sde, false),
            TaskId::Brg => make_brownian(&self.sde, true),
            TaskId::Lz => make_lorenz(&self.sde, false),
            TaskId::Lzg => make_lorenz(&self.sde, true),
            TaskId::Es => eight_schools_prior(&self.schools.sigma),
            TaskId::Radon => radon_prior(&self.radon_design()?),
        }
    }

    /// Simulate (or load) observations for one run.
    ///
    /// SDE tasks simulate with the configured fixed scales, also for the
    /// variants that place priors on them. Eight Schools and externally
    /// supplied radon records return their fixed data without a truth trace.
    pub fn generate_data(&self, seed: u64) -> Result<TaskData, TaskError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(self.sde.seed));
        rng.set_stream(2);
        match self.id {
            TaskId::Br | TaskId::Brg | TaskId::Lz | TaskId::Lzg => {
                let fixed = match self.id {
                    TaskId::Br | TaskId::Brg => make_brownian(&self.sde, false)?,
                    _ => make_lorenz(&self.sde, false)?,
                };
                let sim = fixed.sample_forward_with(&mut rng)?;
                let prior = self.prior()?;
                let mut observations = IndexMap::new();
                let mut truth = IndexMap::new();
                if matches!(self.id, TaskId::Brg | TaskId::Lzg) {
                    truth.insert(INNOVATION_SCALE.to_string(), self.sde.innovation_scale);
                    truth.insert(OBSERVATION_SCALE.to_string(), self.sde.observation_scale);
                }
                for (name, &v) in sim.values() {
                    if name.starts_with("obs[") {
                        observations.insert(name.clone(), v);
                    } else {
                        truth.insert(name.clone(), v);
                    }
                }
                debug_assert!(observations.keys().all(|k| prior.index_of(k).is_some()));
                Ok(TaskData {
                    observations,
                    truth: Some(Trace::from_values(truth)),
                    radon: None,
                })
            }
            TaskId::Es => Ok(TaskData {
                observations: self
                    .schools
                    .y
                    .iter()
                    .enumerate()
                    .map(|(i, &y)| (format!("y[{i}]"), y))
                    .collect(),
                truth: None,
                radon: None,
            }),
            TaskId::Radon => match &self.radon {
                RadonSource::Records(d) => Ok(TaskData {
                    observations: d
                        .records
                        .iter()
                        .enumerate()
                        .map(|(j, r)| (format!("log_radon[{j}]"), r.log_radon))
                        .collect(),
                    truth: None,
                    radon: Some(d.clone()),
                }),
                RadonSource::Synthetic { .. } => {
                    let mut design = self.radon_design()?;
                    let prior = radon_prior(&design)?;
                    let sim = prior.sample_forward_with(&mut rng)?;
                    let mut observations = IndexMap::new();
                    let mut truth = IndexMap::new();
                    for (name, &v) in sim.values() {
                        if name.starts_with("log_radon[") {
                            observations.insert(name.clone(), v);
                        } else {
                            truth.insert(name.clone(), v);
                        }
                    }
                    for (r, &y) in design.records.iter_mut().zip(observations.values()) {
                        r.log_radon = y;
                    }
                    Ok(TaskData {
                        observations,
                        truth: Some(Trace::from_values(truth)),
                        radon: Some(design),
                    })
                }
            },
        }
    }

    /// The prior conditioned on `data`.
    pub fn posterior_model(&self, data: &TaskData) -> Result<JointModel, TaskError> {
        let prior = self.prior()?;
        Ok(prior.condition(data.observations.iter().map(|(k, &v)| (k.as_str(), v)))?)
    }

    /// Linear-Gaussian chain description of the BR task and its observations.
    pub fn kalman_problem(
        &self,
        data: &TaskData,
    ) -> Option<(LinearGaussianChainSpec, Vec<Option<f64>>)> {
        if self.id != TaskId::Br {
            return None;
        }
        let c = self.sde.normalized().ok()?;
        let q = c.innovation_scale * c.innovation_scale * c.dt;
        let spec = LinearGaussianChainSpec::uniform(
            c.steps,
            0.0,
            q,
            1.0,
            q,
            c.observation_scale * c.observation_scale,
            c.mask.clone(),
        );
        let obs = (0..c.steps)
            .map(|t| data.observations.get(&obs_name(t)).copied())
            .collect();
        Some((spec, obs))
    }
}

/// Build and condition a task at default settings.
pub fn generate_data(task: TaskId, seed: u64) -> Result<(JointModel, TaskData), TaskError> {
    let t = Task::new(task);
    let data = t.generate_data(seed)?;
    Ok((t.posterior_model(&data)?, data))
}
