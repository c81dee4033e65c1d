//! Reference computations: Kalman filtering and RTS smoothing, conjugate
//! Normal updates, Gaussian KL, discrete enumeration and an adaptive
//! random-walk Metropolis sampler.

use std::io;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tape;
use crate::distributions::{Bijector, Family};
use crate::model::{JointModel, ModelError};
use crate::surrogates::{SurrogateError, SurrogateProgram};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("invalid oracle input: {0}")]
    InvalidSpec(String),
    #[error("state space of {size} exceeds the enumeration limit of {limit}")]
    StateSpaceTooLarge { size: f64, limit: usize },
    #[error("latent `{0}` is continuous; enumeration needs discrete latents")]
    NotDiscrete(String),
    #[error("model has zero posterior mass on every state")]
    ZeroEvidence,
    #[error("no state with finite log-density found for chain {0}")]
    NoValidStart(usize),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("csv output: {0}")]
    Csv(#[from] csv::Error),
    #[error("csv output: {0}")]
    Io(#[from] io::Error),
}

/// Scalar linear-Gaussian state-space model
/// `x_0 ~ N(m0, v0)`, `x_{t+1} = a_t x_t + N(0, q_t)`, `y_t = x_t + N(0, r_t)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearGaussianChainSpec {
    pub initial_mean: f64,
    pub initial_var: f64,
    /// `a_t` for the transition out of step `t`; length `T - 1`.
    pub transition: Vec<f64>,
    /// `q_t`; length `T - 1`.
    pub innovation_var: Vec<f64>,
    /// `r_t`; length `T`.
    pub obs_var: Vec<f64>,
    /// Which steps carry an observation; length `T`.
    pub mask: Vec<bool>,
}

impl LinearGaussianChainSpec {
    /// Constant-coefficient chain of `steps` states.
    pub fn uniform(
        steps: usize,
        initial_mean: f64,
        initial_var: f64,
        transition: f64,
        innovation_var: f64,
        obs_var: f64,
        mask: Vec<bool>,
    ) -> Self {
        LinearGaussianChainSpec {
            initial_mean,
            initial_var,
            transition: vec![transition; steps.saturating_sub(1)],
            innovation_var: vec![innovation_var; steps.saturating_sub(1)],
            obs_var: vec![obs_var; steps],
            mask,
        }
    }

    pub fn steps(&self) -> usize {
        self.obs_var.len()
    }

    pub fn validate(&self) -> Result<(), OracleError> {
        let t = self.steps();
        if t == 0 {
            return Err(OracleError::InvalidSpec(
                "chain needs at least one step".into(),
            ));
        }
        if self.transition.len() + 1 != t
            || self.innovation_var.len() + 1 != t
            || self.mask.len() != t
        {
            return Err(OracleError::InvalidSpec(format!(
                "lengths: transition {}, innovation {}, obs {}, mask {}",
                self.transition.len(),
                self.innovation_var.len(),
                t,
                self.mask.len()
            )));
        }
        let positive = |v: f64| v > 0.0 && v.is_finite();
        if !positive(self.initial_var)
            || !self.innovation_var.iter().all(|&v| positive(v))
            || !self.obs_var.iter().all(|&v| positive(v))
        {
            return Err(OracleError::InvalidSpec(
                "variances must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KalmanResult {
    pub predicted_means: Vec<f64>,
    pub predicted_vars: Vec<f64>,
    pub filtered_means: Vec<f64>,
    pub filtered_vars: Vec<f64>,
    pub smoothed_means: Vec<f64>,
    pub smoothed_vars: Vec<f64>,
    /// Kalman gain per step; 0 at unobserved steps.
    pub gains: Vec<f64>,
    pub log_evidence: f64,
}

#[derive(Serialize)]
struct KalmanRow {
    step: usize,
    predicted_mean: f64,
    predicted_var: f64,
    filtered_mean: f64,
    filtered_var: f64,
    smoothed_mean: f64,
    smoothed_var: f64,
    gain: f64,
}

impl KalmanResult {
    pub fn smoothed_sds(&self) -> Vec<f64> {
        self.smoothed_vars.iter().map(|v| v.sqrt()).collect()
    }

    pub fn write_csv(&self, path: &Path) -> Result<(), OracleError> {
        let mut w = csv::Writer::from_path(path)?;
        for t in 0..self.gains.len() {
            w.serialize(KalmanRow {
                step: t,
                predicted_mean: self.predicted_means[t],
                predicted_var: self.predicted_vars[t],
                filtered_mean: self.filtered_means[t],
                filtered_var: self.filtered_vars[t],
                smoothed_mean: self.smoothed_means[t],
                smoothed_var: self.smoothed_vars[t],
                gain: self.gains[t],
            })?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Forward Kalman filter, RTS smoother and log marginal likelihood.
///
/// `observations[t]` must be `Some` exactly where `spec.mask[t]` is set.
pub fn kalman_filter_smoother(
    spec: &LinearGaussianChainSpec,
    observations: &[Option<f64>],
) -> Result<KalmanResult, OracleError> {
    spec.validate()?;
    let n = spec.steps();
    if observations.len() != n {
        return Err(OracleError::InvalidSpec(format!(
            "{} observations for {n} steps",
            observations.len()
        )));
    }
    if let Some(t) = (0..n).find(|&t| observations[t].is_some() != spec.mask[t]) {
        return Err(OracleError::InvalidSpec(format!(
            "observation at step {t} disagrees with mask"
        )));
    }

    let mut pm = vec![0.0; n];
    let mut pv = vec![0.0; n];
    let mut fm = vec![0.0; n];
    let mut fv = vec![0.0; n];
    let mut gains = vec![0.0; n];
    let mut log_evidence = 0.0;
    for t in 0..n {
        if t == 0 {
            pm[0] = spec.initial_mean;
            pv[0] = spec.initial_var;
        } else {
            let a = spec.transition[t - 1];
            pm[t] = a * fm[t - 1];
            pv[t] = a * a * fv[t - 1] + spec.innovation_var[t - 1];
        }
        match observations[t] {
            Some(y) => {
                let s = pv[t] + spec.obs_var[t];
                let k = pv[t] / s;
                let resid = y - pm[t];
                log_evidence += -0.5 * (LN_2PI + s.ln() + resid * resid / s);
                gains[t] = k;
                fm[t] = pm[t] + k * resid;
                fv[t] = (1.0 - k) * pv[t];
            }
            None => {
                fm[t] = pm[t];
                fv[t] = pv[t];
            }
        }
    }

    let mut sm = fm.clone();
    let mut sv = fv.clone();
    for t in (0..n.saturating_sub(1)).rev() {
        let c = fv[t] * spec.transition[t] / pv[t + 1];
        sm[t] = fm[t] + c * (sm[t + 1] - pm[t + 1]);
        sv[t] = fv[t] + c * c * (sv[t + 1] - pv[t + 1]);
    }

    Ok(KalmanResult {
        predicted_means: pm,
        predicted_vars: pv,
        filtered_means: fm,
        filtered_vars: fv,
        smoothed_means: sm,
        smoothed_vars: sv,
        gains,
        log_evidence,
    })
}

/// Normal likelihood with known precision and a Normal prior on the mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConjugateSpec {
    pub prior_mean: f64,
    pub prior_precision: f64,
    pub likelihood_precision: f64,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConjugatePosterior {
    pub mean: f64,
    pub precision: f64,
    /// `tau0 / (tau0 + N tau)`, the weight on the prior mean.
    pub prior_weight: f64,
    /// `1 - prior_weight`, the weight on the sample mean.
    pub data_weight: f64,
}

/// Exact posterior of the mean: a convex combination of prior mean and sample mean.
pub fn conjugate_normal_posterior(spec: &ConjugateSpec) -> Result<ConjugatePosterior, OracleError> {
    if !(spec.prior_precision > 0.0 && spec.likelihood_precision > 0.0) {
        return Err(OracleError::InvalidSpec(
            "precisions must be positive".into(),
        ));
    }
    let n = spec.data.len() as f64;
    let data_precision = n * spec.likelihood_precision;
    let precision = spec.prior_precision + data_precision;
    let prior_weight = spec.prior_precision / precision;
    let data_weight = 1.0 - prior_weight;
    let sample_mean = if spec.data.is_empty() {
        0.0
    } else {
        spec.data.iter().sum::<f64>() / n
    };
    Ok(ConjugatePosterior {
        mean: prior_weight * spec.prior_mean + data_weight * sample_mean,
        precision,
        prior_weight,
        data_weight,
    })
}

/// `KL(N(mean1, var1) || N(mean2, var2))`.
pub fn gaussian_kl(mean1: f64, var1: f64, mean2: f64, var2: f64) -> f64 {
    let d = mean1 - mean2;
    0.5 * (var1 / var2 + d * d / var2 - 1.0 + (var2 / var1).ln())
}

pub const ENUMERATION_LIMIT: usize = 1_000_000;

/// Exact posterior over the joint latent states of an all-discrete model.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscretePosterior {
    pub latent_names: Vec<String>,
    /// Latent values per state, in `latent_names` order.
    pub states: Vec<Vec<f64>>,
    pub log_joint: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub log_evidence: f64,
}

impl DiscretePosterior {
    /// Posterior probability that latent `name` equals `value`.
    pub fn marginal(&self, name: &str, value: f64) -> Option<f64> {
        let k = self.latent_names.iter().position(|n| n == name)?;
        Some(
            self.states
                .iter()
                .zip(&self.probabilities)
                .filter(|(s, _)| s[k] == value)
                .map(|(_, p)| p)
                .sum(),
        )
    }
}

fn support_size(family: Family) -> Option<usize> {
    match family {
        Family::Bernoulli => Some(2),
        Family::Categorical { categories } => Some(categories),
        _ => None,
    }
}

/// Dense value vectors (one per joint latent state) for an all-discrete model.
fn enumerate_states(model: &JointModel) -> Result<Vec<Vec<f64>>, OracleError> {
    let latent = model.latent_indices();
    let mut sizes = Vec::with_capacity(latent.len());
    let mut total = 1.0f64;
    for &i in &latent {
        let node = model.node(i);
        let k =
            support_size(node.family).ok_or_else(|| OracleError::NotDiscrete(node.name.clone()))?;
        sizes.push(k);
        total *= k as f64;
    }
    if total > ENUMERATION_LIMIT as f64 {
        return Err(OracleError::StateSpaceTooLarge {
            size: total,
            limit: ENUMERATION_LIMIT,
        });
    }
    let base: Vec<f64> = (0..model.len())
        .map(|i| model.observed_value(i).unwrap_or(0.0))
        .collect();
    let mut states = Vec::with_capacity(total as usize);
    let mut digits = vec![0usize; latent.len()];
    loop {
        let mut v = base.clone();
        for (k, &i) in latent.iter().enumerate() {
            v[i] = digits[k] as f64;
        }
        states.push(v);
        let mut k = latent.len();
        loop {
            if k == 0 {
                return Ok(states);
            }
            k -= 1;
            digits[k] += 1;
            if digits[k] < sizes[k] {
                break;
            }
            digits[k] = 0;
        }
    }
}

/// Normalize the joint over every latent configuration.
pub fn enumerate_discrete_posterior(model: &JointModel) -> Result<DiscretePosterior, OracleError> {
    let latent = model.latent_indices();
    let dense = enumerate_states(model)?;
    let log_joint = dense
        .iter()
        .map(|v| Ok(model.log_prob_terms(v)?.iter().sum::<f64>()))
        .collect::<Result<Vec<f64>, OracleError>>()?;
    let max = log_joint.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(OracleError::ZeroEvidence);
    }
    let z: f64 = log_joint.iter().map(|l| (l - max).exp()).sum();
    let log_evidence = max + z.ln();
    Ok(DiscretePosterior {
        latent_names: latent.iter().map(|&i| model.node(i).name.clone()).collect(),
        states: dense
            .iter()
            .map(|v| latent.iter().map(|&i| v[i]).collect())
            .collect(),
        probabilities: log_joint.iter().map(|l| (l - log_evidence).exp()).collect(),
        log_joint,
        log_evidence,
    })
}

/// Exact ELBO `sum_s q(s) (log p(s) - log q(s))` and its gradient in the
/// surrogate parameters, by enumeration.
pub fn enumerated_elbo_gradient(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
) -> Result<(f64, Vec<f64>), OracleError> {
    surrogate.check_compatible(model)?;
    let dense = enumerate_states(model)?;
    let mut elbo = 0.0;
    let mut grad = vec![0.0; params.len()];
    let mut tape = Tape::new();
    for v in &dense {
        let lp: f64 = model.log_prob_terms(v)?.iter().sum();
        tape.clear();
        let p = tape.inputs_from(params);
        let lq = surrogate.log_density_var(&mut tape, &p, v)?;
        let lq_value = tape.value(lq);
        if lq_value == f64::NEG_INFINITY {
            continue;
        }
        // d/dpsi [q (lp - lq)] = q (lp - lq - 1) dlq
        let q = lq_value.exp();
        elbo += q * (lp - lq_value);
        let g = tape.backward(lq);
        let w = q * (lp - lq_value - 1.0);
        for (acc, &pv) in grad.iter_mut().zip(&p) {
            *acc += w * g.wrt(pv);
        }
    }
    Ok((elbo, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetropolisConfig {
    /// Retained iterations per chain.
    pub steps: usize,
    /// Adaptation iterations per chain, discarded.
    pub burn_in: usize,
    /// Initial random-walk scale in unconstrained space.
    pub proposal_scale: f64,
    pub chains: usize,
    pub seed: u64,
}

impl Default for MetropolisConfig {
    fn default() -> Self {
        MetropolisConfig {
            steps: 20_000,
            burn_in: 10_000,
            proposal_scale: 0.1,
            chains: 4,
            seed: 0,
        }
    }
}

pub const RHAT_THRESHOLD: f64 = 1.05;
const TARGET_ACCEPTANCE: f64 = 0.3;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatentSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    /// Monte-Carlo standard error of `mean` (batch means).
    pub mcse: f64,
    pub ess: f64,
    pub rhat: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetropolisResult {
    pub summaries: Vec<LatentSummary>,
    /// Retained draws per chain, each row one latent vector in summary order.
    pub draws: Vec<Vec<Vec<f64>>>,
    pub acceptance_rates: Vec<f64>,
    pub max_rhat: f64,
    /// False when any split R-hat exceeds [`RHAT_THRESHOLD`].
    pub reliable: bool,
}

impl MetropolisResult {
    pub fn summary(&self, name: &str) -> Option<&LatentSummary> {
        self.summaries.iter().find(|s| s.name == name)
    }

    pub fn means(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.mean).collect()
    }

    pub fn sds(&self) -> Vec<f64> {
        self.summaries.iter().map(|s| s.sd).collect()
    }
}

enum Coord {
    Continuous {
        node: usize,
        bijector: Bijector,
        slot: usize,
    },
    Discrete {
        node: usize,
        states: usize,
    },
}

struct Target<'a> {
    model: &'a JointModel,
    coords: Vec<Coord>,
    dim: usize,
}

impl Target<'_> {
    fn new(model: &JointModel) -> Target<'_> {
        let mut dim = 0;
        let coords = model
            .latent_indices()
            .into_iter()
            .map(|i| {
                let family = model.node(i).family;
                match family.support_bijector() {
                    Some(bijector) => {
                        dim += 1;
                        Coord::Continuous {
                            node: i,
                            bijector,
                            slot: dim - 1,
                        }
                    }
                    None => Coord::Discrete {
                        node: i,
                        states: support_size(family).unwrap_or(2),
                    },
                }
            })
            .collect();
        Target { model, coords, dim }
    }

    /// Unnormalized log-density in unconstrained coordinates.
    fn log_density(&self, z: &[f64], dense: &mut [f64]) -> f64 {
        let mut ldj = 0.0;
        for c in &self.coords {
            if let Coord::Continuous {
                node,
                bijector,
                slot,
            } = *c
            {
                dense[node] = bijector.forward(&[z[slot]])[0];
                ldj += bijector.forward_log_det_jacobian(&[z[slot]]);
            }
        }
        match self.model.log_prob_terms(dense) {
            Ok(terms) => {
                let lp: f64 = terms.iter().sum::<f64>() + ldj;
                if lp.is_nan() {
                    f64::NEG_INFINITY
                } else {
                    lp
                }
            }
            Err(_) => f64::NEG_INFINITY,
        }
    }

    fn latent_values(&self, dense: &[f64]) -> Vec<f64> {
        self.coords
            .iter()
            .map(|c| match *c {
                Coord::Continuous { node, .. } | Coord::Discrete { node, .. } => dense[node],
            })
            .collect()
    }
}

struct ChainOutput {
    draws: Vec<Vec<f64>>,
    acceptance: f64,
}

fn run_chain(
    target: &Target<'_>,
    config: &MetropolisConfig,
    chain: usize,
) -> Result<ChainOutput, OracleError> {
    let model = target.model;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(chain as u64 + 1);

    // dispersed start from the prior
    let mut dense = Vec::new();
    let mut z = vec![0.0; target.dim];
    let mut current = f64::NEG_INFINITY;
    for _ in 0..100 {
        let trace = model.sample_forward_with(&mut rng)?;
        dense = model.dense_values(&trace)?;
        for c in &target.coords {
            if let Coord::Continuous {
                node,
                bijector,
                slot,
            } = *c
            {
                z[slot] = bijector
                    .inverse(&[dense[node]])
                    .map(|u| u[0])
                    .unwrap_or(0.0);
            }
        }
        current = target.log_density(&z, &mut dense);
        if current.is_finite() {
            break;
        }
    }
    if !current.is_finite() {
        return Err(OracleError::NoValidStart(chain));
    }

    let d = target.dim;
    let mut scale = config.proposal_scale;
    let mut chol = DMatrix::<f64>::identity(d, d);
    let mut history: Vec<Vec<f64>> = Vec::new();
    let mut block_accepts = 0usize;
    let mut block_len = 0usize;
    let mut blocks = 0usize;
    let mut accepted = 0usize;
    let mut proposals = 0usize;
    let mut draws = Vec::with_capacity(config.steps);
    let mut proposal_dense = dense.clone();
    let adapt_cov_at = config.burn_in / 2;

    for it in 0..config.burn_in + config.steps {
        if d > 0 {
            let eps =
                DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
            let step = &chol * eps * scale;
            let z_new: Vec<f64> = z.iter().zip(step.iter()).map(|(a, b)| a + b).collect();
            proposal_dense.copy_from_slice(&dense);
            let proposed = target.log_density(&z_new, &mut proposal_dense);
            let accept = proposed.is_finite() && rng.random::<f64>().ln() < proposed - current;
            if accept {
                z = z_new;
                std::mem::swap(&mut dense, &mut proposal_dense);
                current = proposed;
            }
            if it >= config.burn_in {
                proposals += 1;
                accepted += accept as usize;
            }
            block_accepts += accept as usize;
            block_len += 1;
        }
        for c in &target.coords {
            if let Coord::Discrete { node, states } = *c {
                if states < 2 {
                    continue;
                }
                let old = dense[node];
                let mut new = rng.random_range(0..states - 1) as f64;
                if new >= old {
                    new += 1.0;
                }
                dense[node] = new;
                let proposed = target.log_density(&z, &mut dense);
                if proposed.is_finite() && rng.random::<f64>().ln() < proposed - current {
                    current = proposed;
                } else {
                    dense[node] = old;
                }
            }
        }

        if it < config.burn_in && d > 0 {
            if block_len == 50 {
                blocks += 1;
                let rate = block_accepts as f64 / block_len as f64;
                scale *= ((rate - TARGET_ACCEPTANCE) / (blocks as f64).sqrt()).exp();
                block_accepts = 0;
                block_len = 0;
            }
            if it >= adapt_cov_at / 2 {
                history.push(z.clone());
            }
            if it + 1 == adapt_cov_at && history.len() > 2 * d {
                if let Some(l) = empirical_cholesky(&history) {
                    chol = l;
                    scale = 2.38 / (d as f64).sqrt();
                    blocks = 0;
                }
                history.clear();
            }
        }
        if it >= config.burn_in {
            draws.push(target.latent_values(&dense));
        }
    }
    Ok(ChainOutput {
        draws,
        acceptance: if proposals > 0 {
            accepted as f64 / proposals as f64
        } else {
            1.0
        },
    })
}

fn empirical_cholesky(samples: &[Vec<f64>]) -> Option<DMatrix<f64>> {
    let d = samples[0].len();
    let n = samples.len() as f64;
    let mut mean = DVector::<f64>::zeros(d);
    for s in samples {
        mean += DVector::from_column_slice(s);
    }
    mean /= n;
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for s in samples {
        let c = DVector::from_column_slice(s) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    let jitter = 1e-10 * (cov.trace() / d as f64).max(1e-12);
    for k in 0..d {
        cov[(k, k)] += jitter;
    }
    cov.cholesky().map(|c| c.l())
}

/// Split R-hat over `chains` (each a series of scalars).
pub fn split_rhat(chains: &[Vec<f64>]) -> f64 {
    let halves: Vec<&[f64]> = chains
        .iter()
        .flat_map(|c| {
            let h = c.len() / 2;
            [&c[..h], &c[c.len() - h..]]
        })
        .filter(|h| h.len() > 1)
        .collect();
    if halves.len() < 2 {
        return f64::NAN;
    }
    let n = halves[0].len() as f64;
    let m = halves.len() as f64;
    let means: Vec<f64> = halves
        .iter()
        .map(|h| h.iter().sum::<f64>() / h.len() as f64)
        .collect();
    let grand = means.iter().sum::<f64>() / m;
    let b = n / (m - 1.0) * means.iter().map(|x| (x - grand).powi(2)).sum::<f64>();
    let w = halves
        .iter()
        .zip(&means)
        .map(|(h, mu)| h.iter().map(|x| (x - mu).powi(2)).sum::<f64>() / (h.len() as f64 - 1.0))
        .sum::<f64>()
        / m;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (((n - 1.0) / n * w + b / n) / w).sqrt()
}

/// Batch-means Monte-Carlo standard error of the pooled mean.
fn batch_means_mcse(chains: &[Vec<f64>]) -> f64 {
    let len = chains.iter().map(Vec::len).min().unwrap_or(0);
    let batch = ((len as f64).sqrt() as usize).max(1);
    let batches: Vec<f64> = chains
        .iter()
        .flat_map(|c| {
            c.chunks_exact(batch)
                .map(|b| b.iter().sum::<f64>() / batch as f64)
        })
        .collect();
    let k = batches.len() as f64;
    if k < 2.0 {
        return f64::NAN;
    }
    let mean = batches.iter().sum::<f64>() / k;
    let var = batches.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (k - 1.0);
    (var / k).sqrt()
}

/// Adaptive random-walk Metropolis over the latent nodes of `model`.
///
/// Continuous latents move jointly in unconstrained space with a Gaussian
/// proposal whose covariance is estimated during burn-in; discrete latents
/// get single-site uniform proposals.
pub fn metropolis_sample(
    model: &JointModel,
    config: &MetropolisConfig,
) -> Result<MetropolisResult, OracleError> {
    if config.chains == 0 || config.steps < 4 {
        return Err(OracleError::InvalidSpec(
            "need at least one chain and four retained steps".into(),
        ));
    }
    if !(config.proposal_scale > 0.0) {
        return Err(OracleError::InvalidSpec(
            "proposal scale must be positive".into(),
        ));
    }
    let target = Target::new(model);
    let outputs = (0..config.chains)
        .into_par_iter()
        .map(|c| run_chain(&target, config, c))
        .collect::<Result<Vec<_>, _>>()?;

    let names = model.latent_names();
    let pooled_n = (config.chains * config.steps) as f64;
    let mut summaries = Vec::with_capacity(names.len());
    for (k, name) in names.into_iter().enumerate() {
        let series: Vec<Vec<f64>> = outputs
            .iter()
            .map(|o| o.draws.iter().map(|r| r[k]).collect())
            .collect();
        let mean = series.iter().flatten().sum::<f64>() / pooled_n;
        let var = series
            .iter()
            .flatten()
            .map(|x| (x - mean).powi(2))
            .sum::<f64>()
            / (pooled_n - 1.0);
        let mcse = batch_means_mcse(&series);
        let ess = if mcse > 0.0 {
            var / (mcse * mcse)
        } else {
            pooled_n
        };
        summaries.push(LatentSummary {
            name,
            mean,
            sd: var.sqrt(),
            mcse,
            ess,
            rhat: split_rhat(&series),
        });
    }
    let max_rhat =
        summaries
            .iter()
            .map(|s| s.rhat)
            .fold(1.0, |a: f64, r| if r.is_nan() { a } else { a.max(r) });
    Ok(MetropolisResult {
        reliable: max_rhat <= RHAT_THRESHOLD,
        acceptance_rates: outputs.iter().map(|o| o.acceptance).collect(),
        draws: outputs.into_iter().map(|o| o.draws).collect(),
        summaries,
        max_rhat,
    })
}

/// Write per-latent Metropolis summaries as CSV.
pub fn write_summaries_csv(path: &Path, summaries: &[LatentSummary]) -> Result<(), OracleError> {
    let mut w = csv::Writer::from_path(path)?;
    for s in summaries {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}
