//! Monte-Carlo ELBO estimation, hybrid pathwise/score-function gradients,
//! Adam, and the training loop.

use std::io;
use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::model::JointModel;
use crate::surrogates::{build_surrogate, SurrogateError, SurrogateKind, SurrogateProgram};

#[derive(Debug, Error)]
pub enum InferenceError {
    #[error("n_samples must be at least 1")]
    NoSamples,
    #[error("non-finite {what} (sample {sample})")]
    NonFinite { what: &'static str, sample: usize },
    #[error("parameter vector has length {got}, surrogate expects {expected}")]
    ParamLength { got: usize, expected: usize },
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Surrogate(#[from] SurrogateError),
    #[error("trajectory output: {0}")]
    Io(#[from] io::Error),
    #[error("trajectory output: {0}")]
    Csv(#[from] csv::Error),
}

impl From<crate::model::ModelError> for InferenceError {
    fn from(e: crate::model::ModelError) -> Self {
        InferenceError::Surrogate(e.into())
    }
}

impl From<crate::distributions::DistError> for InferenceError {
    fn from(e: crate::distributions::DistError) -> Self {
        InferenceError::Surrogate(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ElboEstimate {
    pub value: f64,
    /// `log p(x, y) - log q(x)` for each draw.
    pub terms: Vec<f64>,
    pub n_samples: usize,
}

impl ElboEstimate {
    fn from_terms(terms: Vec<f64>) -> Self {
        let n = terms.len();
        let value = terms.iter().sum::<f64>() / n as f64;
        ElboEstimate {
            value,
            terms,
            n_samples: n,
        }
    }

    /// Monte-Carlo standard error of `value`.
    pub fn standard_error(&self) -> f64 {
        let n = self.n_samples as f64;
        if self.n_samples < 2 {
            return 0.0;
        }
        let var = self
            .terms
            .iter()
            .map(|t| (t - self.value).powi(2))
            .sum::<f64>()
            / (n - 1.0);
        (var / n).sqrt()
    }
}

fn check_inputs(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    n_samples: usize,
) -> Result<(), InferenceError> {
    if n_samples == 0 {
        return Err(InferenceError::NoSamples);
    }
    surrogate.check_compatible(model)?;
    if params.len() != surrogate.num_params() {
        return Err(InferenceError::ParamLength {
            got: params.len(),
            expected: surrogate.num_params(),
        });
    }
    Ok(())
}

fn noise_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    rng
}

/// Draw `n` noise vectors for `surrogate` from the stream used by
/// [`elbo_estimate`] and [`elbo_gradient`] at `seed`.
pub fn common_noise(surrogate: &SurrogateProgram, n: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = noise_rng(seed);
    (0..n).map(|_| surrogate.draw_noise(&mut rng)).collect()
}

/// Mean of `log p(x, y) - log q(x)` over `n_samples` draws `x ~ q`.
pub fn elbo_estimate(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<ElboEstimate, InferenceError> {
    check_inputs(model, surrogate, params, n_samples)?;
    let noise = common_noise(surrogate, n_samples, seed);
    elbo_estimate_with_noise(model, surrogate, params, &noise)
}

pub fn elbo_estimate_with_noise(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    noise: &[Vec<f64>],
) -> Result<ElboEstimate, InferenceError> {
    check_inputs(model, surrogate, params, noise.len())?;
    let mut tape = Tape::new();
    let mut terms = Vec::with_capacity(noise.len());
    for (s, eps) in noise.iter().enumerate() {
        tape.clear();
        let p: Vec<Var> = params.iter().map(|&v| tape.constant(v)).collect();
        let draw = surrogate.sample_var(&mut tape, &p, eps)?;
        let lp = model.log_joint_var(&mut tape, &draw.values)?;
        let term = tape.value(lp) - tape.value(draw.log_q);
        if !term.is_finite() {
            return Err(InferenceError::NonFinite {
                what: "ELBO term",
                sample: s,
            });
        }
        terms.push(term);
    }
    Ok(ElboEstimate::from_terms(terms))
}

/// ELBO estimate and its gradient with respect to the surrogate parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ElboGradient {
    pub estimate: ElboEstimate,
    pub gradient: Vec<f64>,
}

/// Gradient of the ELBO: pathwise through continuous draws plus
/// score-function terms for discrete latents, with a leave-one-out baseline
/// when more than one draw is used.
pub fn elbo_gradient(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<Vec<f64>, InferenceError> {
    Ok(elbo_value_and_gradient(model, surrogate, params, n_samples, seed)?.gradient)
}

pub fn elbo_value_and_gradient(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    n_samples: usize,
    seed: u64,
) -> Result<ElboGradient, InferenceError> {
    check_inputs(model, surrogate, params, n_samples)?;
    let noise = common_noise(surrogate, n_samples, seed);
    let mut tape = Tape::new();
    elbo_gradient_with_noise(model, surrogate, params, &noise, &mut tape)
}

/// Gradient at explicit noise draws, recording on a caller-owned tape.
pub fn elbo_gradient_with_noise(
    model: &JointModel,
    surrogate: &SurrogateProgram,
    params: &[f64],
    noise: &[Vec<f64>],
    tape: &mut Tape,
) -> Result<ElboGradient, InferenceError> {
    let n = noise.len();
    check_inputs(model, surrogate, params, n)?;
    tape.clear();
    let p = tape.inputs_from(params);
    let mut f = Vec::with_capacity(n);
    let mut score = Vec::with_capacity(n);
    for eps in noise {
        let draw = surrogate.sample_var(tape, &p, eps)?;
        let lp = model.log_joint_var(tape, &draw.values)?;
        f.push(tape.sub(lp, draw.log_q));
        score.push(draw.discrete_log_q);
    }
    let terms = tape.values(&f);
    if let Some(s) = terms.iter().position(|t| !t.is_finite()) {
        return Err(InferenceError::NonFinite {
            what: "ELBO term",
            sample: s,
        });
    }
    let total: f64 = terms.iter().sum();
    let mut objective = Vec::with_capacity(2 * n);
    for i in 0..n {
        objective.push(f[i]);
        if let Some(lq) = score[i] {
            let baseline = if n > 1 {
                (total - terms[i]) / (n - 1) as f64
            } else {
                0.0
            };
            objective.push(tape.mul_const(lq, terms[i] - baseline));
        }
    }
    let sum = tape.sum(&objective);
    let mean = tape.mul_const(sum, 1.0 / n as f64);
    let grad = tape.backward(mean);
    let gradient: Vec<f64> = p.iter().map(|&v| grad.wrt(v)).collect();
    if let Some(k) = gradient.iter().position(|g| !g.is_finite()) {
        return Err(InferenceError::NonFinite {
            what: "gradient entry",
            sample: k,
        });
    }
    Ok(ElboGradient {
        estimate: ElboEstimate::from_terms(terms),
        gradient,
    })
}

/// Adam optimizer state; steps perform ascent on the objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new(dim: usize, lr: f64) -> Self {
        AdamState {
            step: 0,
            m: vec![0.0; dim],
            v: vec![0.0; dim],
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam ascent step along `gradient`.
///
/// # Panics
/// If `gradient`, `params` and the moment vectors differ in length.
pub fn adam_step(state: &mut AdamState, gradient: &[f64], params: &mut [f64]) {
    assert_eq!(
        gradient.len(),
        params.len(),
        "gradient/params length mismatch"
    );
    assert_eq!(
        state.m.len(),
        params.len(),
        "optimizer/params length mismatch"
    );
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - state.beta1.powi(t);
    let c2 = 1.0 - state.beta2.powi(t);
    for k in 0..params.len() {
        let g = gradient[k];
        state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g;
        state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] += state.lr * m_hat / (v_hat.sqrt() + state.eps);
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EarlyStopping {
    /// Steps per loss window.
    pub window: usize,
    /// Relative improvement between consecutive window means counted as stalled.
    pub tolerance: f64,
    /// Consecutive stalled windows before stopping.
    pub patience: usize,
}

impl Default for EarlyStopping {
    fn default() -> Self {
        EarlyStopping {
            window: 1000,
            tolerance: 1e-4,
            patience: 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Defaults to the surrogate's learning rate when unset.
    pub lr: Option<f64>,
    pub n_samples: usize,
    pub seed: u64,
    /// Record the loss every this many steps.
    pub record_every: usize,
    pub early_stopping: Option<EarlyStopping>,
    /// Return the mean of the last this-many iterates instead of the final one (0 disables).
    pub average_last: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 30_000,
            lr: None,
            n_samples: 1,
            seed: 0,
            record_every: 10,
            early_stopping: Some(EarlyStopping::default()),
            average_last: 0,
        }
    }
}

impl TrainConfig {
    fn validate(&self) -> Result<(), InferenceError> {
        if self.n_samples == 0 {
            return Err(InferenceError::NoSamples);
        }
        if self.record_every == 0 {
            return Err(InferenceError::InvalidConfig(
                "record_every must be positive".into(),
            ));
        }
        if let Some(lr) = self.lr {
            if !(lr > 0.0 && lr.is_finite()) {
                return Err(InferenceError::InvalidConfig(format!(
                    "learning rate {lr} must be positive"
                )));
            }
        }
        if let Some(es) = &self.early_stopping {
            if es.window == 0 || es.patience == 0 {
                return Err(InferenceError::InvalidConfig(
                    "early-stopping window and patience must be positive".into(),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryPoint {
    pub step: usize,
    pub negative_elbo: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone)]
pub struct FitResult {
    pub kind: SurrogateKind,
    pub surrogate: SurrogateProgram,
    pub params: Vec<f64>,
    pub trajectory: Vec<TrajectoryPoint>,
    pub wall_time_s: f64,
    pub converged: bool,
    /// Set when a non-finite loss or gradient stopped training.
    pub diverged: Option<String>,
    pub steps_run: usize,
    pub seed: u64,
}

/// Build the surrogate of `kind` for `model` and optimize it.
pub fn fit(
    model: &JointModel,
    kind: SurrogateKind,
    config: &TrainConfig,
) -> Result<FitResult, InferenceError> {
    let surrogate = build_surrogate(model, kind)?;
    let init = surrogate.init_params(config.seed)?;
    fit_from(model, surrogate, init, config)
}

/// Optimize `surrogate` starting at `init`.
pub fn fit_from(
    model: &JointModel,
    surrogate: SurrogateProgram,
    init: Vec<f64>,
    config: &TrainConfig,
) -> Result<FitResult, InferenceError> {
    config.validate()?;
    check_inputs(model, &surrogate, &init, config.n_samples)?;
    let lr = config
        .lr
        .unwrap_or_else(|| surrogate.kind().default_learning_rate());
    let start = Instant::now();
    let mut rng = noise_rng(config.seed);
    let mut tape = Tape::new();
    let mut params = init;
    let mut adam = AdamState::new(params.len(), lr);
    let mut trajectory = Vec::with_capacity(config.steps / config.record_every + 1);
    let mut diverged = None;
    let mut converged = false;
    let mut steps_run = 0;

    let mut window_sum = 0.0;
    let mut window_len = 0;
    let mut previous_window: Option<f64> = None;
    let mut stalled = 0;

    let average_from = config.steps.saturating_sub(config.average_last);
    let mut average = vec![0.0; params.len()];
    let mut averaged = 0usize;

    let total_steps = config.steps.max(1);
    for step in 0..total_steps {
        let noise: Vec<Vec<f64>> = (0..config.n_samples)
            .map(|_| surrogate.draw_noise(&mut rng))
            .collect();
        let eval = match elbo_gradient_with_noise(model, &surrogate, &params, &noise, &mut tape) {
            Ok(e) => e,
            Err(InferenceError::NonFinite { what, sample }) => {
                diverged = Some(format!("non-finite {what} at step {step} (index {sample})"));
                break;
            }
            Err(e) => return Err(e),
        };
        let loss = -eval.estimate.value;
        if step % config.record_every == 0 {
            trajectory.push(TrajectoryPoint {
                step,
                negative_elbo: loss,
                wall_time_s: start.elapsed().as_secs_f64(),
            });
        }
        if config.steps == 0 {
            break;
        }
        adam_step(&mut adam, &eval.gradient, &mut params);
        steps_run = step + 1;

        if config.average_last > 0 && step >= average_from {
            averaged += 1;
            for (a, p) in average.iter_mut().zip(&params) {
                *a += p;
            }
        }

        if let Some(es) = &config.early_stopping {
            window_sum += loss;
            window_len += 1;
            if window_len == es.window {
                let mean = window_sum / es.window as f64;
                if let Some(prev) = previous_window {
                    let rel = (prev - mean) / prev.abs().max(f64::MIN_POSITIVE);
                    if rel < es.tolerance {
                        stalled += 1;
                    } else {
                        stalled = 0;
                    }
                }
                previous_window = Some(mean);
                window_sum = 0.0;
                window_len = 0;
                if stalled >= es.patience {
                    converged = true;
                    break;
                }
            }
        }
    }

    if averaged > 0 && !converged && diverged.is_none() {
        params = average.into_iter().map(|a| a / averaged as f64).collect();
    }

    Ok(FitResult {
        kind: surrogate.kind(),
        surrogate,
        params,
        trajectory,
        wall_time_s: start.elapsed().as_secs_f64(),
        converged,
        diverged,
        steps_run,
        seed: config.seed,
    })
}

/// Marginal means and standard deviations of the latent nodes under a surrogate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PosteriorMoments {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub sds: Vec<f64>,
}

/// Monte-Carlo marginal moments from `n_draws` surrogate samples.
pub fn surrogate_moments(
    surrogate: &SurrogateProgram,
    params: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<PosteriorMoments, InferenceError> {
    if n_draws < 2 {
        return Err(InferenceError::NoSamples);
    }
    let model = surrogate.model();
    let latent = surrogate.latent_indices();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(4);
    let mut mean = vec![0.0; latent.len()];
    let mut m2 = vec![0.0; latent.len()];
    for n in 1..=n_draws {
        let v = surrogate.sample_dense(params, &mut rng)?;
        for (k, &i) in latent.iter().enumerate() {
            let d = v[i] - mean[k];
            mean[k] += d / n as f64;
            m2[k] += d * (v[i] - mean[k]);
        }
    }
    Ok(PosteriorMoments {
        names: latent.iter().map(|&i| model.node(i).name.clone()).collect(),
        means: mean,
        sds: m2
            .iter()
            .map(|s| (s / (n_draws - 1) as f64).sqrt())
            .collect(),
    })
}

/// Write a loss trajectory as CSV with columns `step, negative_elbo, wall_time_s`.
pub fn write_trajectory_csv(
    path: &Path,
    trajectory: &[TrajectoryPoint],
) -> Result<(), InferenceError> {
    let mut w = csv::Writer::from_path(path)?;
    for p in trajectory {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_trajectory_csv(path: &Path) -> Result<Vec<TrajectoryPoint>, InferenceError> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<Result<Vec<_>, _>>()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::Family;
    use crate::model::{build_joint, Link, RandomVariableNode};
    use crate::surrogates::{build_asvi, build_mean_field};
    use approx::assert_abs_diff_eq;

    fn conjugate(y: f64) -> JointModel {
        build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::new(
                "y",
                Family::Normal,
                &["x"],
                Link::new(|t, p| Ok(vec![p[0], t.constant(1.0)])),
            ),
        ])
        .unwrap()
        .condition([("y", y)])
        .unwrap()
    }

    fn set_posterior(s: &SurrogateProgram, p: &mut [f64], loc: f64, scale: f64) {
        p[s.param_index("x.loc.alpha").unwrap()] = loc;
        p[s.param_index("x.scale.alpha").unwrap()] =
            crate::distributions::unconstrain(crate::distributions::Bijector::Softplus, scale)
                .unwrap();
    }

    #[test]
    fn elbo_is_zero_when_q_equals_prior() {
        let m = build_joint(vec![
            RandomVariableNode::root("a", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::new(
                "b",
                Family::LogNormal,
                &["a"],
                Link::new(|t, p| Ok(vec![p[0], t.constant(0.5)])),
            ),
        ])
        .unwrap();
        let s = build_asvi(&m).unwrap();
        let mut p = s.init_params(0).unwrap();
        s.set_all_lam_logits(&mut p, 40.0);
        let e = elbo_estimate(&m, &s, &p, 50, 3).unwrap();
        for t in &e.terms {
            assert_abs_diff_eq!(*t, 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn elbo_at_exact_posterior_is_log_evidence() {
        let m = conjugate(2.0);
        let s = build_mean_field(&m).unwrap();
        let mut p = s.init_params(0).unwrap();
        set_posterior(&s, &mut p, 1.0, 0.5f64.sqrt());
        let e = elbo_estimate(&m, &s, &p, 20, 1).unwrap();
        let expected = -0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0;
        assert_abs_diff_eq!(expected, -2.265512, epsilon = 1e-6);
        for t in &e.terms {
            assert_abs_diff_eq!(*t, expected, epsilon = 1e-9);
        }
    }

    #[test]
    fn elbo_is_below_evidence_elsewhere() {
        let m = conjugate(2.0);
        let s = build_mean_field(&m).unwrap();
        let mut p = s.init_params(0).unwrap();
        set_posterior(&s, &mut p, 0.3, 1.2);
        let e = elbo_estimate(&m, &s, &p, 20_000, 1).unwrap();
        assert!(
            e.value + 3.0 * e.standard_error() < -0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0
        );
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let m = conjugate(0.7);
        let s = build_asvi(&m).unwrap();
        let p = s.init_params(4).unwrap();
        let g = elbo_gradient(&m, &s, &p, 3, 9).unwrap();
        for k in 0..p.len() {
            let h = 1e-5;
            let mut hi = p.clone();
            hi[k] += h;
            let mut lo = p.clone();
            lo[k] -= h;
            let fd = (elbo_estimate(&m, &s, &hi, 3, 9).unwrap().value
                - elbo_estimate(&m, &s, &lo, 3, 9).unwrap().value)
                / (2.0 * h);
            assert!(
                (fd - g[k]).abs() / g[k].abs().max(1.0) < 1e-6,
                "param {k}: {fd} vs {}",
                g[k]
            );
        }
    }

    #[test]
    fn adam_examples() {
        let mut st = AdamState::new(3, 0.01);
        let mut p = vec![1.0, -2.0, 0.5];
        adam_step(&mut st, &[0.0; 3], &mut p);
        assert_eq!(p, vec![1.0, -2.0, 0.5]);

        let mut st = AdamState::new(2, 0.01);
        let mut p = vec![0.0, 0.0];
        adam_step(&mut st, &[3.0, -1e-3], &mut p);
        assert_abs_diff_eq!(p[0], 0.01, epsilon = 1e-6);
        assert_abs_diff_eq!(p[1], -0.01, epsilon = 1e-4);

        let mut st = AdamState::new(1, 0.01);
        let mut p = vec![0.0];
        adam_step(&mut st, &[2.0], &mut p);
        let first = p[0];
        adam_step(&mut st, &[2.0], &mut p);
        assert!(first > 0.0 && p[0] > first);
    }

    #[test]
    fn fit_recovers_conjugate_evidence() {
        let m = conjugate(2.0);
        let cfg = TrainConfig {
            steps: 6000,
            lr: Some(1e-2),
            n_samples: 4,
            seed: 2,
            early_stopping: None,
            average_last: 2000,
            ..TrainConfig::default()
        };
        let r = fit(&m, SurrogateKind::Asvi, &cfg).unwrap();
        assert!(r.diverged.is_none());
        let e = elbo_estimate(&m, &r.surrogate, &r.params, 4000, 11).unwrap();
        let evidence = -0.5 * (4.0 * std::f64::consts::PI).ln() - 1.0;
        assert!(
            (e.value - evidence).abs() < 0.01,
            "{} vs {evidence}",
            e.value
        );
    }

    #[test]
    fn zero_steps_returns_initial_params() {
        let m = conjugate(1.0);
        let cfg = TrainConfig {
            steps: 0,
            seed: 5,
            ..TrainConfig::default()
        };
        let r = fit(&m, SurrogateKind::Asvi, &cfg).unwrap();
        assert_eq!(r.params, r.surrogate.init_params(5).unwrap());
        assert_eq!(r.trajectory.len(), 1);
        assert_eq!(r.steps_run, 0);
    }

    #[test]
    fn fit_is_reproducible() {
        let m = conjugate(1.5);
        let cfg = TrainConfig {
            steps: 300,
            seed: 7,
            ..TrainConfig::default()
        };
        let a = fit(&m, SurrogateKind::Asvi, &cfg).unwrap();
        let b = fit(&m, SurrogateKind::Asvi, &cfg).unwrap();
        assert_eq!(a.params, b.params);
        let la: Vec<f64> = a.trajectory.iter().map(|p| p.negative_elbo).collect();
        let lb: Vec<f64> = b.trajectory.iter().map(|p| p.negative_elbo).collect();
        assert_eq!(la, lb);
        assert_eq!(a.trajectory.len(), 30);
    }

    #[test]
    fn early_stopping_triggers_on_flat_loss() {
        let m = conjugate(0.0);
        let cfg = TrainConfig {
            steps: 100_000,
            seed: 1,
            early_stopping: Some(EarlyStopping {
                window: 200,
                tolerance: 1e-2,
                patience: 2,
            }),
            ..TrainConfig::default()
        };
        let r = fit(&m, SurrogateKind::MeanField, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.steps_run < 100_000);
    }

    #[test]
    fn moments_of_exact_posterior() {
        let m = conjugate(2.0);
        let s = build_mean_field(&m).unwrap();
        let mut p = s.init_params(0).unwrap();
        set_posterior(&s, &mut p, 1.0, 0.5f64.sqrt());
        let mo = surrogate_moments(&s, &p, 40_000, 3).unwrap();
        assert_eq!(mo.names, vec!["x".to_string()]);
        assert!((mo.means[0] - 1.0).abs() < 4.0 * 0.5f64.sqrt() / 200.0);
        assert!((mo.sds[0] - 0.5f64.sqrt()).abs() < 0.01);
    }

    #[test]
    fn trajectory_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = vec![
            TrajectoryPoint {
                step: 0,
                negative_elbo: 3.5,
                wall_time_s: 0.0,
            },
            TrajectoryPoint {
                step: 10,
                negative_elbo: 2.25,
                wall_time_s: 0.125,
            },
        ];
        write_trajectory_csv(&path, &t).unwrap();
        assert_eq!(read_trajectory_csv(&path).unwrap(), t);
        let header = std::fs::read_to_string(&path).unwrap();
        assert!(header.starts_with("step,negative_elbo,wall_time_s"));
    }
}
