//! Acceptance suite: one PASS/FAIL line per criterion; exits nonzero on any failure.

use std::time::Instant;

use asvi::cli::{run_benchmark, RunConfig};
use asvi::distributions::Family;
use asvi::inference::{
    common_noise, elbo_estimate, elbo_estimate_with_noise, elbo_value_and_gradient, fit,
    surrogate_moments, TrainConfig,
};
use asvi::model::{build_joint, JointModel, Link, RandomVariableNode};
use asvi::oracles::{
    conjugate_normal_posterior, enumerated_elbo_gradient, kalman_filter_smoother,
    metropolis_sample, ConjugateSpec, MetropolisConfig, RHAT_THRESHOLD,
};
use asvi::surrogates::{build_asvi, build_mean_field, SurrogateKind, SurrogateProgram};
use asvi::tasks::{SchoolsData, Task, TaskId};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn posterior(id: TaskId, seed: u64) -> JointModel {
    let task = Task::new(id);
    let data = task.generate_data(seed).expect("data");
    task.posterior_model(&data).expect("model")
}

fn perturbed(params: &[f64], scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = Normal::new(0.0, scale).unwrap();
    params.iter().map(|p| p + n.sample(rng)).collect()
}

fn c1_prior_containment() -> Outcome {
    let mut worst: f64 = 0.0;
    for (t, id) in TaskId::ALL.into_iter().enumerate() {
        let model = posterior(id, 7);
        let q = build_asvi(&model).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(100 + t as u64);
        for k in 0..100u64 {
            let mut params = perturbed(&q.init_params(k).unwrap(), 0.5, &mut rng);
            q.set_all_lam_logits(&mut params, 40.0);
            let trace = model.sample_forward_with(&mut rng).unwrap();
            let lq = q.log_density(&params, &trace).map_err(|e| e.to_string())?;
            let lp = model.latent_log_prob(&trace).unwrap();
            worst = worst.max((lq - lp).abs());
        }
    }
    check(
        worst < 1e-6,
        format!("max |log q - log p_prior| = {worst:.2e} over 6 tasks x 100 traces"),
    )
}

fn c2_mean_field_degeneration() -> Outcome {
    let mut worst: f64 = 0.0;
    for (t, id) in TaskId::ALL.into_iter().enumerate() {
        let model = posterior(id, 11);
        let q = build_asvi(&model).map_err(|e| e.to_string())?;
        let mf = build_mean_field(&model).map_err(|e| e.to_string())?;
        let mut rng = ChaCha8Rng::seed_from_u64(200 + t as u64);
        for k in 0..100u64 {
            let mut params = perturbed(&q.init_params(k).unwrap(), 0.5, &mut rng);
            q.set_all_lam_logits(&mut params, -40.0);
            let mf_params = q
                .transfer_alpha(&params, &mf)
                .ok_or("alpha transfer failed")?;
            let trace = model.sample_forward_with(&mut rng).unwrap();
            let a = q.log_density(&params, &trace).map_err(|e| e.to_string())?;
            let b = mf
                .log_density(&mf_params, &trace)
                .map_err(|e| e.to_string())?;
            worst = worst.max((a - b).abs());
        }
    }
    check(
        worst < 1e-6,
        format!("max |log q_asvi - log q_mf| = {worst:.2e} over 6 tasks x 100 traces"),
    )
}

fn c3_parameter_count() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    for id in TaskId::ALL {
        let model = posterior(id, 0);
        let p: usize = model
            .latent_indices()
            .iter()
            .map(|&i| model.node(i).family.param_dim())
            .sum();
        let a = build_asvi(&model).unwrap().num_params();
        let m = build_mean_field(&model).unwrap().num_params();
        ok &= a == 2 * p && m == p;
        lines.push(format!("{id}: P={p} asvi={a} mf={m}"));
    }
    check(ok, lines.join(", "))
}

/// Composite Simpson rule over `n` (even) intervals.
fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
    let h = (b - a) / n as f64;
    let mut s = f(a) + f(b);
    for i in 1..n {
        s += f(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
    }
    s * h / 3.0
}

fn quadrature_moments(spec: &ConjugateSpec) -> (f64, f64) {
    let log_post = |m: f64| {
        -0.5 * spec.prior_precision * (m - spec.prior_mean).powi(2)
            - 0.5
                * spec.likelihood_precision
                * spec.data.iter().map(|x| (x - m).powi(2)).sum::<f64>()
    };
    let moments = |a: f64, b: f64, n: usize| {
        let h = (b - a) / n as f64;
        let peak = (0..=n)
            .map(|i| log_post(a + i as f64 * h))
            .fold(f64::NEG_INFINITY, f64::max);
        let z = simpson(|m| (log_post(m) - peak).exp(), a, b, n);
        let mean = simpson(|m| m * (log_post(m) - peak).exp(), a, b, n) / z;
        let var = simpson(|m| (m - mean).powi(2) * (log_post(m) - peak).exp(), a, b, n) / z;
        (mean, var)
    };
    let lo = spec.data.iter().copied().fold(spec.prior_mean, f64::min) - 100.0;
    let hi = spec.data.iter().copied().fold(spec.prior_mean, f64::max) + 100.0;
    let (m0, v0) = moments(lo, hi, 400_000);
    let sd = v0.sqrt();
    let (mean, var) = moments(m0 - 40.0 * sd, m0 + 40.0 * sd, 20_000);
    (mean, 1.0 / var)
}

fn c4_conjugate_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_mean: f64 = 0.0;
    let mut worst_prec: f64 = 0.0;
    let mut weights_exact = true;
    for _ in 0..50 {
        let n = rng.random_range(1..=20);
        let truth = rng.random_range(-5.0..5.0);
        let spec = ConjugateSpec {
            prior_mean: rng.random_range(-5.0..5.0),
            prior_precision: rng.random_range(-2.0f64..2.0).exp(),
            likelihood_precision: rng.random_range(-2.0f64..2.0).exp(),
            data: (0..n)
                .map(|_| truth + rng.random_range(-3.0..3.0))
                .collect(),
        };
        let post = conjugate_normal_posterior(&spec).map_err(|e| e.to_string())?;
        let (mean, prec) = quadrature_moments(&spec);
        worst_mean = worst_mean.max((post.mean - mean).abs() / mean.abs().max(1.0));
        worst_prec = worst_prec.max((post.precision - prec).abs() / prec.abs().max(1.0));
        weights_exact &= post.prior_weight + post.data_weight == 1.0;
    }
    check(
        worst_mean < 1e-6 && worst_prec < 1e-6 && weights_exact,
        format!("max rel error mean {worst_mean:.2e}, precision {worst_prec:.2e}, weights sum to 1: {weights_exact}"),
    )
}

fn c5_kalman_exactness() -> Outcome {
    let started = Instant::now();
    let task = Task::new(TaskId::Br);
    let data = task.generate_data(0).unwrap();
    let model = task.posterior_model(&data).unwrap();
    let (spec, obs) = task.kalman_problem(&data).ok_or("no Kalman form")?;
    let kalman = kalman_filter_smoother(&spec, &obs).map_err(|e| e.to_string())?;
    let true_sd = kalman.smoothed_sds();
    let config = TrainConfig {
        steps: 30_000,
        lr: Some(1e-3),
        n_samples: 8,
        seed: 0,
        early_stopping: None,
        average_last: 10_000,
        ..TrainConfig::default()
    };
    let errors = |kind: SurrogateKind| -> Result<(f64, f64, f64), String> {
        let r = fit(&model, kind, &config).map_err(|e| e.to_string())?;
        let elbo =
            elbo_estimate(&model, &r.surrogate, &r.params, 1000, 99).map_err(|e| e.to_string())?;
        let q = surrogate_moments(&r.surrogate, &r.params, 20_000, 5).map_err(|e| e.to_string())?;
        let mut m_err: f64 = 0.0;
        let mut sd_err: f64 = 0.0;
        for (k, sd) in true_sd.iter().enumerate() {
            m_err = m_err.max((q.means[k] - kalman.smoothed_means[k]).abs() / sd);
            sd_err = sd_err.max((q.sds[k] - sd).abs() / sd);
        }
        Ok((kalman.log_evidence - elbo.value, m_err, sd_err))
    };
    let (gap, m_err, sd_err) = errors(SurrogateKind::Asvi)?;
    let (_, mf_m, mf_sd) = errors(SurrogateKind::MeanField)?;
    let asvi_ok = gap.abs() < 0.05 && m_err < 0.05 && sd_err < 0.10;
    let mf_fails_wide = mf_m >= 0.10 || mf_sd >= 0.20;
    check(
        asvi_ok && mf_fails_wide,
        format!(
            "asvi: log Z - ELBO = {gap:.4}, max mean err {m_err:.4} SD, max SD rel err {sd_err:.4}; \
             mean-field: {mf_m:.3} SD, {mf_sd:.3} rel; {:.0}s",
            started.elapsed().as_secs_f64()
        ),
    )
}

fn c6_lorenz_ordering() -> Outcome {
    let started = Instant::now();
    let mut wins = 0;
    let mut pairs = Vec::new();
    for seed in 0..10u64 {
        let model = posterior(TaskId::Lz, seed);
        let mut neg = [0.0; 2];
        for (j, kind) in [SurrogateKind::Asvi, SurrogateKind::MeanField]
            .into_iter()
            .enumerate()
        {
            let config = TrainConfig {
                seed,
                ..TrainConfig::default()
            };
            let r = fit(&model, kind, &config).map_err(|e| e.to_string())?;
            neg[j] = -elbo_estimate(&model, &r.surrogate, &r.params, 1000, 1000 + seed)
                .map_err(|e| e.to_string())?
                .value;
        }
        if neg[0] < neg[1] {
            wins += 1;
        }
        pairs.push(format!("{:.0}/{:.0}", neg[0], neg[1]));
    }
    check(
        wins >= 9,
        format!(
            "asvi better on {wins}/10 seeds (neg ELBO asvi/mf: {}); {:.0}s",
            pairs.join(" "),
            started.elapsed().as_secs_f64()
        ),
    )
}

fn toy_three_node() -> JointModel {
    build_joint(vec![
        RandomVariableNode::root("a", Family::Normal, &[0.5, 1.5]),
        RandomVariableNode::new(
            "b",
            Family::LogNormal,
            &["a"],
            Link::new(|t, p| {
                let loc = t.mul_const(p[0], 0.3);
                Ok(vec![loc, t.constant(0.5)])
            }),
        ),
        RandomVariableNode::new(
            "y",
            Family::Normal,
            &["a", "b"],
            Link::new(|_, p| Ok(vec![p[0], p[1]])),
        ),
    ])
    .unwrap()
    .condition([("y", 1.2)])
    .unwrap()
}

fn max_fd_error(model: &JointModel, q: &SurrogateProgram, seed: u64) -> Result<f64, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let h = 1e-5;
    for point in 0..10u64 {
        let params = perturbed(&q.init_params(point).unwrap(), 0.3, &mut rng);
        let noise = common_noise(q, 4, seed + point);
        let mut tape = asvi::autodiff::Tape::new();
        let g = asvi::inference::elbo_gradient_with_noise(model, q, &params, &noise, &mut tape)
            .map_err(|e| e.to_string())?
            .gradient;
        for i in 0..params.len() {
            let mut up = params.clone();
            let mut down = params.clone();
            up[i] += h;
            down[i] -= h;
            let f = |p: &[f64]| elbo_estimate_with_noise(model, q, p, &noise).map(|e| e.value);
            let fd = (f(&up).map_err(|e| e.to_string())? - f(&down).map_err(|e| e.to_string())?)
                / (2.0 * h);
            worst = worst.max((g[i] - fd).abs() / g[i].abs().max(1.0));
        }
    }
    Ok(worst)
}

fn c7_gradient_fidelity() -> Outcome {
    let mut lines = Vec::new();
    let mut ok = true;
    let models = [
        ("br", posterior(TaskId::Br, 3)),
        ("es", posterior(TaskId::Es, 0)),
        ("toy", toy_three_node()),
    ];
    for (k, (name, model)) in models.iter().enumerate() {
        let q = build_asvi(model).map_err(|e| e.to_string())?;
        let err = max_fd_error(model, &q, 70 + k as u64)?;
        ok &= err < 1e-4;
        lines.push(format!("{name} {err:.2e}"));
    }
    check(
        ok,
        format!(
            "max relative error vs central differences: {}",
            lines.join(", ")
        ),
    )
}

fn two_bernoulli() -> JointModel {
    build_joint(vec![
        RandomVariableNode::root("z1", Family::Bernoulli, &[0.35]),
        RandomVariableNode::new(
            "z2",
            Family::Bernoulli,
            &["z1"],
            Link::new(|t, p| {
                let prob = t.mul_const(p[0], 0.5);
                Ok(vec![t.add_const(prob, 0.2)])
            }),
        ),
        RandomVariableNode::new(
            "y",
            Family::Normal,
            &["z1", "z2"],
            Link::new(|t, p| {
                let s = t.add(p[0], p[1]);
                Ok(vec![s, t.constant(0.7)])
            }),
        ),
    ])
    .unwrap()
    .condition([("y", 1.6)])
    .unwrap()
}

fn c8_score_function_unbiased() -> Outcome {
    let model = two_bernoulli();
    let q = build_asvi(&model).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let params = perturbed(&q.init_params(0).unwrap(), 0.7, &mut rng);
    let (_, exact) = enumerated_elbo_gradient(&model, &q, &params).map_err(|e| e.to_string())?;
    let n = 100_000;
    let d = params.len();
    let mut sum = vec![0.0; d];
    let mut sum_sq = vec![0.0; d];
    for s in 0..n as u64 {
        let g = elbo_value_and_gradient(&model, &q, &params, 1, s)
            .map_err(|e| e.to_string())?
            .gradient;
        for i in 0..d {
            sum[i] += g[i];
            sum_sq[i] += g[i] * g[i];
        }
    }
    let mut worst: f64 = 0.0;
    for i in 0..d {
        let mean = sum[i] / n as f64;
        let var = (sum_sq[i] / n as f64 - mean * mean) * n as f64 / (n - 1) as f64;
        let se = (var / n as f64).sqrt();
        let z = if se > 0.0 {
            (mean - exact[i]).abs() / se
        } else if mean == exact[i] {
            0.0
        } else {
            f64::INFINITY
        };
        worst = worst.max(z);
    }
    check(
        worst <= 4.0,
        format!("max |mean - exact| / SE = {worst:.2} over {d} coordinates, 1e5 draws"),
    )
}

fn c9_eight_schools() -> Outcome {
    let started = Instant::now();
    let model = posterior(TaskId::Es, 0);
    let mh = metropolis_sample(
        &model,
        &MetropolisConfig {
            steps: 50_000,
            burn_in: 20_000,
            seed: 1,
            ..MetropolisConfig::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let config = TrainConfig {
        seed: 0,
        early_stopping: None,
        ..TrainConfig::default()
    };
    let r = fit(&model, SurrogateKind::Asvi, &config).map_err(|e| e.to_string())?;
    let q = surrogate_moments(&r.surrogate, &r.params, 20_000, 5).map_err(|e| e.to_string())?;
    let schools = SchoolsData::classic().y.len();
    let mut names = vec!["mu".to_string()];
    names.extend((0..schools).map(|i| format!("theta[{i}]")));
    let mut worst: f64 = 0.0;
    for name in &names {
        let s = mh
            .summary(name)
            .ok_or(format!("no oracle summary for {name}"))?;
        let k = q
            .names
            .iter()
            .position(|n| n == name)
            .ok_or(format!("no surrogate marginal for {name}"))?;
        worst = worst.max((q.means[k] - s.mean).abs() / s.sd);
    }
    check(
        worst < 0.5 && mh.max_rhat <= RHAT_THRESHOLD,
        format!(
            "max |mean error| {worst:.3} SD over mu, theta; oracle R-hat {:.4}; {:.0}s",
            mh.max_rhat,
            started.elapsed().as_secs_f64()
        ),
    )
}

fn c10_determinism() -> Outcome {
    let dirs = [tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap()];
    let mut bytes = Vec::new();
    for dir in &dirs {
        let config = RunConfig {
            tasks: vec![TaskId::Br, TaskId::Lz, TaskId::Es],
            surrogates: SurrogateKind::ALL.to_vec(),
            steps: 300,
            seeds: vec![1, 2],
            out: dir.path().to_path_buf(),
            final_elbo_samples: 100,
            metropolis: MetropolisConfig {
                steps: 4000,
                burn_in: 2000,
                ..MetropolisConfig::default()
            },
            ..RunConfig::default()
        };
        let rows = run_benchmark(&config).map_err(|e| e.to_string())?;
        bytes.push((
            rows.len(),
            std::fs::read(dir.path().join("results.csv")).map_err(|e| e.to_string())?,
        ));
    }
    check(
        bytes[0] == bytes[1],
        format!(
            "{} rows, results.csv identical across reruns: {}",
            bytes[0].0,
            bytes[0] == bytes[1]
        ),
    )
}

fn main() {
    let criteria: [Criterion; 10] = [
        ("prior containment", c1_prior_containment),
        ("mean-field degeneration", c2_mean_field_degeneration),
        ("parameter count", c3_parameter_count),
        ("conjugate oracle", c4_conjugate_oracle),
        ("Kalman exactness on BR", c5_kalman_exactness),
        ("ELBO ordering on LZ", c6_lorenz_ordering),
        ("gradient fidelity", c7_gradient_fidelity),
        ("score-function unbiasedness", c8_score_function_unbiased),
        ("Eight Schools sanity", c9_eight_schools),
        ("determinism", c10_determinism),
    ];
    let only: Vec<usize> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|t| t.trim().parse().ok()).collect())
        .unwrap_or_default();
    let mut failures = 0;
    for (k, (name, run)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(k + 1)) {
            continue;
        }
        match run() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", k + 1),
            Err(detail) => {
                failures += 1;
                println!("FAIL {:>2} {name}: {detail}", k + 1);
            }
        }
    }
    if failures > 0 {
        std::process::exit(1);
    }
}
