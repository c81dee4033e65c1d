//! Variational programs built automatically from a [`JointModel`].
//!
//! * `asvi` replays the prior program: every latent conditional receives the
//!   parameters `lam * theta(parents) + (1 - lam) * alpha`, where `theta` is
//!   the prior link evaluated at the surrogate's own parent draws.
//! * `mean-field` keeps only the `alpha` half (`lam` pinned at 0).
//! * `ar1` is a linear-Gaussian chain over unconstrained latent values in
//!   topological order.
//! * `mvn` is a full-covariance Gaussian over the unconstrained latent space.
//!
//! Parameters live in one flat unconstrained vector with a name index; each
//! surrogate knows how to initialize, sample and score it on an autodiff tape.

use std::fmt;
use std::str::FromStr;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Var};
use crate::distributions::{Bijector, DistError, Family};
use crate::model::{JointModel, ModelError, Trace};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SurrogateError {
    #[error("node `{node}`: {family} is not supported by the {kind} surrogate")]
    UnsupportedFamily {
        node: String,
        family: &'static str,
        kind: SurrogateKind,
    },
    #[error("length mismatch: {0}")]
    LengthMismatch(String),
    #[error("unknown parameter `{0}`")]
    UnknownParameter(String),
    #[error("surrogate was built for a different model: {0}")]
    IncompatibleModel(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dist(#[from] DistError),
}

impl From<crate::autodiff::AdError> for SurrogateError {
    fn from(e: crate::autodiff::AdError) -> Self {
        SurrogateError::Dist(e.into())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SurrogateKind {
    #[serde(rename = "asvi")]
    Asvi,
    #[serde(rename = "mean-field")]
    MeanField,
    #[serde(rename = "ar1")]
    Ar1,
    #[serde(rename = "mvn")]
    Mvn,
}

impl SurrogateKind {
    pub const ALL: [SurrogateKind; 4] = [
        SurrogateKind::Asvi,
        SurrogateKind::MeanField,
        SurrogateKind::Ar1,
        SurrogateKind::Mvn,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SurrogateKind::Asvi => "asvi",
            SurrogateKind::MeanField => "mean-field",
            SurrogateKind::Ar1 => "ar1",
            SurrogateKind::Mvn => "mvn",
        }
    }

    /// Adam learning rate used when none is configured.
    pub fn default_learning_rate(self) -> f64 {
        match self {
            SurrogateKind::Mvn => 1e-3,
            _ => 1e-2,
        }
    }
}

impl fmt::Display for SurrogateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SurrogateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "asvi" => Ok(SurrogateKind::Asvi),
            "mean-field" | "meanfield" | "mf" => Ok(SurrogateKind::MeanField),
            "ar1" => Ok(SurrogateKind::Ar1),
            "mvn" => Ok(SurrogateKind::Mvn),
            other => Err(format!(
                "unknown surrogate `{other}` (expected asvi, mean-field, ar1 or mvn)"
            )),
        }
    }
}

/// `lam * theta + (1 - lam) * alpha`, elementwise.
pub fn convex_update(
    theta: &[f64],
    lam: &[f64],
    alpha: &[f64],
) -> Result<Vec<f64>, SurrogateError> {
    if theta.len() != lam.len() || theta.len() != alpha.len() {
        return Err(SurrogateError::LengthMismatch(format!(
            "theta {}, lam {}, alpha {}",
            theta.len(),
            lam.len(),
            alpha.len()
        )));
    }
    Ok(theta
        .iter()
        .zip(lam)
        .zip(alpha)
        .map(|((&t, &l), &a)| l * t + (1.0 - l) * a)
        .collect())
}

fn convex_update_var(tape: &mut Tape, theta: Var, lam: Var, alpha: Var) -> Var {
    let lt = tape.mul(lam, theta);
    let nl = tape.neg(lam);
    let one_minus = tape.add_const(nl, 1.0);
    let la = tape.mul(one_minus, alpha);
    tape.add(lt, la)
}

/// Offsets of one family parameter's `(lam, alpha)` pair in the flat vector.
#[derive(Debug, Clone)]
struct ParamSlot {
    lam: Option<usize>,
    alpha: usize,
    alpha_len: usize,
    /// Constrained dimension of the parameter.
    dim: usize,
    bijector: Bijector,
}

#[derive(Debug, Clone)]
struct ConvexNode {
    node: usize,
    slots: Vec<ParamSlot>,
}

#[derive(Debug, Clone)]
struct Ar1Node {
    node: usize,
    /// Position of the predecessor in the latent list when `A_t` is trainable.
    prev: Option<usize>,
    a: Option<usize>,
    b: usize,
    d: usize,
    support: Bijector,
}

#[derive(Debug, Clone)]
struct MvnLayout {
    mean: usize,
    chol: usize,
    supports: Vec<Bijector>,
}

#[derive(Debug, Clone)]
enum Rules {
    Convex(Vec<ConvexNode>),
    Ar1(Vec<Ar1Node>),
    Mvn(MvnLayout),
}

/// Decoded `(lam, alpha)` for one family parameter of one node.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvexUpdateParams {
    pub param: &'static str,
    /// `None` for mean-field surrogates, where `lam` is pinned at 0.
    pub lam_logit: Option<f64>,
    pub alpha_unconstrained: Vec<f64>,
    pub bijector: Bijector,
}

impl ConvexUpdateParams {
    pub fn lam(&self) -> f64 {
        self.lam_logit.map(crate::autodiff::sigmoid).unwrap_or(0.0)
    }

    pub fn alpha(&self) -> Vec<f64> {
        self.bijector.forward(&self.alpha_unconstrained)
    }
}

/// Decoded AR(1) parameters for one latent node.
#[derive(Debug, Clone, PartialEq)]
pub struct Ar1Params {
    pub node: String,
    /// Linear coefficient on the predecessor's unconstrained value (0 when fixed).
    pub a: f64,
    pub b: f64,
    /// Conditional variance, in unconstrained space.
    pub d: f64,
}

/// Decoded full-covariance Gaussian parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MvnParams {
    pub mean: Vec<f64>,
    /// Row-major dense lower-triangular Cholesky factor.
    pub cholesky: Vec<Vec<f64>>,
}

/// One draw from a surrogate, recorded on a tape.
#[derive(Debug, Clone)]
pub struct SurrogateDraw {
    /// One variable per model node in topological order; observed nodes hold constants.
    pub values: Vec<Var>,
    pub log_q: Var,
    /// Summed surrogate log-mass of discrete latents, when there are any.
    pub discrete_log_q: Option<Var>,
}

#[derive(Debug, Clone)]
pub struct SurrogateProgram {
    kind: SurrogateKind,
    model: JointModel,
    latent: Vec<usize>,
    names: Vec<String>,
    rules: Rules,
    init_means: Vec<f64>,
    init_scales: Vec<f64>,
}

/// Positive-parameter bijector for AR(1) variances and Cholesky diagonals.
const LOG_SCALE: Bijector = Bijector::Exp;

/// Build the convex-update surrogate of every latent conditional.
pub fn build_asvi(model: &JointModel) -> Result<SurrogateProgram, SurrogateError> {
    build_convex(model, SurrogateKind::Asvi)
}

/// Same node structure as [`build_asvi`] with `lam` fixed to 0.
pub fn build_mean_field(model: &JointModel) -> Result<SurrogateProgram, SurrogateError> {
    build_convex(model, SurrogateKind::MeanField)
}

fn build_convex(
    model: &JointModel,
    kind: SurrogateKind,
) -> Result<SurrogateProgram, SurrogateError> {
    let latent = model.latent_indices();
    let mut names = Vec::new();
    let mut nodes = Vec::with_capacity(latent.len());
    for &i in &latent {
        let node = model.node(i);
        let mut slots = Vec::new();
        for spec in node.family.param_schema() {
            let lam = (kind == SurrogateKind::Asvi).then(|| {
                names.push(format!("{}.{}.lam_logit", node.name, spec.name));
                names.len() - 1
            });
            let alpha = names.len();
            let alpha_len = spec.constraint.free_dim();
            if alpha_len == 1 {
                names.push(format!("{}.{}.alpha", node.name, spec.name));
            } else {
                for k in 0..alpha_len {
                    names.push(format!("{}.{}.alpha[{k}]", node.name, spec.name));
                }
            }
            slots.push(ParamSlot {
                lam,
                alpha,
                alpha_len,
                dim: spec.constraint.dim(),
                bijector: spec.constraint.bijector(),
            });
        }
        nodes.push(ConvexNode { node: i, slots });
    }
    Ok(SurrogateProgram {
        kind,
        model: model.clone(),
        latent,
        names,
        rules: Rules::Convex(nodes),
        init_means: Vec::new(),
        init_scales: Vec::new(),
    })
}

fn require_continuous(
    model: &JointModel,
    i: usize,
    kind: SurrogateKind,
) -> Result<Bijector, SurrogateError> {
    let node = model.node(i);
    node.family
        .support_bijector()
        .ok_or_else(|| SurrogateError::UnsupportedFamily {
            node: node.name.clone(),
            family: node.family.name(),
            kind,
        })
}

/// Prior moments of each latent in unconstrained space, from forward samples.
fn prior_unconstrained_moments(
    model: &JointModel,
    latent: &[usize],
) -> Result<(Vec<f64>, Vec<f64>), SurrogateError> {
    const DRAWS: usize = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    let mut sum = vec![0.0; latent.len()];
    let mut sum_sq = vec![0.0; latent.len()];
    let mut count = vec![0usize; latent.len()];
    for _ in 0..DRAWS {
        let trace = model.sample_forward_with(&mut rng)?;
        let values = model.dense_values(&trace)?;
        for (k, &i) in latent.iter().enumerate() {
            let support = model
                .node(i)
                .family
                .support_bijector()
                .unwrap_or(Bijector::Identity);
            if let Ok(z) = support.inverse(&[values[i]]) {
                if z[0].is_finite() {
                    sum[k] += z[0];
                    sum_sq[k] += z[0] * z[0];
                    count[k] += 1;
                }
            }
        }
    }
    let mut means = Vec::with_capacity(latent.len());
    let mut scales = Vec::with_capacity(latent.len());
    for k in 0..latent.len() {
        let n = count[k].max(1) as f64;
        let m = sum[k] / n;
        let var = (sum_sq[k] / n - m * m).max(0.0);
        means.push(m);
        scales.push(var.sqrt().clamp(1e-3, 1e3));
    }
    Ok((means, scales))
}

/// Linear-Gaussian chain over unconstrained latents in topological order.
/// `A_t` is pinned at 0 when node `t` or its predecessor is marked global.
pub fn build_ar1(model: &JointModel) -> Result<SurrogateProgram, SurrogateError> {
    let latent = model.latent_indices();
    let mut names = Vec::new();
    let mut nodes = Vec::with_capacity(latent.len());
    for (k, &i) in latent.iter().enumerate() {
        let support = require_continuous(model, i, SurrogateKind::Ar1)?;
        let name = &model.node(i).name;
        let linked = k > 0 && !model.node(i).global && !model.node(latent[k - 1]).global;
        let a = linked.then(|| {
            names.push(format!("{name}.ar1.a"));
            names.len() - 1
        });
        names.push(format!("{name}.ar1.b"));
        let b = names.len() - 1;
        names.push(format!("{name}.ar1.log_d"));
        let d = names.len() - 1;
        nodes.push(Ar1Node {
            node: i,
            prev: if linked { Some(k - 1) } else { None },
            a,
            b,
            d,
            support,
        });
    }
    let (init_means, init_scales) = prior_unconstrained_moments(model, &latent)?;
    Ok(SurrogateProgram {
        kind: SurrogateKind::Ar1,
        model: model.clone(),
        latent,
        names,
        rules: Rules::Ar1(nodes),
        init_means,
        init_scales,
    })
}

/// Full-covariance Gaussian over the unconstrained latent vector, pushed
/// through each latent's support bijector.
pub fn build_mvn(model: &JointModel) -> Result<SurrogateProgram, SurrogateError> {
    let latent = model.latent_indices();
    let supports = latent
        .iter()
        .map(|&i| require_continuous(model, i, SurrogateKind::Mvn))
        .collect::<Result<Vec<_>, _>>()?;
    let d = latent.len();
    let mut names: Vec<String> = latent
        .iter()
        .map(|&i| format!("{}.mvn.mean", model.node(i).name))
        .collect();
    for r in 0..d {
        for c in 0..=r {
            if r == c {
                names.push(format!("mvn.chol[{r},{c}].log"));
            } else {
                names.push(format!("mvn.chol[{r},{c}]"));
            }
        }
    }
    let (init_means, init_scales) = prior_unconstrained_moments(model, &latent)?;
    Ok(SurrogateProgram {
        kind: SurrogateKind::Mvn,
        model: model.clone(),
        latent,
        names,
        rules: Rules::Mvn(MvnLayout {
            mean: 0,
            chol: d,
            supports,
        }),
        init_means,
        init_scales,
    })
}

pub fn build_surrogate(
    model: &JointModel,
    kind: SurrogateKind,
) -> Result<SurrogateProgram, SurrogateError> {
    match kind {
        SurrogateKind::Asvi => build_asvi(model),
        SurrogateKind::MeanField => build_mean_field(model),
        SurrogateKind::Ar1 => build_ar1(model),
        SurrogateKind::Mvn => build_mvn(model),
    }
}

#[inline]
fn tri(r: usize, c: usize) -> usize {
    r * (r + 1) / 2 + c
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    kind: SurrogateKind,
    params: IndexMap<String, f64>,
}

impl SurrogateProgram {
    pub fn kind(&self) -> SurrogateKind {
        self.kind
    }

    pub fn model(&self) -> &JointModel {
        &self.model
    }

    /// Latent node indices (into the model) in sampling order.
    pub fn latent_indices(&self) -> &[usize] {
        &self.latent
    }

    pub fn num_params(&self) -> usize {
        self.names.len()
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_index(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Check that `model` has the same node order and observation pattern.
    pub fn check_compatible(&self, model: &JointModel) -> Result<(), SurrogateError> {
        if model.names() != self.model.names() {
            return Err(SurrogateError::IncompatibleModel(
                "node names differ".into(),
            ));
        }
        if model.latent_indices() != self.latent {
            return Err(SurrogateError::IncompatibleModel(
                "latent sets differ".into(),
            ));
        }
        Ok(())
    }

    /// Initial unconstrained parameter vector.
    ///
    /// Convex-update surrogates draw each `lam` logit uniformly from `[-1, 1]`
    /// and set `alpha` to the prior parameter at prior-mean parent values,
    /// falling back to a standard-normal draw when that value is unusable.
    pub fn init_params(&self, seed: u64) -> Result<Vec<f64>, SurrogateError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = vec![0.0; self.names.len()];
        match &self.rules {
            Rules::Convex(nodes) => {
                let means = self.model.prior_mean_values()?;
                for cn in nodes {
                    let theta = self.model.node_params(cn.node, &means).ok();
                    let mut offset = 0;
                    for slot in &cn.slots {
                        if let Some(l) = slot.lam {
                            params[l] = rng.random_range(-1.0..=1.0);
                        }
                        let alpha = theta
                            .as_ref()
                            .and_then(|t| slot.bijector.inverse(&t[offset..offset + slot.dim]).ok())
                            .filter(|a| a.iter().all(|v| v.is_finite()));
                        match alpha {
                            Some(a) => {
                                params[slot.alpha..slot.alpha + slot.alpha_len].copy_from_slice(&a)
                            }
                            None => {
                                for p in &mut params[slot.alpha..slot.alpha + slot.alpha_len] {
                                    *p = rng.sample(StandardNormal);
                                }
                            }
                        }
                        offset += slot.dim;
                    }
                }
            }
            Rules::Ar1(nodes) => {
                for (k, n) in nodes.iter().enumerate() {
                    params[n.b] = self.init_means[k];
                    params[n.d] = 2.0 * self.init_scales[k].ln();
                }
            }
            Rules::Mvn(layout) => {
                for k in 0..self.latent.len() {
                    params[layout.mean + k] = self.init_means[k];
                    params[layout.chol + tri(k, k)] = self.init_scales[k].ln();
                }
            }
        }
        Ok(params)
    }

    /// Base noise for one draw: one scalar per latent (normal for continuous
    /// nodes, uniform for discrete ones).
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.latent
            .iter()
            .map(|&i| match self.rules {
                Rules::Convex(_) => self.model.node(i).family.draw_noise(rng),
                _ => rng.sample(StandardNormal),
            })
            .collect()
    }

    fn check_len(&self, params: usize) -> Result<(), SurrogateError> {
        if params != self.names.len() {
            return Err(SurrogateError::LengthMismatch(format!(
                "surrogate has {} parameters, got {params}",
                self.names.len()
            )));
        }
        Ok(())
    }

    /// Convex-updated family parameters for one node given its prior link output.
    fn convex_node_params(
        &self,
        tape: &mut Tape,
        cn: &ConvexNode,
        params: &[Var],
        values: &[Var],
    ) -> Result<Vec<Var>, SurrogateError> {
        let theta = match self.kind {
            SurrogateKind::Asvi => Some(self.model.node_params_var(tape, cn.node, values)?),
            _ => None,
        };
        let mut out = Vec::new();
        let mut offset = 0;
        for slot in &cn.slots {
            let alpha = slot
                .bijector
                .forward_var(tape, &params[slot.alpha..slot.alpha + slot.alpha_len]);
            match (slot.lam, &theta) {
                (Some(l), Some(theta)) => {
                    let lam = tape.sigmoid(params[l]);
                    for (k, &a) in alpha.iter().enumerate() {
                        out.push(convex_update_var(tape, theta[offset + k], lam, a));
                    }
                }
                _ => out.extend(alpha),
            }
            offset += slot.dim;
        }
        Ok(out)
    }

    /// Draw from the surrogate on `tape`, returning per-node values and `log q`.
    pub fn sample_var(
        &self,
        tape: &mut Tape,
        params: &[Var],
        noise: &[f64],
    ) -> Result<SurrogateDraw, SurrogateError> {
        self.check_len(params.len())?;
        if noise.len() != self.latent.len() {
            return Err(SurrogateError::LengthMismatch(format!(
                "expected {} noise values, got {}",
                self.latent.len(),
                noise.len()
            )));
        }
        let n = self.model.len();
        let mut values: Vec<Option<Var>> = (0..n)
            .map(|i| self.model.observed_value(i).map(|v| tape.constant(v)))
            .collect();
        let mut terms = Vec::with_capacity(self.latent.len());
        let mut discrete_terms = Vec::new();

        match &self.rules {
            Rules::Convex(nodes) => {
                let placeholder = tape.constant(f64::NAN);
                for (cn, &eps) in nodes.iter().zip(noise) {
                    let dense: Vec<Var> = values.iter().map(|v| v.unwrap_or(placeholder)).collect();
                    let q = self.convex_node_params(tape, cn, params, &dense)?;
                    let family = self.model.node(cn.node).family;
                    let x = if family.is_discrete() {
                        let v = family.sample_score(&tape.values(&q), eps)?;
                        tape.constant(v)
                    } else {
                        family.sample_reparam(tape, &q, eps)?
                    };
                    let lp = family.log_prob_var(tape, &q, x)?;
                    if family.is_discrete() {
                        discrete_terms.push(lp);
                    }
                    terms.push(lp);
                    values[cn.node] = Some(x);
                }
            }
            Rules::Ar1(nodes) => {
                let mut z: Vec<Var> = Vec::with_capacity(nodes.len());
                for (n, &eps) in nodes.iter().zip(noise) {
                    let mean = self.ar1_mean(tape, n, params, &z);
                    let var = LOG_SCALE.forward_var(tape, &[params[n.d]])[0];
                    let sd = tape.sqrt(var)?;
                    let step = tape.mul_const(sd, eps);
                    let zt = tape.add(mean, step);
                    // log N(z; mean, sd) with z - mean = sd * eps
                    let ls = tape.log(sd)?;
                    let nls = tape.neg(ls);
                    let lp = tape.add_const(nls, -0.5 * eps * eps - HALF_LN_2PI);
                    let x = n.support.forward_var(tape, &[zt])[0];
                    let ldj = n.support.forward_log_det_jacobian_var(tape, &[zt])?;
                    terms.push(tape.sub(lp, ldj));
                    values[n.node] = Some(x);
                    z.push(zt);
                }
            }
            Rules::Mvn(layout) => {
                let d = self.latent.len();
                let eps: Vec<Var> = noise.iter().map(|&e| tape.constant(e)).collect();
                let mut base = 0.0;
                for (r, &i) in self.latent.iter().enumerate() {
                    let mut acc = params[layout.mean + r];
                    for c in 0..r {
                        let prod = tape.mul(params[layout.chol + tri(r, c)], eps[c]);
                        acc = tape.add(acc, prod);
                    }
                    let diag = LOG_SCALE.forward_var(tape, &[params[layout.chol + tri(r, r)]])[0];
                    let prod = tape.mul(diag, eps[r]);
                    let zr = tape.add(acc, prod);
                    // ln L_rr is the raw parameter under the exp bijector
                    let nl = tape.neg(params[layout.chol + tri(r, r)]);
                    terms.push(nl);
                    base += -0.5 * noise[r] * noise[r] - HALF_LN_2PI;
                    let support = layout.supports[r];
                    let x = support.forward_var(tape, &[zr])[0];
                    let ldj = support.forward_log_det_jacobian_var(tape, &[zr])?;
                    terms.push(tape.neg(ldj));
                    values[i] = Some(x);
                }
                debug_assert_eq!(d, noise.len());
                terms.push(tape.constant(base));
            }
        }

        let log_q = tape.sum(&terms);
        let discrete_log_q = (!discrete_terms.is_empty()).then(|| tape.sum(&discrete_terms));
        Ok(SurrogateDraw {
            values: values
                .into_iter()
                .map(|v| v.expect("all nodes assigned"))
                .collect(),
            log_q,
            discrete_log_q,
        })
    }

    fn ar1_mean(&self, tape: &mut Tape, n: &Ar1Node, params: &[Var], z: &[Var]) -> Var {
        match (n.a, n.prev) {
            (Some(a), Some(prev)) => {
                let az = tape.mul(params[a], z[prev]);
                tape.add(az, params[n.b])
            }
            _ => params[n.b],
        }
    }

    /// `log q(x)` for a dense per-node value vector (observed entries ignored).
    pub fn log_density_var(
        &self,
        tape: &mut Tape,
        params: &[Var],
        values: &[f64],
    ) -> Result<Var, SurrogateError> {
        self.check_len(params.len())?;
        if values.len() != self.model.len() {
            return Err(SurrogateError::LengthMismatch(format!(
                "expected {} node values, got {}",
                self.model.len(),
                values.len()
            )));
        }
        let vars: Vec<Var> = (0..self.model.len())
            .map(|i| tape.constant(self.model.observed_value(i).unwrap_or(values[i])))
            .collect();
        let mut terms = Vec::with_capacity(self.latent.len());
        match &self.rules {
            Rules::Convex(nodes) => {
                for cn in nodes {
                    let q = self.convex_node_params(tape, cn, params, &vars)?;
                    let family = self.model.node(cn.node).family;
                    terms.push(family.log_prob_var(tape, &q, vars[cn.node])?);
                }
            }
            Rules::Ar1(nodes) => {
                let mut z = Vec::with_capacity(nodes.len());
                for n in nodes {
                    let zt = match n.support.inverse(&[values[n.node]]) {
                        Ok(u) => tape.constant(u[0]),
                        Err(_) => return Ok(tape.constant(f64::NEG_INFINITY)),
                    };
                    let mean = self.ar1_mean(tape, n, params, &z);
                    let var = LOG_SCALE.forward_var(tape, &[params[n.d]])[0];
                    let sd = tape.sqrt(var)?;
                    let lp = Family::Normal.log_prob_var(tape, &[mean, sd], zt)?;
                    let ldj = n.support.forward_log_det_jacobian_var(tape, &[zt])?;
                    terms.push(tape.sub(lp, ldj));
                    z.push(zt);
                }
            }
            Rules::Mvn(layout) => {
                // forward substitution: L eps = z - mean
                let mut eps: Vec<Var> = Vec::with_capacity(self.latent.len());
                for (r, &i) in self.latent.iter().enumerate() {
                    let support = layout.supports[r];
                    let zr = match support.inverse(&[values[i]]) {
                        Ok(u) => tape.constant(u[0]),
                        Err(_) => return Ok(tape.constant(f64::NEG_INFINITY)),
                    };
                    let mut resid = tape.sub(zr, params[layout.mean + r]);
                    for (c, &e) in eps.iter().enumerate() {
                        let prod = tape.mul(params[layout.chol + tri(r, c)], e);
                        resid = tape.sub(resid, prod);
                    }
                    let diag = LOG_SCALE.forward_var(tape, &[params[layout.chol + tri(r, r)]])[0];
                    let er = tape.div(resid, diag);
                    let sq = tape.square(er);
                    let quad = tape.mul_const(sq, -0.5);
                    let lp = tape.sub(quad, params[layout.chol + tri(r, r)]);
                    let lp = tape.add_const(lp, -HALF_LN_2PI);
                    let ldj = support.forward_log_det_jacobian_var(tape, &[zr])?;
                    terms.push(tape.sub(lp, ldj));
                    eps.push(er);
                }
            }
        }
        Ok(tape.sum(&terms))
    }

    /// `log q` of the latent values in `trace`.
    pub fn log_density(&self, params: &[f64], trace: &Trace) -> Result<f64, SurrogateError> {
        let values = self.model.dense_values(trace)?;
        let mut tape = Tape::new();
        let p: Vec<Var> = params.iter().map(|&v| tape.constant(v)).collect();
        let lq = self.log_density_var(&mut tape, &p, &values)?;
        Ok(tape.value(lq))
    }

    /// Ancestral draw from the surrogate with its log-density.
    pub fn sample_and_log_prob(
        &self,
        params: &[f64],
        seed: u64,
    ) -> Result<(Trace, f64), SurrogateError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_and_log_prob_with(params, &mut rng)
    }

    pub fn sample_and_log_prob_with<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        rng: &mut R,
    ) -> Result<(Trace, f64), SurrogateError> {
        let noise = self.draw_noise(rng);
        let mut tape = Tape::new();
        let p: Vec<Var> = params.iter().map(|&v| tape.constant(v)).collect();
        let draw = self.sample_var(&mut tape, &p, &noise)?;
        let values: IndexMap<String, f64> = self
            .latent
            .iter()
            .map(|&i| (self.model.node(i).name.clone(), tape.value(draw.values[i])))
            .collect();
        Ok((Trace::from_values(values), tape.value(draw.log_q)))
    }

    /// Dense per-node values of one draw (observed nodes carry their observations).
    pub fn sample_dense<R: Rng + ?Sized>(
        &self,
        params: &[f64],
        rng: &mut R,
    ) -> Result<Vec<f64>, SurrogateError> {
        let noise = self.draw_noise(rng);
        let mut tape = Tape::new();
        let p: Vec<Var> = params.iter().map(|&v| tape.constant(v)).collect();
        let draw = self.sample_var(&mut tape, &p, &noise)?;
        Ok(tape.values(&draw.values))
    }

    /// Decoded `(lam, alpha)` pairs of a node (convex-update surrogates only).
    pub fn convex_params(&self, params: &[f64], node: &str) -> Option<Vec<ConvexUpdateParams>> {
        let Rules::Convex(nodes) = &self.rules else {
            return None;
        };
        let idx = self.model.index_of(node)?;
        let cn = nodes.iter().find(|c| c.node == idx)?;
        let schema = self.model.node(idx).family.param_schema();
        Some(
            cn.slots
                .iter()
                .zip(schema)
                .map(|(s, spec)| ConvexUpdateParams {
                    param: spec.name,
                    lam_logit: s.lam.map(|l| params[l]),
                    alpha_unconstrained: params[s.alpha..s.alpha + s.alpha_len].to_vec(),
                    bijector: s.bijector,
                })
                .collect(),
        )
    }

    /// Set every `lam` logit of a convex-update surrogate to `logit`.
    pub fn set_all_lam_logits(&self, params: &mut [f64], logit: f64) {
        if let Rules::Convex(nodes) = &self.rules {
            for slot in nodes.iter().flat_map(|n| &n.slots) {
                if let Some(l) = slot.lam {
                    params[l] = logit;
                }
            }
        }
    }

    /// Copy the `alpha` entries of a convex-update parameter vector into the
    /// layout of another convex-update surrogate over the same model.
    pub fn transfer_alpha(&self, params: &[f64], target: &SurrogateProgram) -> Option<Vec<f64>> {
        let (Rules::Convex(src), Rules::Convex(dst)) = (&self.rules, &target.rules) else {
            return None;
        };
        let mut out = vec![0.0; target.num_params()];
        for (a, b) in src.iter().zip(dst) {
            for (sa, sb) in a.slots.iter().zip(&b.slots) {
                out[sb.alpha..sb.alpha + sb.alpha_len]
                    .copy_from_slice(&params[sa.alpha..sa.alpha + sa.alpha_len]);
            }
        }
        Some(out)
    }

    pub fn ar1_params(&self, params: &[f64]) -> Option<Vec<Ar1Params>> {
        let Rules::Ar1(nodes) = &self.rules else {
            return None;
        };
        Some(
            nodes
                .iter()
                .map(|n| Ar1Params {
                    node: self.model.node(n.node).name.clone(),
                    a: n.a.map(|a| params[a]).unwrap_or(0.0),
                    b: params[n.b],
                    d: LOG_SCALE.forward(&[params[n.d]])[0],
                })
                .collect(),
        )
    }

    pub fn mvn_params(&self, params: &[f64]) -> Option<MvnParams> {
        let Rules::Mvn(layout) = &self.rules else {
            return None;
        };
        let d = self.latent.len();
        let mean = params[layout.mean..layout.mean + d].to_vec();
        let cholesky = (0..d)
            .map(|r| {
                (0..d)
                    .map(|c| match c.cmp(&r) {
                        std::cmp::Ordering::Less => params[layout.chol + tri(r, c)],
                        std::cmp::Ordering::Equal => {
                            LOG_SCALE.forward(&[params[layout.chol + tri(r, r)]])[0]
                        }
                        std::cmp::Ordering::Greater => 0.0,
                    })
                    .collect()
            })
            .collect();
        Some(MvnParams { mean, cholesky })
    }

    /// Serialize a parameter vector as a flat JSON object of named values.
    pub fn params_to_json(&self, params: &[f64]) -> Result<String, SurrogateError> {
        self.check_len(params.len())?;
        let ck = Checkpoint {
            kind: self.kind,
            params: self
                .names
                .iter()
                .cloned()
                .zip(params.iter().copied())
                .collect(),
        };
        serde_json::to_string_pretty(&ck).map_err(|e| SurrogateError::Checkpoint(e.to_string()))
    }

    /// Restore a parameter vector written by [`SurrogateProgram::params_to_json`].
    pub fn params_from_json(&self, json: &str) -> Result<Vec<f64>, SurrogateError> {
        let ck: Checkpoint =
            serde_json::from_str(json).map_err(|e| SurrogateError::Checkpoint(e.to_string()))?;
        if ck.kind != self.kind {
            return Err(SurrogateError::Checkpoint(format!(
                "checkpoint is for {}, surrogate is {}",
                ck.kind, self.kind
            )));
        }
        if ck.params.len() != self.names.len() {
            return Err(SurrogateError::LengthMismatch(format!(
                "checkpoint has {} parameters, surrogate has {}",
                ck.params.len(),
                self.names.len()
            )));
        }
        self.names
            .iter()
            .map(|n| {
                ck.params
                    .get(n)
                    .copied()
                    .ok_or_else(|| SurrogateError::UnknownParameter(n.clone()))
            })
            .collect()
    }
}

/// Total number of conditional-distribution parameters over the latent nodes
/// (free scalars per parameter).
pub fn conditional_param_count(model: &JointModel) -> usize {
    model
        .latent_indices()
        .into_iter()
        .flat_map(|i| model.node(i).family.param_schema())
        .map(|s| s.constraint.free_dim())
        .sum()
}
