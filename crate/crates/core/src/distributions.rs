//! Distribution families, their default parameterizations and the bijectors
//! that map unconstrained reals onto each parameter's domain.
//!
//! Every family exposes two evaluation paths: plain `f64` closed forms used by
//! samplers and oracles, and tape-recorded versions used wherever gradients
//! must flow through parameters.

use std::f64::consts::{LN_2, PI};

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{self, AdError, Tape, Var};

/// Lower bound added to every softplus-constrained scale parameter.
pub const SCALE_FLOOR: f64 = 1e-6;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DistError {
    #[error("invalid parameters for {family}: {reason}")]
    InvalidParams {
        family: &'static str,
        reason: String,
    },
    #[error("{0} is discrete; use sample_score instead of sample_reparam")]
    NotReparameterizable(&'static str),
    #[error("{0} is continuous; use sample_reparam instead of sample_score")]
    NotDiscrete(&'static str),
    #[error("cannot unconstrain {value} under {bijector:?}: on or outside the boundary")]
    Boundary { bijector: Bijector, value: f64 },
    #[error(transparent)]
    Ad(#[from] AdError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Family {
    Normal,
    HalfNormal,
    LogNormal,
    Bernoulli,
    Categorical { categories: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Constraint {
    Real,
    Positive,
    UnitInterval,
    Simplex(usize),
}

impl Constraint {
    /// Number of constrained scalars.
    pub fn dim(self) -> usize {
        match self {
            Constraint::Simplex(k) => k,
            _ => 1,
        }
    }

    /// Number of free (unconstrained) scalars.
    pub fn free_dim(self) -> usize {
        match self {
            Constraint::Simplex(k) => k - 1,
            _ => 1,
        }
    }

    pub fn bijector(self) -> Bijector {
        match self {
            Constraint::Real => Bijector::Identity,
            Constraint::Positive => Bijector::Softplus,
            Constraint::UnitInterval => Bijector::Sigmoid,
            Constraint::Simplex(_) => Bijector::SoftmaxCentered,
        }
    }

    /// Whether `values` lie strictly inside the constraint region.
    pub fn contains_interior(self, values: &[f64]) -> bool {
        match self {
            Constraint::Real => values[0].is_finite(),
            Constraint::Positive => values[0].is_finite() && values[0] > SCALE_FLOOR,
            Constraint::UnitInterval => values[0] > 0.0 && values[0] < 1.0,
            Constraint::Simplex(k) => {
                values.len() == k
                    && values.iter().all(|&p| p > 0.0 && p < 1.0)
                    && (values.iter().sum::<f64>() - 1.0).abs() < 1e-9
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: &'static str,
    pub constraint: Constraint,
}

impl Family {
    pub fn name(&self) -> &'static str {
        match self {
            Family::Normal => "Normal",
            Family::HalfNormal => "HalfNormal",
            Family::LogNormal => "LogNormal",
            Family::Bernoulli => "Bernoulli",
            Family::Categorical { .. } => "Categorical",
        }
    }

    pub fn param_schema(&self) -> Vec<ParamSpec> {
        let p = |name, constraint| ParamSpec { name, constraint };
        match *self {
            Family::Normal | Family::LogNormal => {
                vec![p("loc", Constraint::Real), p("scale", Constraint::Positive)]
            }
            Family::HalfNormal => vec![p("scale", Constraint::Positive)],
            Family::Bernoulli => vec![p("prob", Constraint::UnitInterval)],
            Family::Categorical { categories } => {
                vec![p("probs", Constraint::Simplex(categories))]
            }
        }
    }

    /// Total number of constrained parameter scalars.
    pub fn param_dim(&self) -> usize {
        self.param_schema().iter().map(|s| s.constraint.dim()).sum()
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Family::Bernoulli | Family::Categorical { .. })
    }

    /// Bijector from the real line onto the support of a continuous family.
    pub fn support_bijector(&self) -> Option<Bijector> {
        match self {
            Family::Normal => Some(Bijector::Identity),
            Family::HalfNormal | Family::LogNormal => Some(Bijector::Exp),
            _ => None,
        }
    }

    pub fn in_support(&self, x: f64) -> bool {
        match *self {
            Family::Normal => x.is_finite(),
            Family::HalfNormal => x.is_finite() && x >= 0.0,
            Family::LogNormal => x.is_finite() && x > 0.0,
            Family::Bernoulli => x == 0.0 || x == 1.0,
            Family::Categorical { categories } => {
                x >= 0.0 && x.fract() == 0.0 && (x as usize) < categories
            }
        }
    }

    fn invalid(&self, reason: impl Into<String>) -> DistError {
        DistError::InvalidParams {
            family: self.name(),
            reason: reason.into(),
        }
    }

    pub fn validate_params(&self, params: &[f64]) -> Result<(), DistError> {
        if params.len() != self.param_dim() {
            return Err(self.invalid(format!(
                "expected {} parameters, got {}",
                self.param_dim(),
                params.len()
            )));
        }
        let check_scale = |s: f64| {
            if s.is_finite() && s > 0.0 {
                Ok(())
            } else {
                Err(self.invalid(format!("scale must be positive and finite, got {s}")))
            }
        };
        match *self {
            Family::Normal | Family::LogNormal => {
                if !params[0].is_finite() {
                    return Err(self.invalid(format!("loc must be finite, got {}", params[0])));
                }
                check_scale(params[1])
            }
            Family::HalfNormal => check_scale(params[0]),
            Family::Bernoulli => {
                if (0.0..=1.0).contains(&params[0]) {
                    Ok(())
                } else {
                    Err(self.invalid(format!("prob must lie in [0, 1], got {}", params[0])))
                }
            }
            Family::Categorical { categories } => {
                let total: f64 = params.iter().sum();
                if params.iter().any(|&p| !(p >= 0.0)) {
                    Err(self.invalid("probabilities must be nonnegative"))
                } else if (total - 1.0).abs() > 1e-9 * categories as f64 {
                    Err(self.invalid(format!("probabilities sum to {total}")))
                } else {
                    Ok(())
                }
            }
        }
    }

    /// Exact log-density (or log-mass); `-inf` outside the support.
    pub fn log_prob(&self, params: &[f64], x: f64) -> Result<f64, DistError> {
        self.validate_params(params)?;
        if !self.in_support(x) {
            return Ok(f64::NEG_INFINITY);
        }
        let normal = |x: f64, loc: f64, scale: f64| {
            let z = (x - loc) / scale;
            -0.5 * z * z - scale.ln() - HALF_LN_2PI
        };
        Ok(match *self {
            Family::Normal => normal(x, params[0], params[1]),
            Family::HalfNormal => LN_2 + normal(x, 0.0, params[0]),
            Family::LogNormal => normal(x.ln(), params[0], params[1]) - x.ln(),
            Family::Bernoulli => {
                if x == 1.0 {
                    params[0].ln()
                } else {
                    (1.0 - params[0]).ln()
                }
            }
            Family::Categorical { .. } => params[x as usize].ln(),
        })
    }

    /// Tape-recorded log-density; gradients flow into `params` and `x`.
    pub fn log_prob_var(&self, tape: &mut Tape, params: &[Var], x: Var) -> Result<Var, DistError> {
        self.validate_params(&tape.values(params))?;
        let xv = tape.value(x);
        if !self.in_support(xv) {
            return Ok(tape.constant(f64::NEG_INFINITY));
        }
        match *self {
            Family::Normal => normal_log_prob_var(tape, x, params[0], params[1]),
            Family::HalfNormal => {
                let zero = tape.constant(0.0);
                let lp = normal_log_prob_var(tape, x, zero, params[0])?;
                Ok(tape.add_const(lp, LN_2))
            }
            Family::LogNormal => {
                let lx = tape.log(x)?;
                let lp = normal_log_prob_var(tape, lx, params[0], params[1])?;
                Ok(tape.sub(lp, lx))
            }
            Family::Bernoulli => {
                if xv == 1.0 {
                    Ok(tape.log(params[0])?)
                } else {
                    let np = tape.neg(params[0]);
                    let q = tape.add_const(np, 1.0);
                    Ok(tape.log(q)?)
                }
            }
            Family::Categorical { .. } => Ok(tape.log(params[xv as usize])?),
        }
    }

    /// Reparameterized draw as a differentiable function of the parameters.
    pub fn sample_reparam(
        &self,
        tape: &mut Tape,
        params: &[Var],
        eps: f64,
    ) -> Result<Var, DistError> {
        self.validate_params(&tape.values(params))?;
        match self {
            Family::Normal => {
                let s = tape.mul_const(params[1], eps);
                Ok(tape.add(params[0], s))
            }
            Family::HalfNormal => Ok(tape.mul_const(params[0], eps.abs())),
            Family::LogNormal => {
                let s = tape.mul_const(params[1], eps);
                let z = tape.add(params[0], s);
                Ok(tape.exp(z))
            }
            _ => Err(DistError::NotReparameterizable(self.name())),
        }
    }

    /// `f64` counterpart of [`Family::sample_reparam`].
    pub fn reparam_value(&self, params: &[f64], eps: f64) -> Result<f64, DistError> {
        self.validate_params(params)?;
        match self {
            Family::Normal => Ok(params[0] + params[1] * eps),
            Family::HalfNormal => Ok(params[0] * eps.abs()),
            Family::LogNormal => Ok((params[0] + params[1] * eps).exp()),
            _ => Err(DistError::NotReparameterizable(self.name())),
        }
    }

    /// Inverse-CDF draw of a discrete family from a uniform `u` in `[0, 1)`.
    pub fn sample_score(&self, params: &[f64], u: f64) -> Result<f64, DistError> {
        self.validate_params(params)?;
        match self {
            Family::Bernoulli => Ok(if u < params[0] { 1.0 } else { 0.0 }),
            Family::Categorical { .. } => {
                let mut cdf = 0.0;
                let mut last_positive = 0;
                for (i, &p) in params.iter().enumerate() {
                    if p > 0.0 {
                        last_positive = i;
                    }
                    cdf += p;
                    if u < cdf && p > 0.0 {
                        return Ok(i as f64);
                    }
                }
                Ok(last_positive as f64)
            }
            _ => Err(DistError::NotDiscrete(self.name())),
        }
    }

    /// Draw the base noise this family consumes: standard normal for
    /// continuous families, uniform on `[0, 1)` for discrete ones.
    pub fn draw_noise<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if self.is_discrete() {
            rng.random::<f64>()
        } else {
            rng.sample(StandardNormal)
        }
    }

    pub fn sample_from_noise(&self, params: &[f64], noise: f64) -> Result<f64, DistError> {
        if self.is_discrete() {
            self.sample_score(params, noise)
        } else {
            self.reparam_value(params, noise)
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, params: &[f64], rng: &mut R) -> Result<f64, DistError> {
        let noise = self.draw_noise(rng);
        self.sample_from_noise(params, noise)
    }

    /// Mean (for Categorical, the most probable index).
    pub fn mean(&self, params: &[f64]) -> f64 {
        match self {
            Family::Normal => params[0],
            Family::HalfNormal => params[0] * (2.0 / PI).sqrt(),
            Family::LogNormal => (params[0] + 0.5 * params[1] * params[1]).exp(),
            Family::Bernoulli => params[0],
            Family::Categorical { .. } => {
                params
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &p)| {
                        if p > best.1 {
                            (i, p)
                        } else {
                            best
                        }
                    })
                    .0 as f64
            }
        }
    }
}

fn normal_log_prob_var(tape: &mut Tape, x: Var, loc: Var, scale: Var) -> Result<Var, DistError> {
    let d = tape.sub(x, loc);
    let z = tape.div(d, scale);
    let z2 = tape.square(z);
    let quad = tape.mul_const(z2, -0.5);
    let ls = tape.log(scale)?;
    let lp = tape.sub(quad, ls);
    Ok(tape.add_const(lp, -HALF_LN_2PI))
}

/// Smooth invertible maps from unconstrained reals onto a constraint region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Bijector {
    Identity,
    /// `softplus(u) + SCALE_FLOOR`, used for scale parameters.
    Softplus,
    Sigmoid,
    /// `k - 1` reals to a `k`-simplex with the last logit pinned at zero.
    SoftmaxCentered,
    /// `exp(u)`, used for positive-valued supports.
    Exp,
}

impl Bijector {
    pub fn forward(&self, u: &[f64]) -> Vec<f64> {
        match self {
            Bijector::Identity => vec![u[0]],
            Bijector::Softplus => vec![autodiff::softplus(u[0]) + SCALE_FLOOR],
            Bijector::Sigmoid => vec![autodiff::sigmoid(u[0])],
            Bijector::Exp => vec![u[0].exp()],
            Bijector::SoftmaxCentered => {
                let m = u.iter().cloned().fold(0.0f64, f64::max);
                let mut e: Vec<f64> = u.iter().map(|&x| (x - m).exp()).collect();
                e.push((-m).exp());
                let total: f64 = e.iter().sum();
                e.iter().map(|x| x / total).collect()
            }
        }
    }

    pub fn inverse(&self, c: &[f64]) -> Result<Vec<f64>, DistError> {
        let boundary = |value| DistError::Boundary {
            bijector: *self,
            value,
        };
        match self {
            Bijector::Identity => {
                if c[0].is_finite() {
                    Ok(vec![c[0]])
                } else {
                    Err(boundary(c[0]))
                }
            }
            Bijector::Softplus => {
                let y = c[0] - SCALE_FLOOR;
                if !(y > 0.0) || !y.is_finite() {
                    return Err(boundary(c[0]));
                }
                // softplus^{-1}(y) = y + ln(1 - e^{-y})
                Ok(vec![y + (-(-y).exp_m1()).ln()])
            }
            Bijector::Sigmoid => {
                let p = c[0];
                if !(p > 0.0 && p < 1.0) {
                    return Err(boundary(p));
                }
                Ok(vec![p.ln() - (-p).ln_1p()])
            }
            Bijector::Exp => {
                if !(c[0] > 0.0) || !c[0].is_finite() {
                    return Err(boundary(c[0]));
                }
                Ok(vec![c[0].ln()])
            }
            Bijector::SoftmaxCentered => {
                if let Some(&bad) = c.iter().find(|&&p| !(p > 0.0)) {
                    return Err(boundary(bad));
                }
                let last = c[c.len() - 1].ln();
                Ok(c[..c.len() - 1].iter().map(|p| p.ln() - last).collect())
            }
        }
    }

    /// `ln |det J|` of the forward map at `u`. For the simplex map this is the
    /// determinant of the Jacobian onto the first `k - 1` coordinates.
    pub fn forward_log_det_jacobian(&self, u: &[f64]) -> f64 {
        match self {
            Bijector::Identity => 0.0,
            Bijector::Softplus => autodiff::sigmoid(u[0]).ln(),
            Bijector::Sigmoid => -autodiff::softplus(-u[0]) - autodiff::softplus(u[0]),
            Bijector::Exp => u[0],
            Bijector::SoftmaxCentered => self.forward(u).iter().map(|p| p.ln()).sum(),
        }
    }

    pub fn forward_var(&self, tape: &mut Tape, u: &[Var]) -> Vec<Var> {
        match self {
            Bijector::Identity => vec![u[0]],
            Bijector::Softplus => {
                let s = tape.softplus(u[0]);
                vec![tape.add_const(s, SCALE_FLOOR)]
            }
            Bijector::Sigmoid => vec![tape.sigmoid(u[0])],
            Bijector::Exp => vec![tape.exp(u[0])],
            Bijector::SoftmaxCentered => {
                let m = tape.values(u).into_iter().fold(0.0f64, f64::max);
                let mut e: Vec<Var> = u
                    .iter()
                    .map(|&x| {
                        let shifted = tape.add_const(x, -m);
                        tape.exp(shifted)
                    })
                    .collect();
                e.push(tape.constant((-m).exp()));
                let total = tape.sum(&e);
                e.into_iter().map(|x| tape.div(x, total)).collect()
            }
        }
    }

    pub fn forward_log_det_jacobian_var(
        &self,
        tape: &mut Tape,
        u: &[Var],
    ) -> Result<Var, DistError> {
        Ok(match self {
            Bijector::Identity => tape.constant(0.0),
            Bijector::Softplus => {
                let s = tape.sigmoid(u[0]);
                tape.log(s)?
            }
            Bijector::Sigmoid => {
                let a = tape.softplus(u[0]);
                let nu = tape.neg(u[0]);
                let b = tape.softplus(nu);
                let s = tape.add(a, b);
                tape.neg(s)
            }
            Bijector::Exp => u[0],
            Bijector::SoftmaxCentered => {
                let probs = self.forward_var(tape, u);
                let logs = probs
                    .into_iter()
                    .map(|p| tape.log(p))
                    .collect::<Result<Vec<_>, _>>()?;
                tape.sum(&logs)
            }
        })
    }
}

/// Map an unconstrained scalar through `bijector`.
pub fn constrain(bijector: Bijector, unconstrained: f64) -> f64 {
    bijector.forward(&[unconstrained])[0]
}

/// Inverse of [`constrain`]; fails on or outside the constraint boundary.
pub fn unconstrain(bijector: Bijector, constrained: f64) -> Result<f64, DistError> {
    Ok(bijector.inverse(&[constrained])?[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn log_prob_examples() {
        assert_abs_diff_eq!(
            Family::Normal.log_prob(&[0.0, 1.0], 0.0).unwrap(),
            -0.918939,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            Family::Bernoulli.log_prob(&[0.5], 1.0).unwrap(),
            -std::f64::consts::LN_2,
            epsilon = 1e-6
        );
        assert_abs_diff_eq!(
            Family::LogNormal.log_prob(&[0.0, 1.0], 1.0).unwrap(),
            -0.918939,
            epsilon = 1e-6
        );
    }

    #[test]
    fn out_of_support_is_negative_infinity() {
        assert_eq!(
            Family::HalfNormal.log_prob(&[1.0], -0.1).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            Family::LogNormal.log_prob(&[0.0, 1.0], 0.0).unwrap(),
            f64::NEG_INFINITY
        );
        assert_eq!(
            Family::Bernoulli.log_prob(&[0.3], 0.5).unwrap(),
            f64::NEG_INFINITY
        );
        let cat = Family::Categorical { categories: 3 };
        assert_eq!(
            cat.log_prob(&[0.2, 0.3, 0.5], 3.0).unwrap(),
            f64::NEG_INFINITY
        );
    }

    #[test]
    fn invalid_params_are_errors() {
        assert!(Family::Normal.log_prob(&[0.0, 0.0], 0.0).is_err());
        assert!(Family::Normal.log_prob(&[0.0, -1.0], 0.0).is_err());
        assert!(Family::Bernoulli.log_prob(&[1.5], 1.0).is_err());
        let cat = Family::Categorical { categories: 2 };
        assert!(cat.log_prob(&[0.2, 0.3], 0.0).is_err());
    }

    #[test]
    fn tape_log_prob_matches_closed_form() {
        let cases: Vec<(Family, Vec<f64>, f64)> = vec![
            (Family::Normal, vec![0.3, 1.7], -0.4),
            (Family::HalfNormal, vec![2.0], 1.1),
            (Family::LogNormal, vec![-0.2, 0.6], 0.8),
            (Family::Bernoulli, vec![0.3], 0.0),
            (Family::Bernoulli, vec![0.3], 1.0),
            (
                Family::Categorical { categories: 3 },
                vec![0.2, 0.5, 0.3],
                2.0,
            ),
        ];
        for (fam, params, x) in cases {
            let mut t = Tape::new();
            let p = t.inputs_from(&params);
            let xv = t.constant(x);
            let lp = fam.log_prob_var(&mut t, &p, xv).unwrap();
            assert_abs_diff_eq!(
                t.value(lp),
                fam.log_prob(&params, x).unwrap(),
                epsilon = 1e-13
            );
        }
    }

    #[test]
    fn reparam_examples() {
        assert_eq!(Family::Normal.reparam_value(&[2.0, 3.0], 0.0).unwrap(), 2.0);
        assert_eq!(Family::Normal.reparam_value(&[0.0, 1.0], 1.5).unwrap(), 1.5);
        assert_eq!(
            Family::LogNormal.reparam_value(&[0.0, 1.0], 0.0).unwrap(),
            1.0
        );
        let mut t = Tape::new();
        let p = t.inputs_from(&[0.5]);
        assert!(matches!(
            Family::Bernoulli.sample_reparam(&mut t, &p, 0.1),
            Err(DistError::NotReparameterizable(_))
        ));
    }

    #[test]
    fn score_sampling_examples() {
        for u in [0.0, 0.3, 0.999] {
            assert_eq!(Family::Bernoulli.sample_score(&[1.0], u).unwrap(), 1.0);
            assert_eq!(Family::Bernoulli.sample_score(&[0.0], u).unwrap(), 0.0);
            let cat = Family::Categorical { categories: 3 };
            assert_eq!(cat.sample_score(&[0.0, 1.0, 0.0], u).unwrap(), 1.0);
        }
    }

    #[test]
    fn bijector_examples() {
        assert_abs_diff_eq!(
            constrain(Bijector::Softplus, 0.0),
            std::f64::consts::LN_2 + SCALE_FLOOR,
            epsilon = 1e-6
        );
        assert_eq!(constrain(Bijector::Sigmoid, 0.0), 0.5);
        assert_eq!(unconstrain(Bijector::Sigmoid, 0.5).unwrap(), 0.0);
        assert!(unconstrain(Bijector::Sigmoid, 0.0).is_err());
        assert!(unconstrain(Bijector::Sigmoid, 1.0).is_err());
        assert!(unconstrain(Bijector::Softplus, 0.0).is_err());
        assert!(unconstrain(Bijector::Exp, 0.0).is_err());
    }

    #[test]
    fn softmax_centered_round_trip_and_log_det() {
        let b = Bijector::SoftmaxCentered;
        let u = [0.3, -1.2, 2.0];
        let p = b.forward(&u);
        assert_abs_diff_eq!(p.iter().sum::<f64>(), 1.0, epsilon = 1e-15);
        let back = b.inverse(&p).unwrap();
        for (a, b) in u.iter().zip(&back) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-12);
        }
        // Jacobian of u -> p[..k-1] by central differences
        let h = 1e-6;
        let n = u.len();
        let mut jac = vec![vec![0.0; n]; n];
        for j in 0..n {
            let mut up = u;
            let mut dn = u;
            up[j] += h;
            dn[j] -= h;
            let (pu, pd) = (b.forward(&up), b.forward(&dn));
            for i in 0..n {
                jac[i][j] = (pu[i] - pd[i]) / (2.0 * h);
            }
        }
        let m = nalgebra::DMatrix::from_fn(n, n, |i, j| jac[i][j]);
        assert_abs_diff_eq!(
            m.determinant().abs().ln(),
            b.forward_log_det_jacobian(&u),
            epsilon = 1e-6
        );
    }

    #[test]
    fn scalar_log_det_matches_derivative() {
        for b in [
            Bijector::Identity,
            Bijector::Softplus,
            Bijector::Sigmoid,
            Bijector::Exp,
        ] {
            for u in [-3.0, -0.5, 0.0, 1.3, 4.0] {
                let h = 1e-6;
                let d = (constrain(b, u + h) - constrain(b, u - h)) / (2.0 * h);
                assert_abs_diff_eq!(d.ln(), b.forward_log_det_jacobian(&[u]), epsilon = 1e-6);
                let mut t = Tape::new();
                let v = t.inputs_from(&[u]);
                let l = b.forward_log_det_jacobian_var(&mut t, &v).unwrap();
                assert_abs_diff_eq!(
                    t.value(l),
                    b.forward_log_det_jacobian(&[u]),
                    epsilon = 1e-12
                );
            }
        }
    }

    /// Composite Simpson's rule on `[a, b]` with `n` (even) intervals.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn continuous_densities_integrate_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let loc: f64 = rng.random_range(-2.0..2.0);
            let scale: f64 = rng.random_range(0.3..2.0);
            let normal = simpson(
                |x| Family::Normal.log_prob(&[loc, scale], x).unwrap().exp(),
                loc - 12.0 * scale,
                loc + 12.0 * scale,
                20_000,
            );
            assert_abs_diff_eq!(normal, 1.0, epsilon = 1e-4);
            let half = simpson(
                |x| Family::HalfNormal.log_prob(&[scale], x).unwrap().exp(),
                0.0,
                12.0 * scale,
                20_000,
            );
            assert_abs_diff_eq!(half, 1.0, epsilon = 1e-4);
            // integrate the log-normal in log space: x = e^t, dx = e^t dt
            let ln = simpson(
                |t| {
                    let x = t.exp();
                    Family::LogNormal.log_prob(&[loc, scale], x).unwrap().exp() * x
                },
                loc - 12.0 * scale,
                loc + 12.0 * scale,
                20_000,
            );
            assert_abs_diff_eq!(ln, 1.0, epsilon = 1e-4);
        }
    }

    #[test]
    fn reparameterized_normal_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (loc, scale) = (1.3, 2.5);
        let n = 100_000;
        let mean = (0..n)
            .map(|_| Family::Normal.sample(&[loc, scale], &mut rng).unwrap())
            .sum::<f64>()
            / n as f64;
        let se = scale / (n as f64).sqrt();
        assert!((mean - loc).abs() < 4.0 * se, "{mean}");
    }

    proptest! {
        #[test]
        fn scalar_bijectors_round_trip(u in -20.0f64..20.0) {
            for b in [Bijector::Identity, Bijector::Softplus, Bijector::Exp] {
                let back = unconstrain(b, constrain(b, u)).unwrap();
                prop_assert!((back - u).abs() < 1e-10, "{:?}: {} -> {}", b, u, back);
            }
        }

        // sigmoid(u) for large positive u sits within a few ulps of 1, so the
        // logit can only be recovered to about e^u * f64::EPSILON.
        #[test]
        fn sigmoid_round_trip(u in -20.0f64..12.0) {
            let back = unconstrain(Bijector::Sigmoid, constrain(Bijector::Sigmoid, u)).unwrap();
            prop_assert!((back - u).abs() < 1e-10, "{} -> {}", u, back);
        }

        #[test]
        fn log_prob_finite_in_support(loc in -5.0f64..5.0, scale in 0.01f64..5.0, x in 0.001f64..10.0) {
            prop_assert!(Family::Normal.log_prob(&[loc, scale], x - 5.0).unwrap().is_finite());
            prop_assert!(Family::HalfNormal.log_prob(&[scale], x).unwrap().is_finite());
            prop_assert!(Family::LogNormal.log_prob(&[loc, scale], x).unwrap().is_finite());
        }
    }
}
