//! Scalar reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation as a node holding its forward value and
//! the local partial derivatives with respect to its parents. Because parents
//! always precede children, a single reverse sweep accumulates adjoints for
//! every recorded input.
//!
//! ```
//! use asvi::autodiff::Tape;
//!
//! let mut tape = Tape::new();
//! let x = tape.input(3.0);
//! let y = tape.mul(x, x);
//! let grad = tape.backward(y);
//! assert_eq!(tape.value(y), 9.0);
//! assert_eq!(grad.wrt(x), 6.0);
//! ```

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdError {
    #[error("domain error: {op} of {arg}")]
    Domain { op: &'static str, arg: f64 },
    #[error("variable {0} is not an input of this tape")]
    NotAnInput(usize),
}

/// Operation kinds recorded on the tape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OpKind {
    Constant,
    Input,
    Add,
    Mul,
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    /// `x^p` for a constant exponent `p`.
    Pow(f64),
    Div,
}

/// Handle to a recorded node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct TapeNode {
    pub op: OpKind,
    arity: u8,
    parents: [usize; 2],
    pub value: f64,
    partials: [f64; 2],
}

impl TapeNode {
    pub fn parents(&self) -> &[usize] {
        &self.parents[..self.arity as usize]
    }

    pub fn local_partials(&self) -> &[f64] {
        &self.partials[..self.arity as usize]
    }
}

/// Partial derivatives of one output with respect to every declared input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    inputs: Vec<usize>,
    values: Vec<f64>,
    /// Number of tape nodes visited by the reverse sweep.
    pub nodes_visited: usize,
}

impl Gradient {
    /// Derivative with respect to `input`; panics if `input` was never declared.
    pub fn wrt(&self, input: Var) -> f64 {
        let pos = self
            .inputs
            .iter()
            .position(|&i| i == input.0)
            .expect("not an input of this tape");
        self.values[pos]
    }

    /// Derivatives in input declaration order.
    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Logistic sigmoid, evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<TapeNode>,
    inputs: Vec<usize>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        Self {
            nodes: Vec::with_capacity(capacity),
            inputs: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node but keep the allocation.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.inputs.clear();
    }

    pub fn nodes(&self) -> &[TapeNode] {
        &self.nodes
    }

    pub fn inputs(&self) -> Vec<Var> {
        self.inputs.iter().map(|&i| Var(i)).collect()
    }

    pub fn value(&self, v: Var) -> f64 {
        self.nodes[v.0].value
    }

    pub fn values(&self, vars: &[Var]) -> Vec<f64> {
        vars.iter().map(|&v| self.value(v)).collect()
    }

    fn push(&mut self, op: OpKind, parents: &[usize], value: f64, partials: &[f64]) -> Var {
        let mut p = [0usize; 2];
        let mut d = [0.0; 2];
        p[..parents.len()].copy_from_slice(parents);
        d[..partials.len()].copy_from_slice(partials);
        self.nodes.push(TapeNode {
            op,
            arity: parents.len() as u8,
            parents: p,
            value,
            partials: d,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: f64) -> Var {
        let v = self.push(OpKind::Input, &[], value, &[]);
        self.inputs.push(v.0);
        v
    }

    pub fn inputs_from(&mut self, values: &[f64]) -> Vec<Var> {
        values.iter().map(|&x| self.input(x)).collect()
    }

    pub fn constant(&mut self, value: f64) -> Var {
        self.push(OpKind::Constant, &[], value, &[])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(OpKind::Add, &[a.0, b.0], v, &[1.0, 1.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(OpKind::Mul, &[a.0, b.0], x * y, &[y, x])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(OpKind::Neg, &[a.0], -x, &[-1.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        self.push(OpKind::Div, &[a.0, b.0], x / y, &[1.0 / y, -x / (y * y)])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let e = self.value(a).exp();
        self.push(OpKind::Exp, &[a.0], e, &[e])
    }

    /// Natural log; rejects negative or NaN arguments. `log(0)` is `-inf`.
    pub fn log(&mut self, a: Var) -> Result<Var, AdError> {
        let x = self.value(a);
        if x.is_nan() || x < 0.0 {
            return Err(AdError::Domain { op: "log", arg: x });
        }
        Ok(self.push(OpKind::Log, &[a.0], x.ln(), &[1.0 / x]))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let t = self.value(a).tanh();
        self.push(OpKind::Tanh, &[a.0], t, &[1.0 - t * t])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let s = sigmoid(self.value(a));
        self.push(OpKind::Sigmoid, &[a.0], s, &[s * (1.0 - s)])
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let x = self.value(a);
        self.push(OpKind::Softplus, &[a.0], softplus(x), &[sigmoid(x)])
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, AdError> {
        let x = self.value(a);
        if x.is_nan() || x < 0.0 {
            return Err(AdError::Domain { op: "sqrt", arg: x });
        }
        let r = x.sqrt();
        Ok(self.push(OpKind::Sqrt, &[a.0], r, &[0.5 / r]))
    }

    /// `a^p` for a constant exponent. Negative bases require an integer exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, AdError> {
        let x = self.value(a);
        if x.is_nan() || (x < 0.0 && p.fract() != 0.0) {
            return Err(AdError::Domain { op: "pow", arg: x });
        }
        let d = if p == 0.0 { 0.0 } else { p * x.powf(p - 1.0) };
        Ok(self.push(OpKind::Pow(p), &[a.0], x.powf(p), &[d]))
    }

    // Convenience combinators built from the primitive ops.

    pub fn add_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(c);
        self.add(a, k)
    }

    pub fn mul_const(&mut self, a: Var, c: f64) -> Var {
        let k = self.constant(c);
        self.mul(a, k)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn sum(&mut self, terms: &[Var]) -> Var {
        match terms.split_first() {
            None => self.constant(0.0),
            Some((&first, rest)) => rest.iter().fold(first, |acc, &t| self.add(acc, t)),
        }
    }

    /// Reverse sweep from `output`; visits each node at or before `output` once.
    pub fn backward(&self, output: Var) -> Gradient {
        let mut adjoint = vec![0.0; output.0 + 1];
        adjoint[output.0] = 1.0;
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            visited += 1;
            let a = adjoint[i];
            if a == 0.0 {
                continue;
            }
            let node = &self.nodes[i];
            for (&p, &d) in node.parents().iter().zip(node.local_partials()) {
                adjoint[p] += a * d;
            }
        }
        let values = self
            .inputs
            .iter()
            .map(|&i| if i <= output.0 { adjoint[i] } else { 0.0 })
            .collect();
        Gradient {
            inputs: self.inputs.clone(),
            values,
            nodes_visited: visited,
        }
    }
}

/// Compare reverse-mode gradients of `f` at `point` with central differences.
///
/// Returns `max_i |ad_i - fd_i| / max(1, |ad_i|)`.
pub fn finite_difference_check<F>(f: F, point: &[f64], step: f64) -> Result<f64, AdError>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var, AdError>,
{
    assert!(step > 0.0, "finite-difference step must be positive");
    let eval = |x: &[f64]| -> Result<f64, AdError> {
        let mut tape = Tape::new();
        let vars = tape.inputs_from(x);
        let out = f(&mut tape, &vars)?;
        Ok(tape.value(out))
    };
    let mut tape = Tape::new();
    let vars = tape.inputs_from(point);
    let out = f(&mut tape, &vars)?;
    let grad = tape.backward(out);

    let mut worst: f64 = 0.0;
    let mut x = point.to_vec();
    for i in 0..point.len() {
        x[i] = point[i] + step;
        let hi = eval(&x)?;
        x[i] = point[i] - step;
        let lo = eval(&x)?;
        x[i] = point[i];
        let fd = (hi - lo) / (2.0 * step);
        let ad = grad.as_slice()[i];
        worst = worst.max((ad - fd).abs() / ad.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn square_value_and_derivative() {
        let mut t = Tape::new();
        let x = t.input(3.0);
        let y = t.mul(x, x);
        assert_eq!(t.value(y), 9.0);
        assert_eq!(t.backward(y).wrt(x), 6.0);
    }

    #[test]
    fn sigmoid_and_softplus_at_zero() {
        let mut t = Tape::new();
        let x = t.input(0.0);
        let s = t.sigmoid(x);
        let sp = t.softplus(x);
        assert_eq!(t.value(s), 0.5);
        assert_abs_diff_eq!(t.value(sp), std::f64::consts::LN_2, epsilon = 1e-15);
        assert_abs_diff_eq!(t.backward(s).wrt(x), 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(t.backward(sp).wrt(x), 0.5, epsilon = 1e-15);
    }

    #[test]
    fn softplus_does_not_overflow() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0);
        assert_eq!(sigmoid(-1000.0), 0.0);
        assert_eq!(sigmoid(1000.0), 1.0);
    }

    #[test]
    fn log_and_sqrt_reject_negative_arguments() {
        let mut t = Tape::new();
        let x = t.input(-1.0);
        assert!(matches!(t.log(x), Err(AdError::Domain { op: "log", .. })));
        assert!(matches!(t.sqrt(x), Err(AdError::Domain { op: "sqrt", .. })));
        assert!(t.pow(x, 0.5).is_err());
        assert!(t.pow(x, 2.0).is_ok());
    }

    #[test]
    fn finite_difference_examples() {
        let err = finite_difference_check(|t, v| Ok(t.exp(v[0])), &[1.0], 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
        let err = finite_difference_check(|_, v| Ok(v[0]), &[0.37], 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");

        let mut t = Tape::new();
        let x = t.input(2.0);
        let y = t.input(3.0);
        let z = t.mul(x, y);
        let g = t.backward(z);
        assert_abs_diff_eq!(g.wrt(x), 3.0, epsilon = 1e-6);
        assert_abs_diff_eq!(g.wrt(y), 2.0, epsilon = 1e-6);
    }

    #[test]
    fn constant_expression_has_zero_gradient() {
        let mut t = Tape::new();
        let x = t.input(1.5);
        let c = t.constant(2.0);
        let e = t.exp(c);
        let out = t.mul(e, c);
        let g = t.backward(out);
        assert_eq!(g.len(), 1);
        assert_eq!(g.wrt(x), 0.0);
    }

    #[test]
    fn unused_inputs_get_zero_entries() {
        let mut t = Tape::new();
        let a = t.input(1.0);
        let out = t.exp(a);
        let b = t.input(2.0);
        let g = t.backward(out);
        assert_eq!(g.as_slice(), &[1.0f64.exp(), 0.0]);
        assert_eq!(g.wrt(b), 0.0);
    }

    #[test]
    fn backward_visits_each_node_once() {
        let mut t = Tape::new();
        let x = t.input(0.1);
        let mut acc = x;
        for _ in 0..10_000 {
            acc = t.tanh(acc);
        }
        let g = t.backward(acc);
        assert_eq!(g.nodes_visited, t.len());
    }

    #[test]
    fn parents_precede_children() {
        let mut t = Tape::new();
        let x = t.input(0.3);
        let y = t.input(0.7);
        let a = t.mul(x, y);
        let b = t.div(a, y);
        let _ = t.sub(b, x);
        for (i, n) in t.nodes().iter().enumerate() {
            assert!(n.parents().iter().all(|&p| p < i));
        }
    }

    type UnaryOp = fn(&mut Tape, Var) -> Result<Var, AdError>;

    fn unary_ops() -> Vec<(&'static str, UnaryOp)> {
        vec![
            ("neg", |t, v| Ok(t.neg(v))),
            ("exp", |t, v| Ok(t.exp(v))),
            ("log", |t, v| t.log(v)),
            ("tanh", |t, v| Ok(t.tanh(v))),
            ("sigmoid", |t, v| Ok(t.sigmoid(v))),
            ("softplus", |t, v| Ok(t.softplus(v))),
            ("sqrt", |t, v| t.sqrt(v)),
            ("pow", |t, v| t.pow(v, 3.0)),
            ("pow_frac", |t, v| t.pow(v, 1.7)),
        ]
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn unary_ops_match_central_differences(z in -3.0f64..3.0) {
            for (name, op) in unary_ops() {
                // log, sqrt and fractional pow live on the positive half-line
                let x = if matches!(name, "log" | "sqrt" | "pow_frac") { z.abs() } else { z };
                if matches!(name, "log" | "sqrt" | "pow_frac") && x < 1e-3 {
                    continue;
                }
                let err = finite_difference_check(|t, v| op(t, v[0]), &[x], 1e-6).unwrap();
                prop_assert!(err < 1e-5, "{} at {}: {}", name, x, err);
            }
        }

        #[test]
        fn binary_ops_match_central_differences(a in -3.0f64..3.0, b in -3.0f64..3.0) {
            prop_assume!(b.abs() > 1e-3);
            let fs: Vec<fn(&mut Tape, &[Var]) -> Result<Var, AdError>> = vec![
                |t, v| Ok(t.add(v[0], v[1])),
                |t, v| Ok(t.mul(v[0], v[1])),
                |t, v| Ok(t.div(v[0], v[1])),
                |t, v| Ok(t.sub(v[0], v[1])),
            ];
            for f in fs {
                let err = finite_difference_check(f, &[a, b], 1e-6).unwrap();
                prop_assert!(err < 1e-5);
            }
        }
    }
}
