//! Probabilistic programs as DAGs of conditional distributions.
//!
//! Each [`RandomVariableNode`] draws from a [`Family`] whose parameters are a
//! deterministic [`Link`] of its parents' values. Links are recorded on the
//! autodiff tape so gradients flow through them.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::autodiff::{AdError, Tape, Var};
use crate::distributions::{DistError, Family};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ModelError {
    #[error("duplicate node name `{0}`")]
    DuplicateName(String),
    #[error("node `{node}` references unknown parent `{parent}`")]
    UnknownParent { node: String, parent: String },
    #[error("cycle detected among nodes {0:?}")]
    Cycle(Vec<String>),
    #[error("unknown node `{0}`")]
    UnknownNode(String),
    #[error("node `{0}` is already observed")]
    AlreadyObserved(String),
    #[error("value {value} is outside the support of node `{name}`")]
    OutOfSupport { name: String, value: f64 },
    #[error("no value assigned to node `{0}`")]
    MissingAssignment(String),
    #[error("link of node `{node}` produced invalid parameters: {source}")]
    InvalidLinkOutput { node: String, source: DistError },
    #[error(transparent)]
    Dist(#[from] DistError),
    #[error(transparent)]
    Ad(#[from] AdError),
}

type LinkFn = dyn Fn(&mut Tape, &[Var]) -> Result<Vec<Var>, AdError> + Send + Sync;

/// Deterministic map from parent values to a family's parameter vector.
#[derive(Clone)]
pub struct Link(Arc<LinkFn>);

impl Link {
    pub fn new<F>(f: F) -> Self
    where
        F: Fn(&mut Tape, &[Var]) -> Result<Vec<Var>, AdError> + Send + Sync + 'static,
    {
        Link(Arc::new(f))
    }

    /// Parameters that do not depend on any parent.
    pub fn constant(params: Vec<f64>) -> Self {
        Link::new(move |tape, _| Ok(params.iter().map(|&p| tape.constant(p)).collect()))
    }

    /// Branch on a discrete selector: the first parent's value picks which
    /// branch link receives the remaining parents.
    pub fn switch(branches: Vec<Link>) -> Self {
        Link::new(move |tape, parents| {
            let selector = tape.value(parents[0]);
            let idx = selector as usize;
            let branch = branches
                .get(idx)
                .filter(|_| selector >= 0.0 && selector.fract() == 0.0)
                .ok_or(AdError::Domain {
                    op: "switch",
                    arg: selector,
                })?;
            branch.apply(tape, &parents[1..])
        })
    }

    pub fn apply(&self, tape: &mut Tape, parents: &[Var]) -> Result<Vec<Var>, AdError> {
        (self.0)(tape, parents)
    }
}

impl fmt::Debug for Link {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("Link(..)")
    }
}

#[derive(Debug, Clone)]
pub struct RandomVariableNode {
    pub name: String,
    pub family: Family,
    pub parents: Vec<String>,
    pub link: Link,
    /// Marks model-wide quantities (scales, hyperpriors). Used by the AR(1)
    /// surrogate, which drops linear dependence on global predecessors.
    pub global: bool,
}

impl RandomVariableNode {
    pub fn new(name: impl Into<String>, family: Family, parents: &[&str], link: Link) -> Self {
        Self {
            name: name.into(),
            family,
            parents: parents.iter().map(|p| p.to_string()).collect(),
            link,
            global: false,
        }
    }

    /// Root node with fixed parameters.
    pub fn root(name: impl Into<String>, family: Family, params: &[f64]) -> Self {
        Self::new(name, family, &[], Link::constant(params.to_vec()))
    }

    pub fn global(mut self) -> Self {
        self.global = true;
        self
    }
}

/// Named assignment of values with per-node log-density contributions.
#[derive(Debug, Clone, PartialEq)]
pub struct Trace {
    values: IndexMap<String, f64>,
    log_densities: IndexMap<String, f64>,
    total: f64,
}

impl Trace {
    pub fn new(values: IndexMap<String, f64>, log_densities: IndexMap<String, f64>) -> Self {
        let total = log_densities.values().sum();
        Self {
            values,
            log_densities,
            total,
        }
    }

    /// Trace of values only (no densities recorded).
    pub fn from_values(values: IndexMap<String, f64>) -> Self {
        Self::new(values, IndexMap::new())
    }

    pub fn value(&self, name: &str) -> Option<f64> {
        self.values.get(name).copied()
    }

    pub fn values(&self) -> &IndexMap<String, f64> {
        &self.values
    }

    pub fn log_densities(&self) -> &IndexMap<String, f64> {
        &self.log_densities
    }

    pub fn total_log_prob(&self) -> f64 {
        self.total
    }

    pub fn set(&mut self, name: &str, value: f64) {
        self.values.insert(name.to_string(), value);
    }
}

#[derive(Debug, Clone)]
pub struct JointModel {
    nodes: Vec<RandomVariableNode>,
    parent_idx: Vec<Vec<usize>>,
    index: HashMap<String, usize>,
    observed: Vec<Option<f64>>,
}

/// Validate a node list and order it topologically.
///
/// Ties are broken by declaration order, so a list that is already
/// topologically ordered is kept as is.
pub fn build_joint(nodes: Vec<RandomVariableNode>) -> Result<JointModel, ModelError> {
    let mut decl_index = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if decl_index.insert(n.name.clone(), i).is_some() {
            return Err(ModelError::DuplicateName(n.name.clone()));
        }
    }
    let mut parents = Vec::with_capacity(nodes.len());
    for n in &nodes {
        let ids = n
            .parents
            .iter()
            .map(|p| {
                decl_index
                    .get(p)
                    .copied()
                    .ok_or_else(|| ModelError::UnknownParent {
                        node: n.name.clone(),
                        parent: p.clone(),
                    })
            })
            .collect::<Result<Vec<_>, _>>()?;
        parents.push(ids);
    }

    let mut indegree: Vec<usize> = parents.iter().map(|p| p.len()).collect();
    let mut children = vec![Vec::new(); nodes.len()];
    for (i, ps) in parents.iter().enumerate() {
        for &p in ps {
            children[p].push(i);
        }
    }
    let mut ready: BTreeSet<usize> = (0..nodes.len()).filter(|&i| indegree[i] == 0).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(i) = ready.pop_first() {
        order.push(i);
        for &c in &children[i] {
            indegree[c] -= 1;
            if indegree[c] == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() < nodes.len() {
        let stuck = (0..nodes.len())
            .filter(|&i| indegree[i] > 0)
            .map(|i| nodes[i].name.clone())
            .collect();
        return Err(ModelError::Cycle(stuck));
    }

    let mut slots: Vec<Option<RandomVariableNode>> = nodes.into_iter().map(Some).collect();
    let sorted: Vec<RandomVariableNode> = order.iter().map(|&i| slots[i].take().unwrap()).collect();
    let index: HashMap<String, usize> = sorted
        .iter()
        .enumerate()
        .map(|(i, n)| (n.name.clone(), i))
        .collect();
    let parent_idx = sorted
        .iter()
        .map(|n| n.parents.iter().map(|p| index[p]).collect())
        .collect();
    let observed = vec![None; sorted.len()];
    Ok(JointModel {
        nodes: sorted,
        parent_idx,
        index,
        observed,
    })
}

impl JointModel {
    pub fn nodes(&self) -> &[RandomVariableNode] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &RandomVariableNode {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn parents_of(&self, i: usize) -> &[usize] {
        &self.parent_idx[i]
    }

    pub fn edge_count(&self) -> usize {
        self.parent_idx.iter().map(Vec::len).sum()
    }

    pub fn names(&self) -> Vec<&str> {
        self.nodes.iter().map(|n| n.name.as_str()).collect()
    }

    pub fn observed_value(&self, i: usize) -> Option<f64> {
        self.observed[i]
    }

    pub fn is_observed(&self, i: usize) -> bool {
        self.observed[i].is_some()
    }

    /// Observation bindings in topological order.
    pub fn observations(&self) -> IndexMap<String, f64> {
        self.nodes
            .iter()
            .zip(&self.observed)
            .filter_map(|(n, o)| o.map(|v| (n.name.clone(), v)))
            .collect()
    }

    /// Indices of unobserved nodes in topological order.
    pub fn latent_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.observed[i].is_none())
            .collect()
    }

    pub fn observed_indices(&self) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&i| self.observed[i].is_some())
            .collect()
    }

    pub fn latent_names(&self) -> Vec<String> {
        self.latent_indices()
            .into_iter()
            .map(|i| self.nodes[i].name.clone())
            .collect()
    }

    /// Bind observed values to nodes. Conditioning on an empty set is the identity.
    pub fn condition<'a, I>(&self, observations: I) -> Result<JointModel, ModelError>
    where
        I: IntoIterator<Item = (&'a str, f64)>,
    {
        let mut out = self.clone();
        for (name, value) in observations {
            let i = self
                .index_of(name)
                .ok_or_else(|| ModelError::UnknownNode(name.to_string()))?;
            if out.observed[i].is_some() {
                return Err(ModelError::AlreadyObserved(name.to_string()));
            }
            if !self.nodes[i].family.in_support(value) {
                return Err(ModelError::OutOfSupport {
                    name: name.to_string(),
                    value,
                });
            }
            out.observed[i] = Some(value);
        }
        Ok(out)
    }

    /// Apply node `i`'s link to already-recorded parent values and check the
    /// result against the family's parameter schema.
    pub fn node_params_var(
        &self,
        tape: &mut Tape,
        i: usize,
        values: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        let parent_vars: Vec<Var> = self.parent_idx[i].iter().map(|&p| values[p]).collect();
        let node = &self.nodes[i];
        let params = node.link.apply(tape, &parent_vars)?;
        node.family
            .validate_params(&tape.values(&params))
            .map_err(|source| ModelError::InvalidLinkOutput {
                node: node.name.clone(),
                source,
            })?;
        Ok(params)
    }

    /// `f64` parameters of node `i` given values for every node.
    pub fn node_params(&self, i: usize, values: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|&v| tape.constant(v)).collect();
        let params = self.node_params_var(&mut tape, i, &vars)?;
        Ok(tape.values(&params))
    }

    /// Per-node log-density terms recorded on `tape`; `values` holds one
    /// variable per node in topological order.
    pub fn log_prob_terms_var(
        &self,
        tape: &mut Tape,
        values: &[Var],
    ) -> Result<Vec<Var>, ModelError> {
        (0..self.nodes.len())
            .map(|i| {
                let params = self.node_params_var(tape, i, values)?;
                Ok(self.nodes[i]
                    .family
                    .log_prob_var(tape, &params, values[i])?)
            })
            .collect()
    }

    /// Joint log-density `sum_j log rho_j(x_j | theta_j(pi_j))` on the tape.
    pub fn log_joint_var(&self, tape: &mut Tape, values: &[Var]) -> Result<Var, ModelError> {
        let terms = self.log_prob_terms_var(tape, values)?;
        Ok(tape.sum(&terms))
    }

    /// Dense value vector from a trace; observations take precedence over
    /// trace entries for observed nodes.
    pub fn dense_values(&self, trace: &Trace) -> Result<Vec<f64>, ModelError> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, n)| {
                self.observed[i]
                    .or_else(|| trace.value(&n.name))
                    .ok_or_else(|| ModelError::MissingAssignment(n.name.clone()))
            })
            .collect()
    }

    /// Per-node log-density contributions for a dense value vector.
    pub fn log_prob_terms(&self, values: &[f64]) -> Result<Vec<f64>, ModelError> {
        let mut tape = Tape::with_capacity(16 * self.nodes.len());
        let vars: Vec<Var> = values.iter().map(|&v| tape.constant(v)).collect();
        let terms = self.log_prob_terms_var(&mut tape, &vars)?;
        Ok(tape.values(&terms))
    }

    pub fn joint_log_prob(&self, trace: &Trace) -> Result<f64, ModelError> {
        let values = self.dense_values(trace)?;
        Ok(self.log_prob_terms(&values)?.iter().sum())
    }

    /// Prior log-density of the latent nodes only (observed-node terms excluded).
    pub fn latent_log_prob(&self, trace: &Trace) -> Result<f64, ModelError> {
        let values = self.dense_values(trace)?;
        let terms = self.log_prob_terms(&values)?;
        Ok(self.latent_indices().into_iter().map(|i| terms[i]).sum())
    }

    /// Ancestral sample with a fresh generator seeded by `seed`.
    pub fn sample_forward(&self, seed: u64) -> Result<Trace, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.sample_forward_with(&mut rng)
    }

    /// Ancestral sample. Observed nodes keep their observed values.
    pub fn sample_forward_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Trace, ModelError> {
        let mut tape = Tape::with_capacity(16 * self.nodes.len());
        let mut vars = Vec::with_capacity(self.nodes.len());
        let mut values = IndexMap::with_capacity(self.nodes.len());
        let mut log_densities = IndexMap::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let params = self.node_params_var(&mut tape, i, &vars)?;
            let p = tape.values(&params);
            let x = match self.observed[i] {
                Some(v) => v,
                None => node.family.sample(&p, rng)?,
            };
            vars.push(tape.constant(x));
            values.insert(node.name.clone(), x);
            log_densities.insert(node.name.clone(), node.family.log_prob(&p, x)?);
        }
        Ok(Trace::new(values, log_densities))
    }

    /// Per-node values obtained by propagating each family's mean through the
    /// links (observed nodes keep their values). Used for initialization.
    pub fn prior_mean_values(&self) -> Result<Vec<f64>, ModelError> {
        let mut values: Vec<f64> = Vec::with_capacity(self.nodes.len());
        for (i, node) in self.nodes.iter().enumerate() {
            let v = match self.observed[i] {
                Some(v) => v,
                None => {
                    let mut padded = values.clone();
                    padded.resize(self.nodes.len(), 0.0);
                    let p = self.node_params(i, &padded)?;
                    node.family.mean(&p)
                }
            };
            values.push(v);
        }
        Ok(values)
    }

    /// Sub-model view used by samplers: a trace over latent names from a dense vector.
    pub fn trace_from_dense(&self, values: &[f64]) -> Trace {
        Trace::from_values(
            self.nodes
                .iter()
                .zip(values)
                .map(|(n, &v)| (n.name.clone(), v))
                .collect(),
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn normal_child(name: &str, parent: &str, scale: f64) -> RandomVariableNode {
        RandomVariableNode::new(
            name,
            Family::Normal,
            &[parent],
            Link::new(move |t, p| Ok(vec![p[0], t.constant(scale)])),
        )
    }

    #[test]
    fn independent_nodes_have_no_edges() {
        let m = build_joint(vec![
            RandomVariableNode::root("a", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::root("b", Family::Normal, &[0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m.edge_count(), 0);
    }

    #[test]
    fn chain_is_sorted_topologically() {
        let m = build_joint(vec![
            normal_child("y", "x", 1.0),
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
        ])
        .unwrap();
        assert_eq!(m.names(), vec!["x", "y"]);
    }

    #[test]
    fn build_errors() {
        let err = build_joint(vec![normal_child("y", "nope", 1.0)]).unwrap_err();
        assert!(matches!(err, ModelError::UnknownParent { .. }));
        let err = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, ModelError::DuplicateName(_)));
        let err = build_joint(vec![
            normal_child("a", "b", 1.0),
            normal_child("b", "a", 1.0),
        ])
        .unwrap_err();
        assert!(matches!(err, ModelError::Cycle(_)));
    }

    #[test]
    fn degenerate_scale_samples_at_loc() {
        let m = build_joint(vec![RandomVariableNode::root(
            "x",
            Family::Normal,
            &[0.0, 1e-12],
        )])
        .unwrap();
        let t = m.sample_forward(3).unwrap();
        assert!(t.value("x").unwrap().abs() < 1e-5);
    }

    #[test]
    fn same_seed_same_trace() {
        let m = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            normal_child("y", "x", 0.5),
        ])
        .unwrap();
        assert_eq!(m.sample_forward(42).unwrap(), m.sample_forward(42).unwrap());
        assert_ne!(m.sample_forward(42).unwrap(), m.sample_forward(43).unwrap());
    }

    #[test]
    fn joint_log_prob_examples() {
        let two = build_joint(vec![
            RandomVariableNode::root("a", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::root("b", Family::Normal, &[0.0, 1.0]),
        ])
        .unwrap();
        let mut tr = Trace::from_values(IndexMap::new());
        tr.set("a", 0.0);
        tr.set("b", 0.0);
        assert_abs_diff_eq!(two.joint_log_prob(&tr).unwrap(), -1.837877, epsilon = 1e-6);

        let chain = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            normal_child("y", "x", 1.0),
        ])
        .unwrap();
        let mut tr = Trace::from_values(IndexMap::new());
        tr.set("x", 0.0);
        tr.set("y", 0.0);
        assert_abs_diff_eq!(
            chain.joint_log_prob(&tr).unwrap(),
            -1.837877,
            epsilon = 1e-6
        );

        let cond = chain.condition([("y", 1.0)]).unwrap();
        let mut tr = Trace::from_values(IndexMap::new());
        tr.set("x", 0.0);
        assert_abs_diff_eq!(cond.joint_log_prob(&tr).unwrap(), -2.337878, epsilon = 1e-6);

        let empty = Trace::from_values(IndexMap::new());
        assert!(matches!(
            cond.joint_log_prob(&empty),
            Err(ModelError::MissingAssignment(_))
        ));
    }

    #[test]
    fn condition_rules() {
        let m = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            normal_child("y", "x", 1.0),
        ])
        .unwrap();
        let same = m.condition(std::iter::empty()).unwrap();
        assert_eq!(same.latent_indices(), m.latent_indices());
        assert!(matches!(
            m.condition([("z", 1.0)]),
            Err(ModelError::UnknownNode(_))
        ));
        let c = m.condition([("y", 1.0)]).unwrap();
        assert_eq!(c.latent_names(), vec!["x"]);
        assert!(matches!(
            c.condition([("y", 2.0)]),
            Err(ModelError::AlreadyObserved(_))
        ));
        let half = build_joint(vec![RandomVariableNode::root(
            "s",
            Family::HalfNormal,
            &[1.0],
        )])
        .unwrap();
        assert!(matches!(
            half.condition([("s", -1.0)]),
            Err(ModelError::OutOfSupport { .. })
        ));
    }

    #[test]
    fn invalid_link_output_is_rejected() {
        let m = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::new(
                "y",
                Family::Normal,
                &["x"],
                Link::new(|_, p| Ok(vec![p[0], p[0]])),
            ),
        ])
        .unwrap();
        let mut tr = Trace::from_values(IndexMap::new());
        tr.set("x", -1.0);
        tr.set("y", 0.0);
        assert!(matches!(
            m.joint_log_prob(&tr),
            Err(ModelError::InvalidLinkOutput { .. })
        ));
    }

    #[test]
    fn trace_total_is_sum_of_terms() {
        let m = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            normal_child("y", "x", 0.5),
            normal_child("z", "y", 0.25),
        ])
        .unwrap();
        for seed in 0..20 {
            let t = m.sample_forward(seed).unwrap();
            let sum: f64 = t.log_densities().values().sum();
            assert_abs_diff_eq!(sum, t.total_log_prob(), epsilon = 1e-12);
            assert_abs_diff_eq!(
                m.joint_log_prob(&t).unwrap(),
                t.total_log_prob(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn reordering_declarations_preserves_density() {
        let a = build_joint(vec![
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
            RandomVariableNode::root("w", Family::LogNormal, &[0.0, 0.5]),
            normal_child("y", "x", 0.5),
        ])
        .unwrap();
        let b = build_joint(vec![
            normal_child("y", "x", 0.5),
            RandomVariableNode::root("w", Family::LogNormal, &[0.0, 0.5]),
            RandomVariableNode::root("x", Family::Normal, &[0.0, 1.0]),
        ])
        .unwrap();
        for seed in 0..10 {
            let t = a.sample_forward(seed).unwrap();
            assert_abs_diff_eq!(
                a.joint_log_prob(&t).unwrap(),
                b.joint_log_prob(&t).unwrap(),
                epsilon = 1e-12
            );
        }
    }

    #[test]
    fn switch_link_selects_branch() {
        let m = build_joint(vec![
            RandomVariableNode::root("gate", Family::Bernoulli, &[0.5]),
            RandomVariableNode::new(
                "x",
                Family::Normal,
                &["gate"],
                Link::switch(vec![
                    Link::constant(vec![-5.0, 1.0]),
                    Link::constant(vec![5.0, 1.0]),
                ]),
            ),
        ])
        .unwrap();
        assert_eq!(m.node_params(1, &[0.0, 0.0]).unwrap(), vec![-5.0, 1.0]);
        assert_eq!(m.node_params(1, &[1.0, 0.0]).unwrap(), vec![5.0, 1.0]);
    }
}
