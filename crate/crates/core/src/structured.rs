//! Compact human models and machine policies: per-step tables for histories
//! off a prefix tree, explicit conditionals at tree nodes.
//!
//! Off the tree a human model is one-step Markov, `P(h_t | m_t)` depending
//! only on `t`, and a policy is a product of per-step marginals `Q_t(m_t)`.
//! Both recursions in this crate preserve that shape, so quantities over the
//! full history space reduce to a pass over the tree plus one aggregate
//! "off-tree" state per depth.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{AnchoredTerm, StepTables};
use crate::logspace::xlogx;
use crate::process::{HumanModel, MachinePolicy, ProcessSpec};
use crate::tree::{NodeId, PrefixTree, ROOT};

const NORMALIZATION_TOL: f64 = 1e-12;

/// Log-normalizers from the backward recursion that produced a human model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HumanLogNorms {
    /// `[t - 1][m]`: `log Z(m_t)` off the tree.
    pub off_path: Vec<Vec<f64>>,
    /// Per node `[m]`: `log Z(h^k, m^k, m_{k+1})`; empty at depth `T`.
    pub nodes: Vec<Vec<f64>>,
}

/// A human model `P(h_t | h^{t-1}, m^t)` in structured form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredHuman {
    pub(crate) spec: ProcessSpec,
    pub(crate) tree: PrefixTree,
    /// `[t - 1][cond(m, h)]`.
    pub(crate) off_path: Vec<Vec<f64>>,
    /// Per node `[cond(m, h)]` for the next step; empty at depth `T`.
    pub(crate) nodes: Vec<Vec<f64>>,
    #[serde(default)]
    pub(crate) log_norms: Option<HumanLogNorms>,
}

/// A machine policy `Q(m_t | h^{t-1}, m^{t-1})` in structured form.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StructuredPolicy {
    pub(crate) spec: ProcessSpec,
    pub(crate) tree: PrefixTree,
    /// `[t - 1][m]`.
    pub(crate) off_path: Vec<Vec<f64>>,
    /// Per node `[m]` for the next step; empty at depth `T`.
    pub(crate) nodes: Vec<Vec<f64>>,
}

fn check_vectors(what: &str, vectors: &[Vec<f64>], width: usize) -> Result<()> {
    for v in vectors {
        for block in v.chunks(width) {
            let mut sum = 0.0;
            for &p in block {
                if !p.is_finite() || p < 0.0 {
                    return Err(Error::Unnormalized(format!("{what} has entry {p}")));
                }
                sum += p;
            }
            if (sum - 1.0).abs() > NORMALIZATION_TOL {
                return Err(Error::Unnormalized(format!(
                    "{what} has a block summing to {sum}"
                )));
            }
        }
    }
    Ok(())
}

fn check_layout(
    spec: &ProcessSpec,
    tree: &PrefixTree,
    off_path: &[Vec<f64>],
    nodes: &[Vec<f64>],
    block: usize,
) -> Result<()> {
    if tree.spec() != *spec {
        return Err(Error::SpecMismatch("tree built for another spec".into()));
    }
    if off_path.len() != spec.horizon || off_path.iter().any(|v| v.len() != block) {
        return Err(Error::Shape(format!(
            "off-path tables must be {} x {block}",
            spec.horizon
        )));
    }
    if nodes.len() != tree.len() {
        return Err(Error::Shape(format!(
            "{} node tables for a tree of {} nodes",
            nodes.len(),
            tree.len()
        )));
    }
    for (id, v) in nodes.iter().enumerate() {
        let expected = if tree.node(id).depth < spec.horizon {
            block
        } else {
            0
        };
        if v.len() != expected {
            return Err(Error::Shape(format!(
                "node {id} table has {} entries, expected {expected}",
                v.len()
            )));
        }
    }
    Ok(())
}

/// Node tables copied from a source tree where present, else from the
/// off-path table of the node's depth.
fn reshape_tables(
    spec: &ProcessSpec,
    from: &PrefixTree,
    from_nodes: &[Vec<f64>],
    off_path: &[Vec<f64>],
    to: &PrefixTree,
) -> Result<Vec<Vec<f64>>> {
    if !to.contains_tree(from) {
        return Err(Error::Unsupported(
            "target tree does not contain the model's tree; off-tree histories would lose their conditionals".into(),
        ));
    }
    let map = to.correspondence(from);
    Ok((0..to.len())
        .map(|id| {
            let depth = to.node(id).depth;
            if depth == spec.horizon {
                Vec::new()
            } else {
                match map[id] {
                    Some(src) => from_nodes[src].clone(),
                    None => off_path[depth].clone(),
                }
            }
        })
        .collect())
}

impl StructuredHuman {
    pub fn new(
        spec: ProcessSpec,
        tree: PrefixTree,
        off_path: Vec<Vec<f64>>,
        nodes: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_layout(&spec, &tree, &off_path, &nodes, spec.pairs())?;
        check_vectors("human off-path table", &off_path, spec.human_actions)?;
        check_vectors("human node table", &nodes, spec.human_actions)?;
        Ok(StructuredHuman {
            spec,
            tree,
            off_path,
            nodes,
            log_norms: None,
        })
    }

    /// A model with no tree: `P(h_t | m_t)` from `tables[t - 1][cond(m, h)]`.
    pub fn markov(spec: ProcessSpec, tables: Vec<Vec<f64>>) -> Result<Self> {
        let tree = PrefixTree::new(spec);
        let nodes = (0..tree.len())
            .map(|id| {
                if tree.node(id).depth < spec.horizon {
                    tables[0].clone()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self::new(spec, tree, tables, nodes)
    }

    pub fn uniform(spec: ProcessSpec) -> Self {
        let p = 1.0 / spec.human_actions as f64;
        Self::markov(spec, vec![vec![p; spec.pairs()]; spec.horizon])
            .expect("uniform tables are valid")
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    /// `P(h_t | m_t)` off the tree, laid out `[cond(m, h)]`.
    pub fn off_path(&self, t: usize) -> &[f64] {
        &self.off_path[t - 1]
    }

    pub fn node_table(&self, node: NodeId) -> &[f64] {
        &self.nodes[node]
    }

    pub fn log_norms(&self) -> Option<&HumanLogNorms> {
        self.log_norms.as_ref()
    }

    /// Stored `f64` entries: conditionals at internal nodes plus off-path
    /// tables for steps whose histories can leave the tree (`t >= 2`).
    pub fn storage_entries(&self) -> usize {
        let block = self.spec.pairs();
        (self.tree.internal_nodes() + self.spec.horizon - 1) * block
    }

    /// Re-expresses the model on a tree containing its own.
    pub fn reshape(&self, tree: &PrefixTree) -> Result<Self> {
        let nodes = reshape_tables(&self.spec, &self.tree, &self.nodes, &self.off_path, tree)?;
        Ok(StructuredHuman {
            spec: self.spec,
            tree: tree.clone(),
            off_path: self.off_path.clone(),
            nodes,
            log_norms: None,
        })
    }

    fn block<'a>(&'a self, human: &[usize], machine: &[usize]) -> &'a [f64] {
        let t = machine.len();
        match self.tree.locate(human, &machine[..t - 1]) {
            Some(node) => &self.nodes[node],
            None => &self.off_path[t - 1],
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: StructuredHuman = serde_json::from_str(text)?;
        let mut model = Self::new(raw.spec, raw.tree, raw.off_path, raw.nodes)?;
        model.log_norms = raw.log_norms;
        Ok(model)
    }
}

impl HumanModel for StructuredHuman {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn human_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        let m = machine[machine.len() - 1];
        let n = self.spec.human_actions;
        out.copy_from_slice(&self.block(human, machine)[m * n..(m + 1) * n]);
    }
}

impl StructuredPolicy {
    pub fn new(
        spec: ProcessSpec,
        tree: PrefixTree,
        off_path: Vec<Vec<f64>>,
        nodes: Vec<Vec<f64>>,
    ) -> Result<Self> {
        check_layout(&spec, &tree, &off_path, &nodes, spec.machine_actions)?;
        check_vectors("policy off-path table", &off_path, spec.machine_actions)?;
        check_vectors("policy node table", &nodes, spec.machine_actions)?;
        Ok(StructuredPolicy {
            spec,
            tree,
            off_path,
            nodes,
        })
    }

    /// A policy that ignores history: `Q(m_t) = marginals[t - 1][m]`.
    pub fn product(spec: ProcessSpec, marginals: Vec<Vec<f64>>) -> Result<Self> {
        let tree = PrefixTree::new(spec);
        let nodes = (0..tree.len())
            .map(|id| {
                if tree.node(id).depth < spec.horizon {
                    marginals[0].clone()
                } else {
                    Vec::new()
                }
            })
            .collect();
        Self::new(spec, tree, marginals, nodes)
    }

    pub fn uniform(spec: ProcessSpec) -> Self {
        let p = 1.0 / spec.machine_actions as f64;
        Self::product(spec, vec![vec![p; spec.machine_actions]; spec.horizon])
            .expect("uniform tables are valid")
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    /// `Q_t(m)` off the tree.
    pub fn off_path(&self, t: usize) -> &[f64] {
        &self.off_path[t - 1]
    }

    pub fn node_table(&self, node: NodeId) -> &[f64] {
        &self.nodes[node]
    }

    pub fn reshape(&self, tree: &PrefixTree) -> Result<Self> {
        let nodes = reshape_tables(&self.spec, &self.tree, &self.nodes, &self.off_path, tree)?;
        Ok(StructuredPolicy {
            spec: self.spec,
            tree: tree.clone(),
            off_path: self.off_path.clone(),
            nodes,
        })
    }

    /// Whether the policy is the same product of marginals at every history.
    pub fn is_product(&self) -> bool {
        (0..self.tree.len()).all(|id| {
            let depth = self.tree.node(id).depth;
            depth == self.spec.horizon || self.nodes[id] == self.off_path[depth]
        })
    }

    /// Largest absolute difference in any conditional, over all histories.
    pub fn sup_distance(&self, other: &StructuredPolicy) -> Result<f64> {
        let mut tree = self.tree.clone();
        tree.merge(&other.tree)?;
        let a = self.reshape(&tree)?;
        let b = other.reshape(&tree)?;
        let off = a.off_path.iter().zip(&b.off_path);
        let on = a.nodes.iter().zip(&b.nodes);
        Ok(off
            .chain(on)
            .flat_map(|(x, y)| x.iter().zip(y).map(|(p, q)| (p - q).abs()))
            .fold(0.0, f64::max))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let raw: StructuredPolicy = serde_json::from_str(text)?;
        Self::new(raw.spec, raw.tree, raw.off_path, raw.nodes)
    }
}

impl MachinePolicy for StructuredPolicy {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn machine_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        let table = match self.tree.locate(human, machine) {
            Some(node) => &self.nodes[node],
            None => &self.off_path[machine.len()],
        };
        out.copy_from_slice(table);
    }
}

/// Puts a human model and a policy on one common tree.
pub fn align(
    human: &StructuredHuman,
    policy: &StructuredPolicy,
) -> Result<(StructuredHuman, StructuredPolicy)> {
    if human.spec != policy.spec {
        return Err(Error::SpecMismatch(format!(
            "human {:?} vs policy {:?}",
            human.spec, policy.spec
        )));
    }
    if human.tree == policy.tree {
        return Ok((human.clone(), policy.clone()));
    }
    let mut tree = human.tree.clone();
    tree.merge(&policy.tree)?;
    Ok((human.reshape(&tree)?, policy.reshape(&tree)?))
}

/// Where the joint process spends its mass, computed by one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct Occupancy {
    /// Probability of reaching each tree node.
    pub node_mass: Vec<f64>,
    /// Probability of being off the tree after `k` steps, `k = 0..=T`.
    pub off_mass: Vec<f64>,
    /// `[t - 1][pair(h, m)]`: the marginal law of `(H_t, M_t)`.
    pub step_pairs: Vec<Vec<f64>>,
}

/// Forward pass over a human model and a policy sharing one tree.
pub fn occupancy(human: &StructuredHuman, policy: &StructuredPolicy) -> Result<Occupancy> {
    let spec = human.spec;
    if human.tree != policy.tree {
        return Err(Error::Unsupported(
            "occupancy requires models on the same tree; call align first".into(),
        ));
    }
    let tree = &human.tree;
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    let mut node_mass = vec![0.0; tree.len()];
    node_mass[ROOT] = 1.0;
    let mut off_mass = vec![0.0; spec.horizon + 1];
    let mut step_pairs = vec![vec![0.0; spec.pairs()]; spec.horizon];
    for k in 0..spec.horizon {
        let mu = &mut step_pairs[k];
        let off = off_mass[k];
        if off > 0.0 {
            for m in 0..nm {
                let qm = policy.off_path[k][m];
                for h in 0..nh {
                    mu[spec.pair(h, m)] += off * qm * human.off_path[k][spec.cond(m, h)];
                }
            }
        }
        let mut leaving = off;
        for &node in tree.level(k) {
            let pi = node_mass[node];
            let (q, p) = (&policy.nodes[node], &human.nodes[node]);
            for m in 0..nm {
                for h in 0..nh {
                    let pair = spec.pair(h, m);
                    let mass = pi * q[m] * p[spec.cond(m, h)];
                    mu[pair] += mass;
                    match tree.child(node, pair) {
                        Some(child) => node_mass[child] += mass,
                        None => leaving += mass,
                    }
                }
            }
        }
        off_mass[k + 1] = leaving;
    }
    Ok(Occupancy {
        node_mass,
        off_mass,
        step_pairs,
    })
}

impl Occupancy {
    pub fn decomposable_moment(&self, tables: &StepTables) -> f64 {
        self.step_pairs
            .iter()
            .enumerate()
            .map(|(k, mu)| {
                mu.iter()
                    .zip(tables.step(k + 1))
                    .map(|(a, b)| a * b)
                    .sum::<f64>()
            })
            .sum()
    }

    /// Mass of the event `T_D > t`: still on the tree after `t` steps.
    pub fn survival(&self, tree: &PrefixTree, t: usize) -> f64 {
        tree.level(t).iter().map(|&n| self.node_mass[n]).sum()
    }
}

/// Expectation of an anchored term whose prefix is the node `node`.
pub(crate) fn anchored_moment(
    human: &StructuredHuman,
    policy: &StructuredPolicy,
    occ: &Occupancy,
    node: NodeId,
    table: &[f64],
) -> f64 {
    let spec = human.spec;
    let pi = occ.node_mass[node];
    if pi == 0.0 {
        return 0.0;
    }
    let (q, p) = (&policy.nodes[node], &human.nodes[node]);
    let mut acc = 0.0;
    for m in 0..spec.machine_actions {
        for h in 0..spec.human_actions {
            acc += q[m] * p[spec.cond(m, h)] * table[spec.pair(h, m)];
        }
    }
    pi * acc
}

/// Expectation of an anchored term under an aligned pair; terms whose prefix
/// is off the tree are evaluated from the off-path tables.
pub fn anchored_term_moment(
    human: &StructuredHuman,
    policy: &StructuredPolicy,
    occ: &Occupancy,
    term: &AnchoredTerm,
) -> f64 {
    match human.tree.locate(&term.human, &term.machine) {
        Some(node) => anchored_moment(human, policy, occ, node, &term.table),
        None => {
            // Reaching an off-tree prefix: walk the prefix probability.
            let spec = human.spec;
            let mut mass = 1.0;
            let mut node = Some(ROOT);
            for (k, (&h, &m)) in term.human.iter().zip(&term.machine).enumerate() {
                let (q, p) = match node {
                    Some(n) => (&policy.nodes[n][..], &human.nodes[n][..]),
                    None => (&policy.off_path[k][..], &human.off_path[k][..]),
                };
                mass *= q[m] * p[spec.cond(m, h)];
                node = node.and_then(|n| human.tree.child(n, spec.pair(h, m)));
            }
            let k = term.human.len();
            let (q, p) = (&policy.off_path[k], &human.off_path[k]);
            let mut acc = 0.0;
            for m in 0..spec.machine_actions {
                for h in 0..spec.human_actions {
                    acc += q[m] * p[spec.cond(m, h)] * term.table[spec.pair(h, m)];
                }
            }
            mass * acc
        }
    }
}

/// Causal entropies `(H(H^T || M^T), H(M^T || H^T))` of an aligned pair.
pub fn causal_entropies(
    human: &StructuredHuman,
    policy: &StructuredPolicy,
    occ: &Occupancy,
) -> (f64, f64) {
    let spec = human.spec;
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    let step = |q: &[f64], p: &[f64]| {
        let mut eh = 0.0;
        let mut em = 0.0;
        for m in 0..nm {
            em -= xlogx(q[m]);
            if q[m] > 0.0 {
                let block = &p[m * nh..(m + 1) * nh];
                eh -= q[m] * block.iter().map(|&x| xlogx(x)).sum::<f64>();
            }
        }
        (eh, em)
    };
    let mut human_entropy = 0.0;
    let mut machine_entropy = 0.0;
    for k in 0..spec.horizon {
        let (eh, em) = step(&policy.off_path[k], &human.off_path[k]);
        human_entropy += occ.off_mass[k] * eh;
        machine_entropy += occ.off_mass[k] * em;
        for &node in human.tree.level(k) {
            let (eh, em) = step(&policy.nodes[node], &human.nodes[node]);
            human_entropy += occ.node_mass[node] * eh;
            machine_entropy += occ.node_mass[node] * em;
        }
    }
    (human_entropy, machine_entropy)
}

/// `P(T_D > t)` where `T_D` is the first step at which the interaction
/// leaves the union of the model's and the policy's trees.
pub fn stopping_time_survival(
    human: &StructuredHuman,
    policy: &StructuredPolicy,
    t: usize,
) -> Result<f64> {
    if t > human.spec.horizon {
        return Err(Error::Invalid(format!(
            "step {t} beyond horizon {}",
            human.spec.horizon
        )));
    }
    let (h, q) = align(human, policy)?;
    let occ = occupancy(&h, &q)?;
    Ok(occ.survival(&h.tree, t))
}
