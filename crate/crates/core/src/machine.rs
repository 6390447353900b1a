//! Entropy-regularized machine policy optimization.
//!
//! For a fixed human model the policy maximizing
//! `H(M^T || H^T) + gamma E[r]` is a softmax over backward values `Y`:
//! `Q(m_t | h^{t-1}, m^{t-1}) = Y(m_t | h^{t-1}, m^{t-1}) / Y(h^{t-1}, m^{t-1})`.
//!
//! The dense recursion follows that form literally with the whole reward at
//! the terminal step. The structured recursion works with values shifted by
//! the reward already collected, which leaves every conditional unchanged:
//!
//! ```text
//! A(node, m) = sum_h P(h | node, m) [ gamma rho(h, m) + B(child(h, m)) ]
//! B(node)    = logsumexp_m A(node, m),   B = 0 at depth T
//! ```
//!
//! with off-tree children contributing the per-depth value `b_{k+1}`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RewardFunction;
use crate::logspace::{expectation, log_sum_exp, softmax_into};
use crate::process::{
    causal_entropy, expect_function, CausalTable, MachinePolicy, ProcessSpec, Side, Trajectory,
};
use crate::structured::{
    align, anchored_term_moment, causal_entropies, occupancy, StructuredHuman, StructuredPolicy,
};
use crate::tree::{PrefixTree, ROOT};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "kebab-case")]
pub enum YValues {
    /// `log Y(m_t | h^{t-1}, m^{t-1})`, per step laid out `[history][m]`.
    Dense { steps: Vec<Vec<f64>> },
    /// Shifted log values on a tree: `A` per node and per step off the tree,
    /// and their log-sum-exp `B`.
    Structured {
        tree: PrefixTree,
        off_path: Vec<Vec<f64>>,
        off_value: Vec<f64>,
        nodes: Vec<Vec<f64>>,
        node_value: Vec<f64>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct YTables {
    pub spec: ProcessSpec,
    pub gamma: f64,
    pub values: YValues,
    /// `log sum_{m_1} Y(m_1)`.
    pub log_partition: f64,
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(gamma.is_finite() && gamma >= 0.0) {
        return Err(Error::Invalid(format!(
            "gamma must be finite and nonnegative, got {gamma}"
        )));
    }
    Ok(())
}

/// The backward recursion over every history.
pub fn backward_y_dense(
    p_hat: &CausalTable,
    reward: &RewardFunction,
    gamma: f64,
    cap: u64,
) -> Result<YTables> {
    check_gamma(gamma)?;
    if p_hat.side() != Side::Human {
        return Err(Error::SpecMismatch(
            "the Y recursion needs a human table".into(),
        ));
    }
    let spec = p_hat.spec();
    if reward.spec() != spec {
        return Err(Error::SpecMismatch("reward built for another spec".into()));
    }
    spec.check_cap(cap)?;
    let (nh, nm, pairs) = (spec.human_actions, spec.machine_actions, spec.pairs());

    let mut steps = vec![Vec::new(); spec.horizon];
    // log Y(h^k, m^k) for the level below the current one.
    let mut below: Vec<f64> = Vec::new();
    for k in (0..spec.horizon).rev() {
        let parents = spec.histories_at(k).expect("under cap");
        let mut step = vec![0.0; parents * nm];
        for parent in 0..parents {
            let (mut human, mut machine) = if k + 1 == spec.horizon {
                spec.decode_history(k, parent)
            } else {
                (Vec::new(), Vec::new())
            };
            for m in 0..nm {
                let probs = p_hat.probs(k + 1, parent, m);
                step[parent * nm + m] = expectation((0..nh).filter(|&h| probs[h] > 0.0).map(|h| {
                    let value = if k + 1 == spec.horizon {
                        human.push(h);
                        machine.push(m);
                        let r = reward.eval(&Trajectory {
                            human: human.clone(),
                            machine: machine.clone(),
                        });
                        human.pop();
                        machine.pop();
                        gamma * r
                    } else {
                        below[parent * pairs + spec.pair(h, m)]
                    };
                    (probs[h], value)
                }));
            }
        }
        below = step.chunks(nm).map(log_sum_exp).collect();
        steps[k] = step;
    }
    Ok(YTables {
        spec,
        gamma,
        values: YValues::Dense { steps },
        log_partition: below[0],
    })
}

/// The backward recursion on the union of the human model's tree and the
/// reward's path supports.
pub fn backward_y_structured(
    p_hat: &StructuredHuman,
    reward: &RewardFunction,
    gamma: f64,
) -> Result<YTables> {
    check_gamma(gamma)?;
    let spec = p_hat.spec();
    if reward.spec() != spec {
        return Err(Error::SpecMismatch("reward built for another spec".into()));
    }
    let (nh, nm, horizon) = (spec.human_actions, spec.machine_actions, spec.horizon);
    let mut tree = p_hat.tree().clone();
    let terms = reward.anchored_terms();
    let mut anchors = Vec::with_capacity(terms.len());
    for term in &terms {
        let node = tree.insert(&term.human, &term.machine)?;
        if let Some(pair) = term.support {
            let (h, m) = spec.unpair(pair);
            let mut human = term.human.clone();
            let mut machine = term.machine.clone();
            human.push(h);
            machine.push(m);
            tree.insert(&human, &machine)?;
        }
        anchors.push(node);
    }
    let p = if tree.len() == p_hat.tree().len() {
        p_hat.clone()
    } else {
        p_hat.reshape(&tree)?
    };
    let mut node_extra = vec![None::<Vec<f64>>; tree.len()];
    for (term, &node) in terms.iter().zip(&anchors) {
        let slot = node_extra[node].get_or_insert_with(|| vec![0.0; spec.pairs()]);
        for (a, b) in slot.iter_mut().zip(&term.table) {
            *a += b;
        }
    }

    let rd = &reward.decomposable;
    let mut off_path = vec![vec![0.0; nm]; horizon];
    let mut off_value = vec![0.0; horizon + 1];
    for k in (0..horizon).rev() {
        let table = p.off_path(k + 1);
        for m in 0..nm {
            off_path[k][m] = expectation((0..nh).map(|h| {
                (
                    table[spec.cond(m, h)],
                    gamma * rd.get(k + 1, h, m) + off_value[k + 1],
                )
            }));
        }
        off_value[k] = log_sum_exp(&off_path[k]);
    }

    let mut nodes = vec![Vec::new(); tree.len()];
    let mut node_value = vec![0.0; tree.len()];
    for k in (0..horizon).rev() {
        for &node in tree.level(k) {
            let table = p.node_table(node);
            let extra = node_extra[node].as_deref();
            let mut a = vec![0.0; nm];
            for m in 0..nm {
                a[m] = expectation((0..nh).filter(|&h| table[spec.cond(m, h)] > 0.0).map(|h| {
                    let pair = spec.pair(h, m);
                    let rho = rd.get(k + 1, h, m) + extra.map_or(0.0, |e| e[pair]);
                    let next = tree
                        .child(node, pair)
                        .map_or(off_value[k + 1], |c| node_value[c]);
                    (table[spec.cond(m, h)], gamma * rho + next)
                }));
            }
            node_value[node] = log_sum_exp(&a);
            nodes[node] = a;
        }
    }
    Ok(YTables {
        spec,
        gamma,
        log_partition: node_value[ROOT],
        values: YValues::Structured {
            tree,
            off_path,
            off_value,
            nodes,
            node_value,
        },
    })
}

/// A policy extracted from [`YTables`], in the representation of the tables.
#[derive(Clone, Debug, PartialEq)]
pub enum MachineTable {
    Dense(CausalTable),
    Structured(StructuredPolicy),
}

impl MachinePolicy for MachineTable {
    fn spec(&self) -> ProcessSpec {
        match self {
            MachineTable::Dense(t) => MachinePolicy::spec(t),
            MachineTable::Structured(p) => MachinePolicy::spec(p),
        }
    }

    fn machine_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        match self {
            MachineTable::Dense(t) => t.machine_conditional(human, machine, out),
            MachineTable::Structured(p) => p.machine_conditional(human, machine, out),
        }
    }
}

impl MachineTable {
    pub fn into_structured(self) -> Option<StructuredPolicy> {
        match self {
            MachineTable::Structured(p) => Some(p),
            MachineTable::Dense(_) => None,
        }
    }

    pub fn into_dense(self) -> Option<CausalTable> {
        match self {
            MachineTable::Dense(t) => Some(t),
            MachineTable::Structured(_) => None,
        }
    }
}

fn softmax_block(logits: &[f64], out: &mut Vec<f64>) {
    let start = out.len();
    out.resize(start + logits.len(), 0.0);
    softmax_into(logits, &mut out[start..]);
}

/// `Q = Y(m_t | .) / Y(.)` at every history.
pub fn extract_policy(y: &YTables) -> Result<MachineTable> {
    let spec = y.spec;
    let nm = spec.machine_actions;
    match &y.values {
        YValues::Dense { steps } => {
            let probs = steps
                .iter()
                .map(|step| {
                    let mut out = Vec::with_capacity(step.len());
                    for block in step.chunks(nm) {
                        softmax_block(block, &mut out);
                    }
                    out
                })
                .collect();
            Ok(MachineTable::Dense(CausalTable::from_steps(
                spec,
                Side::Machine,
                probs,
            )?))
        }
        YValues::Structured {
            tree,
            off_path,
            nodes,
            ..
        } => {
            let off = off_path
                .iter()
                .map(|a| {
                    let mut out = Vec::with_capacity(nm);
                    softmax_block(a, &mut out);
                    out
                })
                .collect();
            let node_probs = nodes
                .iter()
                .map(|a| {
                    let mut out = Vec::with_capacity(a.len());
                    if !a.is_empty() {
                        softmax_block(a, &mut out);
                    }
                    out
                })
                .collect();
            Ok(MachineTable::Structured(StructuredPolicy::new(
                spec,
                tree.clone(),
                off,
                node_probs,
            )?))
        }
    }
}

/// `log sum_{m_1} Y(m_1)`.
pub fn log_partition(y: &YTables) -> f64 {
    y.log_partition
}

/// `H(M^T || H^T) + gamma E[r]` over dense tables.
pub fn machine_objective(
    p_hat: &CausalTable,
    q: &CausalTable,
    reward: &RewardFunction,
    gamma: f64,
    cap: u64,
) -> Result<f64> {
    let entropy = causal_entropy(Side::Machine, p_hat, q, cap)?;
    let expected = expect_function(p_hat, q, cap, |t| reward.eval(t))?;
    Ok(entropy + gamma * expected)
}

/// Machine entropy and expected reward of a structured pair.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegularizedReward {
    pub machine_entropy: f64,
    pub human_entropy: f64,
    pub expected_reward: f64,
    pub value: f64,
}

/// `E_{P Q}[-log Q(M^T || H^T) + gamma r]` for structured models.
pub fn regularized_reward(
    p_hat: &StructuredHuman,
    q: &StructuredPolicy,
    reward: &RewardFunction,
    gamma: f64,
) -> Result<RegularizedReward> {
    let (h, p) = align(p_hat, q)?;
    let occ = occupancy(&h, &p)?;
    let (human_entropy, machine_entropy) = causal_entropies(&h, &p, &occ);
    let mut expected_reward = occ.decomposable_moment(&reward.decomposable);
    for term in reward.anchored_terms() {
        expected_reward += anchored_term_moment(&h, &p, &occ, &term);
    }
    let value = machine_entropy + gamma * expected_reward;
    if !value.is_finite() {
        return Err(Error::NonFinite("regularized reward".into()));
    }
    Ok(RegularizedReward {
        machine_entropy,
        human_entropy,
        expected_reward,
        value,
    })
}

/// Per-step marginals `Q_t(m) ∝ exp(gamma sum_h P_t(h | m) r_t(h, m))` for a
/// one-step Markov human model and a decomposable reward.
pub fn decomposable_policy(
    p_hat: &StructuredHuman,
    reward: &RewardFunction,
    gamma: f64,
) -> Result<Vec<Vec<f64>>> {
    check_gamma(gamma)?;
    let spec = p_hat.spec();
    if !reward.is_decomposable() {
        return Err(Error::Unsupported(
            "the closed form needs a decomposable reward".into(),
        ));
    }
    let tree = p_hat.tree();
    let markov = (0..tree.len()).all(|id| {
        let depth = tree.node(id).depth;
        depth == spec.horizon || p_hat.node_table(id) == p_hat.off_path(depth + 1)
    });
    if !markov {
        return Err(Error::Unsupported(
            "the closed form needs a human model that is one-step Markov at every history".into(),
        ));
    }
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    Ok((1..=spec.horizon)
        .map(|t| {
            let table = p_hat.off_path(t);
            let logits: Vec<f64> = (0..nm)
                .map(|m| {
                    gamma
                        * (0..nh)
                            .map(|h| table[spec.cond(m, h)] * reward.decomposable.get(t, h, m))
                            .sum::<f64>()
                })
                .collect();
            crate::logspace::softmax(&logits)
        })
        .collect())
}
