//! The Gibbs recursion on a prefix tree.
//!
//! Per-step weights are `w_t(h, m) = sum_i lambda_i f^i_t(h, m)` plus, at a
//! tree node, the anchored tables of the features rooted there. With
//! `U = 0` at depth `T`, a node at depth `k` gets
//!
//! ```text
//! V(node, m) = logsumexp_h [ w(h, m) + U(child(h, m)) ]
//! U(node)    = sum_m Q(m | node) V(node, m)
//! P(h | node, m) = exp(w(h, m) + U(child) - V(node, m))
//! ```
//!
//! where a child off the tree contributes the off-tree value `u_{k+1}`,
//! computed by the same recursion on the per-step tables alone. `U(root)`
//! is the log partition function.

use crate::error::{Error, Result};
use crate::features::{ConstraintSet, StepTables};
use crate::logspace::{log_sum_exp, softmax_into};
use crate::process::ProcessSpec;
use crate::structured::{
    anchored_moment, occupancy, HumanLogNorms, Occupancy, StructuredHuman, StructuredPolicy,
};
use crate::tree::{NodeId, PrefixTree, ROOT};

use super::{DualEval, DualProblem, DualVars};

/// A constraint set compiled against a policy: the union tree and, per
/// feature, its per-step tables and anchored terms located on that tree.
#[derive(Clone, Debug)]
pub struct StructuredDual {
    spec: ProcessSpec,
    tree: PrefixTree,
    policy: StructuredPolicy,
    decomposable: Vec<Option<StepTables>>,
    /// `(feature, node, table)`.
    anchored: Vec<(usize, NodeId, Vec<f64>)>,
    /// Indices into `anchored`, grouped by node.
    node_terms: Vec<Vec<usize>>,
    targets: Vec<f64>,
    n_equality: usize,
}

impl StructuredDual {
    pub fn new(policy: &StructuredPolicy, constraints: &ConstraintSet) -> Result<Self> {
        let spec = policy.spec();
        constraints.validate(&spec)?;
        let mut tree = policy.tree().clone();
        let mut decomposable = Vec::with_capacity(constraints.len());
        let mut anchored = Vec::new();
        for (i, feature) in constraints.features().enumerate() {
            let (dec, terms) = feature.structured_parts(&spec)?;
            decomposable.push(dec.cloned());
            for term in terms {
                let node = tree.insert(&term.human, &term.machine)?;
                if let Some(pair) = term.support {
                    let (h, m) = spec.unpair(pair);
                    let mut human = term.human.clone();
                    let mut machine = term.machine.clone();
                    human.push(h);
                    machine.push(m);
                    tree.insert(&human, &machine)?;
                }
                anchored.push((i, node, term.table));
            }
        }
        let mut node_terms = vec![Vec::new(); tree.len()];
        for (j, (_, node, _)) in anchored.iter().enumerate() {
            node_terms[*node].push(j);
        }
        let policy = policy.reshape(&tree)?;
        Ok(StructuredDual {
            spec,
            tree,
            policy,
            decomposable,
            anchored,
            node_terms,
            targets: constraints.targets(),
            n_equality: constraints.equality.len(),
        })
    }

    pub fn tree(&self) -> &PrefixTree {
        &self.tree
    }

    pub fn policy(&self) -> &StructuredPolicy {
        &self.policy
    }

    fn step_weights(&self, lambda: &[f64]) -> Vec<Vec<f64>> {
        let mut w = vec![vec![0.0; self.spec.pairs()]; self.spec.horizon];
        for (tables, &l) in self.decomposable.iter().zip(lambda) {
            let Some(tables) = tables else { continue };
            if l == 0.0 {
                continue;
            }
            for (k, row) in w.iter_mut().enumerate() {
                for (a, b) in row.iter_mut().zip(tables.step(k + 1)) {
                    *a += l * b;
                }
            }
        }
        w
    }

    /// `P_lambda` and its log partition function.
    pub fn model(&self, lambda: &[f64]) -> Result<(StructuredHuman, f64)> {
        if lambda.len() != self.targets.len() {
            return Err(Error::Shape(format!(
                "{} multipliers for {} constraints",
                lambda.len(),
                self.targets.len()
            )));
        }
        if lambda.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFinite("dual variables".into()));
        }
        let spec = self.spec;
        let (nh, nm, horizon) = (spec.human_actions, spec.machine_actions, spec.horizon);
        let w = self.step_weights(lambda);
        let q = &self.policy;

        let mut off_path = vec![vec![0.0; spec.pairs()]; horizon];
        let mut off_norm = vec![vec![0.0; nm]; horizon];
        let mut u = vec![0.0; horizon + 1];
        let mut scratch = vec![0.0; nh];
        let mut probs_h = vec![0.0; nh];
        for k in (0..horizon).rev() {
            let mut acc = 0.0;
            for m in 0..nm {
                for h in 0..nh {
                    scratch[h] = w[k][spec.pair(h, m)];
                }
                let v = log_sum_exp(&scratch) + u[k + 1];
                softmax_into(&scratch, &mut probs_h);
                for h in 0..nh {
                    off_path[k][spec.cond(m, h)] = probs_h[h];
                }
                off_norm[k][m] = v;
                let qm = q.off_path(k + 1)[m];
                if qm > 0.0 {
                    acc += qm * v;
                }
            }
            u[k] = acc;
        }

        let tree = &self.tree;
        let mut value = vec![0.0; tree.len()];
        let mut nodes = vec![Vec::new(); tree.len()];
        let mut node_norm = vec![Vec::new(); tree.len()];
        let mut node_w = vec![0.0; spec.pairs()];
        for k in (0..horizon).rev() {
            for &node in tree.level(k) {
                node_w.copy_from_slice(&w[k]);
                for &j in &self.node_terms[node] {
                    let (i, _, ref table) = self.anchored[j];
                    let l = lambda[i];
                    for (a, b) in node_w.iter_mut().zip(table) {
                        *a += l * b;
                    }
                }
                let mut probs = vec![0.0; spec.pairs()];
                let mut norms = vec![0.0; nm];
                let qn = q.node_table(node);
                let mut acc = 0.0;
                for m in 0..nm {
                    for h in 0..nh {
                        let pair = spec.pair(h, m);
                        let next = tree.child(node, pair).map_or(u[k + 1], |c| value[c]);
                        scratch[h] = node_w[pair] + next;
                    }
                    let v = log_sum_exp(&scratch);
                    softmax_into(&scratch, &mut probs_h);
                    for h in 0..nh {
                        probs[spec.cond(m, h)] = probs_h[h];
                    }
                    norms[m] = v;
                    if qn[m] > 0.0 {
                        acc += qn[m] * v;
                    }
                }
                value[node] = acc;
                nodes[node] = probs;
                node_norm[node] = norms;
            }
        }
        let model = StructuredHuman {
            spec,
            tree: tree.clone(),
            off_path,
            nodes,
            log_norms: Some(HumanLogNorms {
                off_path: off_norm,
                nodes: node_norm,
            }),
        };
        Ok((model, value[ROOT]))
    }

    /// Feature moments under `model Q` for a model on this problem's tree.
    pub fn moments(&self, model: &StructuredHuman, occ: &Occupancy) -> Vec<f64> {
        let mut moments: Vec<f64> = self
            .decomposable
            .iter()
            .map(|d| d.as_ref().map_or(0.0, |t| occ.decomposable_moment(t)))
            .collect();
        for (i, node, table) in &self.anchored {
            moments[*i] += anchored_moment(model, &self.policy, occ, *node, table);
        }
        moments
    }
}

impl DualProblem for StructuredDual {
    type Model = StructuredHuman;

    fn n_equality(&self) -> usize {
        self.n_equality
    }

    fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn evaluate(&self, lambda: &[f64]) -> Result<DualEval<StructuredHuman>> {
        let (model, log_z) = self.model(lambda)?;
        let occ = occupancy(&model, &self.policy)?;
        let moments = self.moments(&model, &occ);
        let objective = log_z
            - lambda
                .iter()
                .zip(&self.targets)
                .map(|(l, c)| l * c)
                .sum::<f64>();
        Ok(DualEval {
            objective,
            moments,
            model,
        })
    }
}

/// `P_lambda` in structured form against a structured policy.
pub fn backward_z_structured(
    policy: &StructuredPolicy,
    lambda: &DualVars,
    constraints: &ConstraintSet,
) -> Result<StructuredHuman> {
    lambda.validate(constraints)?;
    Ok(StructuredDual::new(policy, constraints)?
        .model(&lambda.flatten())?
        .0)
}

/// Moments of every constraint feature under `model policy`.
pub fn feature_moments_structured(
    model: &StructuredHuman,
    policy: &StructuredPolicy,
    constraints: &ConstraintSet,
) -> Result<Vec<f64>> {
    let spec = model.spec();
    constraints.validate(&spec)?;
    let (h, q) = crate::structured::align(model, policy)?;
    let occ = occupancy(&h, &q)?;
    constraints
        .features()
        .map(|f| {
            let (dec, terms) = f.structured_parts(&spec)?;
            let mut acc = dec.map_or(0.0, |t| occ.decomposable_moment(t));
            for term in &terms {
                acc += crate::structured::anchored_term_moment(&h, &q, &occ, term);
            }
            Ok(acc)
        })
        .collect()
}

/// Dual objective `log Z_lambda - lambda . c` in structured form.
pub fn dual_objective(
    policy: &StructuredPolicy,
    lambda: &DualVars,
    constraints: &ConstraintSet,
) -> Result<f64> {
    lambda.validate(constraints)?;
    let problem = StructuredDual::new(policy, constraints)?;
    let (_, log_z) = problem.model(&lambda.flatten())?;
    Ok(log_z
        - lambda
            .flatten()
            .iter()
            .zip(problem.targets())
            .map(|(l, c)| l * c)
            .sum::<f64>())
}

/// `E_{P_lambda Q}[f] - c` in structured form.
pub fn dual_gradient(
    policy: &StructuredPolicy,
    lambda: &DualVars,
    constraints: &ConstraintSet,
) -> Result<Vec<f64>> {
    lambda.validate(constraints)?;
    let problem = StructuredDual::new(policy, constraints)?;
    let eval = problem.evaluate(&lambda.flatten())?;
    Ok(eval.gradient(problem.targets()))
}
