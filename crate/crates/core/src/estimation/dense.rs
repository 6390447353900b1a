//! The Gibbs recursion over every history, for small horizons. Features of
//! any form are evaluated on complete trajectories at the terminal step.

use crate::error::{Error, Result};
use crate::features::ConstraintSet;
use crate::logspace::{log_sum_exp, softmax_into};
use crate::process::{factorize_joint, CausalTable, ProcessSpec, Side, Trajectory};

use super::{DualEval, DualProblem, DualVars};

/// A dense Gibbs model together with `log Z(m_1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct DenseGibbs {
    pub model: CausalTable,
    /// `log Z(m_1)` for each first machine action.
    pub log_z_first: Vec<f64>,
}

fn check_inputs(
    q: &CausalTable,
    lambda: &[f64],
    c: &ConstraintSet,
    cap: u64,
) -> Result<ProcessSpec> {
    if q.side() != Side::Machine {
        return Err(Error::SpecMismatch(
            "the Gibbs recursion needs a machine table".into(),
        ));
    }
    let spec = q.spec();
    spec.check_cap(cap)?;
    c.validate(&spec)?;
    if lambda.len() != c.len() {
        return Err(Error::Shape(format!(
            "{} multipliers for {} constraints",
            lambda.len(),
            c.len()
        )));
    }
    if lambda.iter().any(|l| !l.is_finite()) {
        return Err(Error::NonFinite("dual variables".into()));
    }
    Ok(spec)
}

fn gibbs_dense(q: &CausalTable, lambda: &[f64], c: &ConstraintSet, cap: u64) -> Result<DenseGibbs> {
    let spec = check_inputs(q, lambda, c, cap)?;
    let pairs = spec.pairs();
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    let count = spec.check_cap(cap)?;

    // log Z(h_T | h^{T-1}, m^T) = lambda . f(h^T, m^T), indexed by full history.
    let features: Vec<_> = c.features().collect();
    let mut level: Vec<f64> = (0..count)
        .map(|idx| {
            let traj = Trajectory::from_index(&spec, idx);
            features
                .iter()
                .zip(lambda)
                .map(|(f, l)| l * f.value(&spec, &traj))
                .sum()
        })
        .collect();

    let mut steps = vec![Vec::new(); spec.horizon];
    let mut log_z_first = vec![0.0; nm];
    let mut scratch = vec![0.0; nh];
    let mut probs_h = vec![0.0; nh];
    for k in (0..spec.horizon).rev() {
        let parents = level.len() / pairs;
        let mut probs = vec![0.0; parents * pairs];
        let mut up = vec![0.0; parents];
        for parent in 0..parents {
            let q_row = q.probs(k + 1, parent, 0);
            let mut acc = 0.0;
            for m in 0..nm {
                for h in 0..nh {
                    scratch[h] = level[parent * pairs + spec.pair(h, m)];
                }
                // log Z(h^{k}, m^{k+1})
                let v = log_sum_exp(&scratch);
                softmax_into(&scratch, &mut probs_h);
                for h in 0..nh {
                    probs[parent * pairs + spec.cond(m, h)] = probs_h[h];
                }
                if k == 0 {
                    log_z_first[m] = v;
                }
                if q_row[m] > 0.0 {
                    acc += q_row[m] * v;
                }
            }
            up[parent] = acc;
        }
        steps[k] = probs;
        level = up;
    }
    let model = CausalTable::from_steps(spec, Side::Human, steps)?;
    Ok(DenseGibbs { model, log_z_first })
}

/// `P_lambda` by the backward recursion over all histories.
pub fn backward_z_dense(
    q: &CausalTable,
    lambda: &DualVars,
    c: &ConstraintSet,
    cap: u64,
) -> Result<DenseGibbs> {
    lambda.validate(c)?;
    gibbs_dense(q, &lambda.flatten(), c, cap)
}

/// Exact feature moments under `P Q` by enumeration.
pub fn feature_moments_dense(
    p: &CausalTable,
    q: &CausalTable,
    c: &ConstraintSet,
    cap: u64,
) -> Result<Vec<f64>> {
    let spec = p.spec();
    let joint = factorize_joint(p, q, cap)?;
    let features: Vec<_> = c.features().collect();
    let mut moments = vec![0.0; features.len()];
    for (traj, mass) in joint.iter() {
        if mass == 0.0 {
            continue;
        }
        for (acc, f) in moments.iter_mut().zip(&features) {
            *acc += mass * f.value(&spec, &traj);
        }
    }
    Ok(moments)
}

/// The dual over dense tables: `sum_m Q(m_1) log Z(m_1) - lambda . c`.
pub struct DenseDual<'a> {
    q: &'a CausalTable,
    constraints: &'a ConstraintSet,
    targets: Vec<f64>,
    cap: u64,
}

impl<'a> DenseDual<'a> {
    pub fn new(q: &'a CausalTable, constraints: &'a ConstraintSet, cap: u64) -> Result<Self> {
        check_inputs(q, &vec![0.0; constraints.len()], constraints, cap)?;
        Ok(DenseDual {
            q,
            constraints,
            targets: constraints.targets(),
            cap,
        })
    }
}

impl DualProblem for DenseDual<'_> {
    type Model = CausalTable;

    fn n_equality(&self) -> usize {
        self.constraints.equality.len()
    }

    fn targets(&self) -> &[f64] {
        &self.targets
    }

    fn evaluate(&self, lambda: &[f64]) -> Result<DualEval<CausalTable>> {
        let gibbs = gibbs_dense(self.q, lambda, self.constraints, self.cap)?;
        let q1 = self.q.probs(1, 0, 0);
        let log_z: f64 = q1
            .iter()
            .zip(&gibbs.log_z_first)
            .filter(|(q, _)| **q > 0.0)
            .map(|(q, z)| q * z)
            .sum();
        let objective = log_z
            - lambda
                .iter()
                .zip(&self.targets)
                .map(|(l, c)| l * c)
                .sum::<f64>();
        let moments = feature_moments_dense(&gibbs.model, self.q, self.constraints, self.cap)?;
        Ok(DualEval {
            objective,
            moments,
            model: gibbs.model,
        })
    }
}

/// Dual objective over dense tables.
pub fn dual_objective_dense(
    q: &CausalTable,
    lambda: &DualVars,
    c: &ConstraintSet,
    cap: u64,
) -> Result<f64> {
    lambda.validate(c)?;
    Ok(DenseDual::new(q, c, cap)?
        .evaluate(&lambda.flatten())?
        .objective)
}

/// `E_{P_lambda Q}[f] - c` over dense tables.
pub fn dual_gradient_dense(
    q: &CausalTable,
    lambda: &DualVars,
    c: &ConstraintSet,
    cap: u64,
) -> Result<Vec<f64>> {
    lambda.validate(c)?;
    let problem = DenseDual::new(q, c, cap)?;
    let eval = problem.evaluate(&lambda.flatten())?;
    Ok(eval.gradient(problem.targets()))
}
