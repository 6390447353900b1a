//! Brute-force reference computations for small interaction processes.
//!
//! Everything here enumerates trajectories or histories explicitly and works
//! in linear space, sharing nothing with `area-core` beyond the model traits
//! and feature evaluation. Intended for tests only.

pub mod instances;

use std::collections::HashMap;

use area_core::features::{ConstraintSet, RewardFunction};
use area_core::process::{HumanModel, MachinePolicy, ProcessSpec, Trajectory};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OracleError {
    #[error("{count} trajectories exceed the oracle budget of {budget}")]
    Budget { count: u128, budget: u64 },
    #[error("projected gradient ascent did not converge in {iterations} iterations (residual {residual:e})")]
    NotConverged { iterations: usize, residual: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OracleBudget {
    pub max_trajectories: u64,
    pub max_gradient_iters: usize,
    pub tolerance: f64,
}

impl Default for OracleBudget {
    fn default() -> Self {
        OracleBudget {
            max_trajectories: 100_000,
            max_gradient_iters: 200_000,
            tolerance: 1e-10,
        }
    }
}

fn check_budget(spec: &ProcessSpec, budget: &OracleBudget) -> Result<(), OracleError> {
    let count =
        (spec.human_actions as u128 * spec.machine_actions as u128).pow(spec.horizon as u32);
    if count > budget.max_trajectories as u128 {
        return Err(OracleError::Budget {
            count,
            budget: budget.max_trajectories,
        });
    }
    Ok(())
}

/// Every trajectory exactly once, ordered lexicographically by
/// `(h_1, m_1, h_2, m_2, ...)`.
pub fn enumerate_trajectories(
    spec: &ProcessSpec,
    budget: &OracleBudget,
) -> Result<Vec<Trajectory>, OracleError> {
    check_budget(spec, budget)?;
    let t = spec.horizon;
    let mut digits = vec![0usize; 2 * t];
    let radix: Vec<usize> = (0..2 * t)
        .map(|i| {
            if i % 2 == 0 {
                spec.human_actions
            } else {
                spec.machine_actions
            }
        })
        .collect();
    let mut out = Vec::new();
    loop {
        out.push(Trajectory {
            human: digits.iter().step_by(2).copied().collect(),
            machine: digits.iter().skip(1).step_by(2).copied().collect(),
        });
        let mut i = 2 * t;
        loop {
            if i == 0 {
                return Ok(out);
            }
            i -= 1;
            digits[i] += 1;
            if digits[i] < radix[i] {
                break;
            }
            digits[i] = 0;
        }
    }
}

/// Probability of a trajectory as the product of all `2T` conditionals.
pub fn trajectory_mass(p: &dyn HumanModel, q: &dyn MachinePolicy, traj: &Trajectory) -> f64 {
    let spec = p.spec();
    let mut hp = vec![0.0; spec.human_actions];
    let mut mp = vec![0.0; spec.machine_actions];
    let mut mass = 1.0;
    for t in 0..spec.horizon {
        q.machine_conditional(&traj.human[..t], &traj.machine[..t], &mut mp);
        mass *= mp[traj.machine[t]];
        p.human_conditional(&traj.human[..t], &traj.machine[..=t], &mut hp);
        mass *= hp[traj.human[t]];
    }
    mass
}

/// `E_{PQ}[f]` by enumeration.
pub fn expectation(
    p: &dyn HumanModel,
    q: &dyn MachinePolicy,
    budget: &OracleBudget,
    f: impl Fn(&Trajectory) -> f64,
) -> Result<f64, OracleError> {
    let spec = p.spec();
    Ok(enumerate_trajectories(&spec, budget)?
        .iter()
        .map(|traj| {
            let mass = trajectory_mass(p, q, traj);
            if mass == 0.0 {
                0.0
            } else {
                mass * f(traj)
            }
        })
        .sum())
}

/// `-log` of one side's causally conditioned product along a trajectory.
pub fn neg_log_side(
    p: &dyn HumanModel,
    q: &dyn MachinePolicy,
    traj: &Trajectory,
    human_side: bool,
) -> f64 {
    let spec = p.spec();
    let mut buf_h = vec![0.0; spec.human_actions];
    let mut buf_m = vec![0.0; spec.machine_actions];
    let mut prod = 1.0;
    for t in 0..spec.horizon {
        if human_side {
            p.human_conditional(&traj.human[..t], &traj.machine[..=t], &mut buf_h);
            prod *= buf_h[traj.human[t]];
        } else {
            q.machine_conditional(&traj.human[..t], &traj.machine[..t], &mut buf_m);
            prod *= buf_m[traj.machine[t]];
        }
    }
    -prod.ln()
}

/// Causal entropy of the human (`human_side`) or machine side.
pub fn causal_entropy(
    p: &dyn HumanModel,
    q: &dyn MachinePolicy,
    budget: &OracleBudget,
    human_side: bool,
) -> Result<f64, OracleError> {
    expectation(p, q, budget, |traj| neg_log_side(p, q, traj, human_side))
}

type History = (Vec<usize>, Vec<usize>);

/// The Gibbs model for multipliers `lambda`, computed by direct recursion on
/// linear-space partition functions:
///
/// `Z(h_T | h^{T-1}, m^T) = exp(lambda . f(h^T, m^T))`,
/// `Z(h_t | h^{t-1}, m^t) = exp(sum_{m_{t+1}} Q(m_{t+1} | h^t, m^t) log Z(h^t, m^{t+1}))`,
/// `Z(h^{t-1}, m^t) = sum_{h_t} Z(h_t | h^{t-1}, m^t)`.
pub struct NaiveGibbs<'a> {
    spec: ProcessSpec,
    q: &'a dyn MachinePolicy,
    constraints: &'a ConstraintSet,
    lambda: Vec<f64>,
    memo: std::sync::Mutex<HashMap<History, f64>>,
}

impl<'a> NaiveGibbs<'a> {
    pub fn new(q: &'a dyn MachinePolicy, constraints: &'a ConstraintSet, lambda: &[f64]) -> Self {
        NaiveGibbs {
            spec: q.spec(),
            q,
            constraints,
            lambda: lambda.to_vec(),
            memo: Default::default(),
        }
    }

    fn score(&self, traj: &Trajectory) -> f64 {
        self.constraints
            .features()
            .zip(&self.lambda)
            .map(|(f, l)| l * f.value(&self.spec, traj))
            .sum()
    }

    /// `Z(h_t | h^{t-1}, m^t)` for `human.len() == machine.len() == t`.
    fn z_given(&self, human: &[usize], machine: &[usize]) -> f64 {
        let t = human.len();
        if t == self.spec.horizon {
            return self
                .score(&Trajectory {
                    human: human.to_vec(),
                    machine: machine.to_vec(),
                })
                .exp();
        }
        let mut qv = vec![0.0; self.spec.machine_actions];
        self.q.machine_conditional(human, machine, &mut qv);
        let mut exponent = 0.0;
        let mut next = machine.to_vec();
        for (m, &qm) in qv.iter().enumerate() {
            if qm == 0.0 {
                continue;
            }
            next.push(m);
            exponent += qm * self.z(human, &next).ln();
            next.pop();
        }
        exponent.exp()
    }

    /// `Z(h^{t-1}, m^t)`.
    pub fn z(&self, human: &[usize], machine: &[usize]) -> f64 {
        let key = (human.to_vec(), machine.to_vec());
        if let Some(&v) = self.memo.lock().unwrap().get(&key) {
            return v;
        }
        let mut h = human.to_vec();
        let mut total = 0.0;
        for a in 0..self.spec.human_actions {
            h.push(a);
            total += self.z_given(&h, machine);
            h.pop();
        }
        self.memo.lock().unwrap().insert(key, total);
        total
    }

    /// `sum_{m_1} Q(m_1) log Z(m_1) - lambda . c`.
    pub fn dual_objective(&self) -> f64 {
        let mut qv = vec![0.0; self.spec.machine_actions];
        self.q.machine_conditional(&[], &[], &mut qv);
        let log_z: f64 = qv
            .iter()
            .enumerate()
            .filter(|(_, &q)| q > 0.0)
            .map(|(m, &q)| q * self.z(&[], &[m]).ln())
            .sum();
        let lc: f64 = self
            .lambda
            .iter()
            .zip(self.constraints.targets())
            .map(|(l, c)| l * c)
            .sum();
        log_z - lc
    }
}

impl HumanModel for NaiveGibbs<'_> {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn human_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        let denom = self.z(human, machine);
        let mut h = human.to_vec();
        for (a, slot) in out.iter_mut().enumerate() {
            h.push(a);
            *slot = self.z_given(&h, machine) / denom;
            h.pop();
        }
    }
}

/// `dual(lambda) - [H(P_hat) + lambda . (E_{P_hat Q} f - c)]`: nonnegative
/// for any `P_hat` by weak duality, zero when `P_hat` is the Gibbs model.
pub fn duality_gap(
    q: &dyn MachinePolicy,
    constraints: &ConstraintSet,
    lambda: &[f64],
    p_hat: &dyn HumanModel,
    budget: &OracleBudget,
) -> Result<f64, OracleError> {
    let spec = q.spec();
    let dual = NaiveGibbs::new(q, constraints, lambda).dual_objective();
    let entropy = causal_entropy(p_hat, q, budget, true)?;
    let mut penalty = 0.0;
    for ((f, l), c) in constraints
        .features()
        .zip(lambda)
        .zip(constraints.targets())
    {
        let moment = expectation(p_hat, q, budget, |t| f.value(&spec, t))?;
        penalty += l * (moment - c);
    }
    Ok(dual - (entropy + penalty))
}

/// A machine policy stored as one simplex vector per history.
#[derive(Clone, Debug)]
pub struct HistoryPolicy {
    spec: ProcessSpec,
    table: HashMap<History, Vec<f64>>,
}

impl HistoryPolicy {
    pub fn uniform(spec: ProcessSpec) -> Self {
        let mut table = HashMap::new();
        let mut stack: Vec<History> = vec![(Vec::new(), Vec::new())];
        while let Some((h, m)) = stack.pop() {
            if h.len() == spec.horizon {
                continue;
            }
            for a in 0..spec.human_actions {
                for b in 0..spec.machine_actions {
                    let mut h2 = h.clone();
                    let mut m2 = m.clone();
                    h2.push(a);
                    m2.push(b);
                    stack.push((h2, m2));
                }
            }
            table.insert(
                (h, m),
                vec![1.0 / spec.machine_actions as f64; spec.machine_actions],
            );
        }
        HistoryPolicy { spec, table }
    }

    pub fn get(&self, human: &[usize], machine: &[usize]) -> &[f64] {
        &self.table[&(human.to_vec(), machine.to_vec())]
    }
}

impl MachinePolicy for HistoryPolicy {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn machine_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        out.copy_from_slice(self.get(human, machine));
    }
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &x) in u.iter().enumerate() {
        cum += x;
        let candidate = (cum - 1.0) / (i + 1) as f64;
        if x - candidate > 0.0 {
            theta = candidate;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

#[derive(Clone, Debug)]
pub struct OracleOptimum {
    pub policy: HistoryPolicy,
    /// Objective of `policy`, evaluated by enumeration.
    pub objective: f64,
    /// Total inner gradient iterations over all histories.
    pub iterations: usize,
    /// Largest `||proj(Q + grad) - Q||_inf` over all histories.
    pub residual: f64,
}

/// `||proj_simplex(q + g) - q||_inf`.
fn projected_residual(q: &[f64], g: &[f64]) -> f64 {
    let moved: Vec<f64> = q.iter().zip(g).map(|(a, b)| a + b).collect();
    project_simplex(&moved)
        .iter()
        .zip(q)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

/// Maximizes `sum_m q_m (-log q_m + w_m)` over the simplex. The gradient is
/// preconditioned by `diag(q)` and each step length is found by bisection on
/// the directional derivative, which stays well resolved near the optimum.
fn solve_block(w: &[f64], budget: &OracleBudget) -> (Vec<f64>, usize, f64) {
    let n = w.len();
    let mut q = vec![1.0 / n as f64; n];
    let grad = |q: &[f64]| -> Vec<f64> { q.iter().zip(w).map(|(&p, &wm)| -p.ln() + wm).collect() };
    let mut iterations = 0;
    loop {
        let g = grad(&q);
        let residual = projected_residual(&q, &g);
        if residual <= budget.tolerance || iterations >= budget.max_gradient_iters {
            return (q, iterations, residual);
        }
        iterations += 1;
        let mean: f64 = q.iter().zip(&g).map(|(a, b)| a * b).sum();
        let d: Vec<f64> = q.iter().zip(&g).map(|(a, b)| a * (b - mean)).collect();
        // Largest step keeping every coordinate positive.
        let s_max = d
            .iter()
            .zip(&q)
            .filter(|(dm, _)| **dm < 0.0)
            .map(|(dm, qm)| -qm / dm)
            .fold(f64::INFINITY, f64::min)
            * 0.999;
        // d . grad(q + s d), written so that nothing large cancels:
        // d . grad(q) = sum q (g - mean)^2 and the change of -log q along d
        // is -log1p(s d / q).
        let base: f64 = q
            .iter()
            .zip(&g)
            .map(|(a, b)| a * (b - mean) * (b - mean))
            .sum();
        let slope = |s: f64| -> f64 {
            base - d
                .iter()
                .zip(&q)
                .map(|(dm, qm)| dm * (s * dm / qm).ln_1p())
                .sum::<f64>()
        };
        let (mut lo, mut hi) = (0.0, s_max);
        if slope(hi) > 0.0 {
            lo = hi;
        } else {
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if slope(mid) > 0.0 {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
        }
        if lo == 0.0 {
            return (q, iterations, residual);
        }
        for (a, b) in q.iter_mut().zip(&d) {
            *a += lo * b;
        }
        let s: f64 = q.iter().sum();
        q.iter_mut().for_each(|a| *a /= s);
    }
}

/// Maximizes `H(M^T || H^T) + gamma E[r]` over every history's simplex by
/// projected gradient ascent, one history at a time from the deepest level
/// up, so each history is optimized against already optimized descendants.
pub fn oracle_machine_opt(
    p: &dyn HumanModel,
    reward: &RewardFunction,
    gamma: f64,
    budget: &OracleBudget,
) -> Result<OracleOptimum, OracleError> {
    struct Sweep<'a> {
        p: &'a dyn HumanModel,
        reward: &'a RewardFunction,
        gamma: f64,
        budget: &'a OracleBudget,
        policy: HistoryPolicy,
        iterations: usize,
        residual: f64,
    }

    impl Sweep<'_> {
        /// Optimal value below history `(human, machine)`.
        fn solve(&mut self, human: &mut Vec<usize>, machine: &mut Vec<usize>) -> f64 {
            let spec = self.p.spec();
            if human.len() == spec.horizon {
                return self.gamma
                    * self.reward.eval(&Trajectory {
                        human: human.clone(),
                        machine: machine.clone(),
                    });
            }
            let mut w = vec![0.0; spec.machine_actions];
            let mut hp = vec![0.0; spec.human_actions];
            for (m, wm) in w.iter_mut().enumerate() {
                machine.push(m);
                self.p.human_conditional(human, machine, &mut hp);
                let probs = hp.clone();
                for (h, &ph) in probs.iter().enumerate() {
                    human.push(h);
                    let v = self.solve(human, machine);
                    human.pop();
                    if ph > 0.0 {
                        *wm += ph * v;
                    }
                }
                machine.pop();
            }
            let (q, iterations, residual) = solve_block(&w, self.budget);
            self.iterations += iterations;
            self.residual = self.residual.max(residual);
            let value = q
                .iter()
                .zip(&w)
                .map(|(&qm, &wm)| qm * (-qm.ln() + wm))
                .sum();
            self.policy
                .table
                .insert((human.clone(), machine.clone()), q);
            value
        }
    }

    let spec = p.spec();
    check_budget(&spec, budget)?;
    let mut sweep = Sweep {
        p,
        reward,
        gamma,
        budget,
        policy: HistoryPolicy::uniform(spec),
        iterations: 0,
        residual: 0.0,
    };
    sweep.solve(&mut Vec::new(), &mut Vec::new());
    if sweep.residual > budget.tolerance {
        return Err(OracleError::NotConverged {
            iterations: sweep.iterations,
            residual: sweep.residual,
        });
    }
    let objective = machine_objective(p, &sweep.policy, reward, gamma, budget)?;
    Ok(OracleOptimum {
        policy: sweep.policy,
        objective,
        iterations: sweep.iterations,
        residual: sweep.residual,
    })
}

/// `H(M^T || H^T) + gamma E[r]` for any policy, by enumeration.
pub fn machine_objective(
    p: &dyn HumanModel,
    q: &dyn MachinePolicy,
    reward: &RewardFunction,
    gamma: f64,
    budget: &OracleBudget,
) -> Result<f64, OracleError> {
    let entropy = causal_entropy(p, q, budget, false)?;
    let expected = expectation(p, q, budget, |t| reward.eval(t))?;
    Ok(entropy + gamma * expected)
}
