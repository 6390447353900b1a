//! Maximum-causal-entropy estimation of the human model through its dual.
//!
//! Equality constraints read `E[f] = c_f`; inequality constraints read
//! `E[g] >= c_g` and carry multipliers `lambda_g >= 0`. Both enter the Gibbs
//! exponent with a positive sign, the dual `log Z_lambda - lambda . c` is
//! convex, and its gradient is `E_{P_lambda Q}[f] - c`.

pub mod dense;
pub mod structured;

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ConstraintSet;
use crate::structured::{causal_entropies, occupancy, StructuredHuman, StructuredPolicy};

pub use dense::{
    backward_z_dense, dual_gradient_dense, dual_objective_dense, feature_moments_dense, DenseDual,
    DenseGibbs,
};
pub use structured::{
    backward_z_structured, dual_gradient, dual_objective, feature_moments_structured,
    StructuredDual,
};

/// Multipliers for the equality and inequality constraints, in the order of
/// [`ConstraintSet::iter`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DualVars {
    pub lambda_f: Vec<f64>,
    pub lambda_g: Vec<f64>,
}

impl DualVars {
    pub fn zeros(c: &ConstraintSet) -> Self {
        DualVars {
            lambda_f: vec![0.0; c.equality.len()],
            lambda_g: vec![0.0; c.inequality.len()],
        }
    }

    pub fn from_flat(c: &ConstraintSet, flat: &[f64]) -> Result<Self> {
        if flat.len() != c.len() {
            return Err(Error::Shape(format!(
                "{} multipliers for {} constraints",
                flat.len(),
                c.len()
            )));
        }
        let (f, g) = flat.split_at(c.equality.len());
        let vars = DualVars {
            lambda_f: f.to_vec(),
            lambda_g: g.to_vec(),
        };
        vars.validate(c)?;
        Ok(vars)
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.lambda_f
            .iter()
            .chain(&self.lambda_g)
            .copied()
            .collect()
    }

    pub fn validate(&self, c: &ConstraintSet) -> Result<()> {
        if self.lambda_f.len() != c.equality.len() || self.lambda_g.len() != c.inequality.len() {
            return Err(Error::Shape(format!(
                "multipliers ({}, {}) for constraints ({}, {})",
                self.lambda_f.len(),
                self.lambda_g.len(),
                c.equality.len(),
                c.inequality.len()
            )));
        }
        if self
            .lambda_f
            .iter()
            .chain(&self.lambda_g)
            .any(|l| !l.is_finite())
        {
            return Err(Error::NonFinite("dual variables".into()));
        }
        if self.lambda_g.iter().any(|&l| l < 0.0) {
            return Err(Error::Invalid(
                "inequality multipliers must be nonnegative".into(),
            ));
        }
        Ok(())
    }
}

/// Dual value, feature moments and Gibbs model at one multiplier vector.
#[derive(Clone, Debug)]
pub struct DualEval<M> {
    pub objective: f64,
    pub moments: Vec<f64>,
    pub model: M,
}

impl<M> DualEval<M> {
    pub fn gradient(&self, targets: &[f64]) -> Vec<f64> {
        self.moments
            .iter()
            .zip(targets)
            .map(|(m, c)| m - c)
            .collect()
    }
}

/// A dual problem whose first `n_equality` coordinates are free and whose
/// remaining coordinates are constrained to be nonnegative.
pub trait DualProblem {
    type Model;
    fn n_equality(&self) -> usize;
    fn targets(&self) -> &[f64];
    fn evaluate(&self, lambda: &[f64]) -> Result<DualEval<Self::Model>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Schedule {
    /// `eta_n = eta_0`.
    Constant,
    /// `eta_n = eta_0 / sqrt(n)`.
    InverseSqrt,
    /// Barzilai-Borwein steps with a nonmonotone backtracking line search.
    Adaptive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EstimationOptions {
    pub learning_rate: f64,
    pub schedule: Schedule,
    pub max_iters: usize,
    pub grad_tol: f64,
    pub moment_tol: f64,
    /// `||lambda||_inf` beyond which the moments are deemed infeasible.
    pub divergence_bound: f64,
    pub record_trace: bool,
}

impl Default for EstimationOptions {
    fn default() -> Self {
        EstimationOptions {
            learning_rate: 0.5,
            schedule: Schedule::Adaptive,
            max_iters: 5000,
            grad_tol: 1e-5,
            moment_tol: 1e-4,
            divergence_bound: 1e4,
            record_trace: false,
        }
    }
}

impl EstimationOptions {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            self.learning_rate,
            self.grad_tol,
            self.moment_tol,
            self.divergence_bound,
        ];
        if positive.iter().any(|v| !(v.is_finite() && *v > 0.0)) || self.max_iters == 0 {
            return Err(Error::Invalid(
                "estimation options must all be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Status {
    Converged,
    MaxIters,
    /// The line search could not make progress.
    Stalled,
    /// The multipliers grew past the divergence bound.
    Divergent,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective: f64,
    pub grad_norm: f64,
    pub residuals: Vec<f64>,
}

pub fn write_trace_csv<W: Write>(rows: &[TraceRow], mut out: W) -> std::io::Result<()> {
    let width = rows.first().map_or(0, |r| r.residuals.len());
    write!(out, "iteration,objective,grad_norm")?;
    for i in 0..width {
        write!(out, ",residual_{i}")?;
    }
    writeln!(out)?;
    for r in rows {
        write!(out, "{},{},{}", r.iteration, r.objective, r.grad_norm)?;
        for x in &r.residuals {
            write!(out, ",{x}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct DualSolution<M> {
    pub lambda: Vec<f64>,
    pub eval: DualEval<M>,
    pub status: Status,
    pub iterations: usize,
    pub grad_norm: f64,
    /// Equality `|E f - c|` and inequality `max(0, c - E g)`.
    pub residuals: Vec<f64>,
    pub trace: Vec<TraceRow>,
}

impl<M> DualSolution<M> {
    pub fn max_residual(&self) -> f64 {
        self.residuals.iter().fold(0.0, |a, &b| a.max(b))
    }

    pub fn converged(&self) -> bool {
        self.status == Status::Converged
    }
}

fn residuals(grad: &[f64], n_eq: usize) -> Vec<f64> {
    grad.iter()
        .enumerate()
        .map(|(i, &g)| if i < n_eq { g.abs() } else { (-g).max(0.0) })
        .collect()
}

fn project(lambda: &mut [f64], n_eq: usize) {
    for l in &mut lambda[n_eq..] {
        *l = l.max(0.0);
    }
}

/// `||lambda - proj(lambda - grad)||_inf`.
fn projected_grad_norm(lambda: &[f64], grad: &[f64], n_eq: usize) -> f64 {
    lambda
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(i, (&l, &g))| {
            if i < n_eq {
                g.abs()
            } else {
                (l - (l - g).max(0.0)).abs()
            }
        })
        .fold(0.0, f64::max)
}

const NONMONOTONE_WINDOW: usize = 10;
const ARMIJO: f64 = 1e-4;
const STEP_MIN: f64 = 1e-12;
const STEP_MAX: f64 = 1e12;

/// Projected descent on the dual starting from `lambda0`.
///
/// On any status other than [`Status::Converged`] the returned iterate is the
/// one with the smallest projected gradient seen.
pub fn solve_dual_from<P: DualProblem>(
    problem: &P,
    lambda0: &[f64],
    opts: &EstimationOptions,
) -> Result<DualSolution<P::Model>> {
    opts.validate()?;
    let n_eq = problem.n_equality();
    let targets = problem.targets().to_vec();
    if lambda0.len() != targets.len() {
        return Err(Error::Shape(format!(
            "{} multipliers for {} constraints",
            lambda0.len(),
            targets.len()
        )));
    }
    let mut x = lambda0.to_vec();
    project(&mut x, n_eq);
    let mut eval = problem.evaluate(&x)?;
    let mut grad = eval.gradient(&targets);
    let mut trace = Vec::new();
    let mut history = vec![eval.objective];

    let mut best: Option<(f64, Vec<f64>, DualEval<P::Model>)> = None;
    let mut alpha = {
        let g = grad.iter().fold(0.0f64, |a, b| a.max(b.abs()));
        if g > 0.0 {
            (opts.learning_rate / g).clamp(STEP_MIN, STEP_MAX)
        } else {
            opts.learning_rate
        }
    };
    let mut status = Status::MaxIters;
    let mut iterations = 0;

    loop {
        let pg = projected_grad_norm(&x, &grad, n_eq);
        if opts.record_trace {
            trace.push(TraceRow {
                iteration: iterations,
                objective: eval.objective,
                grad_norm: pg,
                residuals: residuals(&grad, n_eq),
            });
        }
        if pg <= opts.grad_tol {
            status = Status::Converged;
            break;
        }
        if x.iter().any(|l| l.abs() > opts.divergence_bound) {
            status = Status::Divergent;
            break;
        }
        if iterations >= opts.max_iters {
            break;
        }
        iterations += 1;

        let (next_x, next_eval) = match opts.schedule {
            Schedule::Constant | Schedule::InverseSqrt => {
                let eta = match opts.schedule {
                    Schedule::Constant => opts.learning_rate,
                    _ => opts.learning_rate / (iterations as f64).sqrt(),
                };
                let mut y: Vec<f64> = x.iter().zip(&grad).map(|(l, g)| l - eta * g).collect();
                project(&mut y, n_eq);
                let e = problem.evaluate(&y)?;
                (y, e)
            }
            Schedule::Adaptive => {
                let mut target: Vec<f64> =
                    x.iter().zip(&grad).map(|(l, g)| l - alpha * g).collect();
                project(&mut target, n_eq);
                let d: Vec<f64> = target.iter().zip(&x).map(|(a, b)| a - b).collect();
                let slope: f64 = d.iter().zip(&grad).map(|(a, b)| a * b).sum();
                let reference = history
                    .iter()
                    .rev()
                    .take(NONMONOTONE_WINDOW)
                    .fold(f64::MIN, |a, &b| a.max(b));
                let slack = 1e-14 * reference.abs().max(1.0);
                let mut s = 1.0;
                let mut accepted = None;
                for _ in 0..60 {
                    let y: Vec<f64> = x.iter().zip(&d).map(|(a, b)| a + s * b).collect();
                    let e = problem.evaluate(&y)?;
                    if e.objective <= reference + ARMIJO * s * slope + slack {
                        accepted = Some((y, e));
                        break;
                    }
                    s *= 0.5;
                }
                match accepted {
                    Some(v) => v,
                    None => {
                        status = Status::Stalled;
                        break;
                    }
                }
            }
        };

        let next_grad = next_eval.gradient(&targets);
        if opts.schedule == Schedule::Adaptive {
            let s: Vec<f64> = next_x.iter().zip(&x).map(|(a, b)| a - b).collect();
            let y: Vec<f64> = next_grad.iter().zip(&grad).map(|(a, b)| a - b).collect();
            let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
            let ss: f64 = s.iter().map(|a| a * a).sum();
            alpha = if sy > 0.0 {
                (ss / sy).clamp(STEP_MIN, STEP_MAX)
            } else {
                STEP_MAX.min(alpha * 10.0)
            };
        }
        let pg_old = projected_grad_norm(&x, &grad, n_eq);
        if best.as_ref().is_none_or(|(b, _, _)| pg_old < *b) {
            best = Some((pg_old, x, eval));
        }
        x = next_x;
        eval = next_eval;
        grad = next_grad;
        history.push(eval.objective);
    }

    if status != Status::Converged {
        let pg = projected_grad_norm(&x, &grad, n_eq);
        if let Some((b, bx, be)) = best {
            if b < pg {
                x = bx;
                eval = be;
                grad = eval.gradient(&targets);
            }
        }
    }
    let grad_norm = projected_grad_norm(&x, &grad, n_eq);
    Ok(DualSolution {
        residuals: residuals(&grad, n_eq),
        lambda: x,
        eval,
        status,
        iterations,
        grad_norm,
        trace,
    })
}

/// Projected descent on the dual from `lambda = 0`.
pub fn solve_dual<P: DualProblem>(
    problem: &P,
    opts: &EstimationOptions,
) -> Result<DualSolution<P::Model>> {
    let zeros = vec![0.0; problem.targets().len()];
    solve_dual_from(problem, &zeros, opts)
}

/// The estimated human model and diagnostics.
#[derive(Clone, Debug)]
pub struct HumanEstimate {
    pub lambda: DualVars,
    pub model: StructuredHuman,
    pub status: Status,
    pub iterations: usize,
    pub dual_objective: f64,
    pub moments: Vec<f64>,
    pub max_residual: f64,
    /// Causal entropy of the estimate under the policy it was fitted against.
    pub entropy: f64,
    /// Dual value minus the estimate's causal entropy.
    pub duality_gap: f64,
    pub trace: Vec<TraceRow>,
}

/// The maximum-causal-entropy human model for `policy` and `constraints`.
pub fn estimate_human(
    policy: &StructuredPolicy,
    constraints: &ConstraintSet,
    opts: &EstimationOptions,
) -> Result<HumanEstimate> {
    estimate_human_from(policy, constraints, &DualVars::zeros(constraints), opts)
}

/// As [`estimate_human`], starting the dual ascent at `start`.
pub fn estimate_human_from(
    policy: &StructuredPolicy,
    constraints: &ConstraintSet,
    start: &DualVars,
    opts: &EstimationOptions,
) -> Result<HumanEstimate> {
    start.validate(constraints)?;
    let problem = StructuredDual::new(policy, constraints)?;
    let sol = solve_dual_from(&problem, &start.flatten(), opts)?;
    let occ = occupancy(&sol.eval.model, problem.policy())?;
    let (entropy, _) = causal_entropies(&sol.eval.model, problem.policy(), &occ);
    Ok(HumanEstimate {
        lambda: DualVars::from_flat(constraints, &sol.lambda)?,
        status: sol.status,
        iterations: sol.iterations,
        dual_objective: sol.eval.objective,
        moments: sol.eval.moments.clone(),
        max_residual: sol.max_residual(),
        entropy,
        duality_gap: sol.eval.objective - entropy,
        model: sol.eval.model,
        trace: sol.trace,
    })
}
