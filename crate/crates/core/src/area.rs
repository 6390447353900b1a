//! The alternating loop: acquire moments under the current policy, estimate
//! the human model, optimize the machine policy against it, repeat.
//!
//! From the second iteration on, the estimation carries one extra
//! inequality `E[-log Q_n + gamma r] >= log sum_{m_1} Y_n(m_1)`, built from
//! the current policy and the backward values that produced it. It keeps the
//! regularized reward `L` from decreasing between iterations.

use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::feature_moments_structured;
use crate::estimation::{estimate_human_from, DualVars, EstimationOptions, HumanEstimate, Status};
use crate::features::{
    AnchoredTerm, Constraint, ConstraintSet, Feature, FeatureForm, RewardFunction, StepTables,
};
use crate::lca::{empirical_moments, mix_seed, sample_interactions, LcaParams, SampleBatch};
use crate::machine::{backward_y_structured, extract_policy, regularized_reward, YTables};
use crate::process::{MachinePolicy, ProcessSpec};
use crate::structured::{StructuredHuman, StructuredPolicy};

/// Id of the step-dependent inequality inside the estimation problem.
pub const STEP_CONSTRAINT_ID: &str = "step-constraint";

/// Where the target moments come from at each iteration.
#[derive(Clone, Debug)]
pub enum MomentSource {
    /// Exact expectations under a known human model.
    Exact { reference: StructuredHuman },
    /// Sample means over fresh LCA interactions under the current policy.
    Sampled {
        params: LcaParams,
        per_iteration: usize,
        seed: u64,
    },
}

/// Moments and, for sampled sources, the batch they came from.
pub struct Acquired {
    pub moments: Vec<f64>,
    pub batch: Option<SampleBatch>,
}

impl MomentSource {
    pub fn acquire(
        &self,
        policy: &StructuredPolicy,
        constraints: &ConstraintSet,
        iteration: usize,
    ) -> Result<Acquired> {
        match self {
            MomentSource::Exact { reference } => Ok(Acquired {
                moments: feature_moments_structured(reference, policy, constraints)?,
                batch: None,
            }),
            MomentSource::Sampled {
                params,
                per_iteration,
                seed,
            } => {
                if *per_iteration == 0 {
                    return Err(Error::Invalid(
                        "sampled moments need at least one interaction".into(),
                    ));
                }
                let batch = sample_interactions(
                    policy,
                    params,
                    *per_iteration,
                    mix_seed(*seed, iteration as u64),
                    format!("iteration-{iteration}"),
                )?;
                Ok(Acquired {
                    moments: empirical_moments(&batch, constraints)?,
                    batch: Some(batch),
                })
            }
        }
    }
}

/// `g(h^T, m^T) = -log Q(m^T || h^T) + gamma r(h^T, m^T)` and its threshold.
#[derive(Clone, Debug)]
pub struct StepConstraint {
    pub feature: Feature,
    pub threshold: f64,
    /// Set when some policy entry is zero: those terms are dropped, which
    /// changes nothing on trajectories the policy can produce.
    pub restricted: bool,
}

/// Builds the step-dependent constraint for the policy extracted from `y`.
///
/// Off the policy tree `-log Q` is the per-step `-log Q_t(m)`, which goes into
/// the decomposable part with `gamma r^d`. Each tree node adds the difference
/// between its own table and the per-step one, anchored at that node, and the
/// reward's path parts enter scaled by `gamma`.
pub fn step_constraint(
    policy: &StructuredPolicy,
    y: &YTables,
    reward: &RewardFunction,
) -> Result<StepConstraint> {
    let spec = policy.spec();
    if y.spec != spec || reward.spec() != spec {
        return Err(Error::SpecMismatch(
            "step constraint inputs disagree on the spec".into(),
        ));
    }
    let gamma = y.gamma;
    let mut restricted = false;
    let mut nlq = |p: f64| {
        if p > 0.0 {
            -p.ln()
        } else {
            restricted = true;
            0.0
        }
    };
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    let mut values = Vec::with_capacity(spec.horizon * spec.pairs());
    for t in 1..=spec.horizon {
        let q = policy.off_path(t);
        for h in 0..nh {
            for m in 0..nm {
                values.push(nlq(q[m]) + gamma * reward.decomposable.get(t, h, m));
            }
        }
    }
    let decomposable = StepTables::from_values(spec, values)?;

    let tree = policy.tree();
    let mut anchored = Vec::new();
    for id in 0..tree.len() {
        let depth = tree.node(id).depth;
        if depth == spec.horizon {
            continue;
        }
        let node = policy.node_table(id);
        let off = policy.off_path(depth + 1);
        let diff: Vec<f64> = (0..nm).map(|m| nlq(node[m]) - nlq(off[m])).collect();
        if diff.iter().all(|&d| d == 0.0) {
            continue;
        }
        let (human, machine) = tree.history(id);
        let table = (0..spec.pairs())
            .map(|pair| diff[spec.unpair(pair).1])
            .collect();
        anchored.push(AnchoredTerm {
            human,
            machine,
            table,
            support: None,
        });
    }
    for mut term in reward.anchored_terms() {
        term.table.iter_mut().for_each(|v| *v *= gamma);
        anchored.push(term);
    }
    Ok(StepConstraint {
        feature: Feature {
            id: STEP_CONSTRAINT_ID.into(),
            form: FeatureForm::Composite {
                decomposable: Some(decomposable),
                anchored,
            },
            reward: false,
        },
        threshold: y.log_partition,
        restricted,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AreaOptions {
    pub gamma: f64,
    pub iterations: usize,
    pub estimation: EstimationOptions,
    pub step_constraint: bool,
    /// Start each dual solve from the previous iteration's multipliers.
    pub warm_start: bool,
    pub policy_tol: f64,
    pub l_tol: f64,
    /// Keep every iterate's policy in the trace.
    pub keep_policies: bool,
}

impl Default for AreaOptions {
    fn default() -> Self {
        AreaOptions {
            gamma: 1.0,
            iterations: 10,
            estimation: EstimationOptions::default(),
            step_constraint: true,
            warm_start: true,
            policy_tol: 1e-8,
            l_tol: 1e-6,
            keep_policies: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StepStatus {
    /// First iteration, or disabled.
    Inactive,
    Active,
    /// The estimation with the constraint failed and was redone without it.
    Dropped,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AreaRecord {
    pub iter: usize,
    /// `E_{P_n Q_n}[-log Q_n + gamma r]`.
    pub l: f64,
    pub entropy_machine: f64,
    pub expected_reward: f64,
    pub moment_residual_max: f64,
    /// Sup-norm change from this iteration's policy to the next one.
    pub policy_delta: f64,
    pub wall_ms: f64,
    pub estimation_status: Status,
    pub estimation_iterations: usize,
    pub step: StepStatus,
    pub step_threshold: Option<f64>,
    /// Mean reward of the sampled interactions, if any.
    pub sample_reward: Option<f64>,
    /// Mean realized `-log Q` of the sampled interactions, if any.
    pub sample_entropy: Option<f64>,
    pub sample_count: usize,
}

#[derive(Clone, Debug)]
pub struct AreaState {
    pub n: usize,
    pub policy: StructuredPolicy,
    pub human: Option<StructuredHuman>,
    pub y: Option<YTables>,
    lambda: Option<Vec<f64>>,
    pub history: Vec<AreaRecord>,
    pub converged_at: Option<usize>,
    stable_l: usize,
}

impl AreaState {
    /// Uniform starting policy.
    pub fn new(spec: ProcessSpec) -> Self {
        Self::from_policy(StructuredPolicy::uniform(spec))
    }

    pub fn from_policy(policy: StructuredPolicy) -> Self {
        AreaState {
            n: 0,
            policy,
            human: None,
            y: None,
            lambda: None,
            history: Vec::new(),
            converged_at: None,
            stable_l: 0,
        }
    }

    pub fn converged(&self) -> bool {
        self.converged_at.is_some()
    }
}

/// Realized reward and `-log Q` averaged over a batch.
pub fn batch_statistics(
    batch: &SampleBatch,
    policy: &dyn MachinePolicy,
    reward: &RewardFunction,
) -> (f64, f64) {
    let spec = batch.spec;
    let n = batch.len().max(1) as f64;
    let mut probs = vec![0.0; spec.machine_actions];
    let mut reward_sum = 0.0;
    let mut nll = 0.0;
    for traj in &batch.trajectories {
        reward_sum += reward.eval(traj);
        for t in 0..spec.horizon {
            policy.machine_conditional(&traj.human[..t], &traj.machine[..t], &mut probs);
            nll -= probs[traj.machine[t]].ln();
        }
    }
    (reward_sum / n, nll / n)
}

fn solve(
    policy: &StructuredPolicy,
    constraints: &ConstraintSet,
    start: Option<&[f64]>,
    opts: &EstimationOptions,
) -> Result<HumanEstimate> {
    let start = match start {
        Some(s) if s.len() == constraints.len() => DualVars::from_flat(constraints, s)?,
        _ => DualVars::zeros(constraints),
    };
    estimate_human_from(policy, constraints, &start, opts)
}

/// One iteration: moments under `Q_n`, then `P_n`, then `Q_{n+1}`.
pub fn area_step(
    state: &mut AreaState,
    constraints: &ConstraintSet,
    reward: &RewardFunction,
    source: &MomentSource,
    opts: &AreaOptions,
) -> Result<()> {
    let started = Instant::now();
    let spec = state.policy.spec();
    let acquired = source.acquire(&state.policy, constraints, state.n)?;
    let mut base = constraints.clone();
    base.set_targets(&acquired.moments);

    let step = match (&state.y, opts.step_constraint) {
        (Some(y), true) => Some(step_constraint(&state.policy, y, reward)?),
        _ => None,
    };
    let warm = if opts.warm_start {
        state.lambda.clone()
    } else {
        None
    };

    let mut step_status = StepStatus::Inactive;
    let mut estimate = None;
    if let Some(sc) = &step {
        let mut with_step = base.clone();
        with_step.inequality.push(Constraint {
            feature: sc.feature.clone(),
            target: sc.threshold,
        });
        let start = warm.as_ref().map(|w| {
            let mut s = w.clone();
            s.resize(with_step.len(), 0.0);
            s
        });
        let est = solve(
            &state.policy,
            &with_step,
            start.as_deref(),
            &opts.estimation,
        )?;
        let step_residual = (sc.threshold - est.moments[with_step.len() - 1]).max(0.0);
        if est.status == Status::Converged || step_residual <= opts.estimation.moment_tol {
            step_status = StepStatus::Active;
            estimate = Some(est);
        } else {
            step_status = StepStatus::Dropped;
        }
    }
    let estimate = match estimate {
        Some(e) => e,
        None => {
            let start = warm.as_ref().map(|w| w[..base.len().min(w.len())].to_vec());
            solve(&state.policy, &base, start.as_deref(), &opts.estimation)?
        }
    };

    let value = regularized_reward(&estimate.model, &state.policy, reward, opts.gamma)?;
    let y = backward_y_structured(&estimate.model, reward, opts.gamma)?;
    let next = extract_policy(&y)?
        .into_structured()
        .ok_or_else(|| Error::Invalid("structured values gave a dense policy".into()))?;
    let delta = next.sup_distance(&state.policy)?;
    let (sample_reward, sample_entropy, sample_count) = match &acquired.batch {
        Some(batch) => {
            let (r, h) = batch_statistics(batch, &state.policy, reward);
            (Some(r), Some(h), batch.len())
        }
        None => (None, None, 0),
    };

    if let Some(prev) = state.history.last() {
        if (value.value - prev.l).abs() <= opts.l_tol {
            state.stable_l += 1;
        } else {
            state.stable_l = 0;
        }
    }
    if state.converged_at.is_none() && (delta <= opts.policy_tol || state.stable_l >= 2) {
        state.converged_at = Some(state.n);
    }

    state.history.push(AreaRecord {
        iter: state.n,
        l: value.value,
        entropy_machine: value.machine_entropy,
        expected_reward: value.expected_reward,
        moment_residual_max: estimate.max_residual,
        policy_delta: delta,
        wall_ms: started.elapsed().as_secs_f64() * 1e3,
        estimation_status: estimate.status,
        estimation_iterations: estimate.iterations,
        step: step_status,
        step_threshold: step.as_ref().map(|s| s.threshold),
        sample_reward,
        sample_entropy,
        sample_count,
    });
    state.lambda = Some(estimate.lambda.flatten());
    state.human = Some(estimate.model);
    state.y = Some(y);
    state.policy = next;
    state.n += 1;
    debug_assert_eq!(state.policy.spec(), spec);
    Ok(())
}

#[derive(Clone, Debug)]
pub struct AreaTrace {
    pub records: Vec<AreaRecord>,
    pub converged_at: Option<usize>,
    /// `Q_0, Q_1, ...` when requested, else only the final policy.
    pub policies: Vec<StructuredPolicy>,
    pub final_human: Option<StructuredHuman>,
}

impl AreaTrace {
    pub fn final_policy(&self) -> &StructuredPolicy {
        self.policies.last().expect("a trace always holds a policy")
    }

    /// Columns `iter, L, entropy_machine, expected_reward,
    /// moment_residual_max, policy_delta, wall_ms`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "iter,L,entropy_machine,expected_reward,moment_residual_max,policy_delta,wall_ms"
        )?;
        for r in &self.records {
            writeln!(
                out,
                "{},{},{},{},{},{},{:.3}",
                r.iter,
                r.l,
                r.entropy_machine,
                r.expected_reward,
                r.moment_residual_max,
                r.policy_delta,
                r.wall_ms
            )?;
        }
        Ok(())
    }
}

/// Runs `opts.iterations` iterations from `initial`.
pub fn run_area(
    initial: StructuredPolicy,
    constraints: &ConstraintSet,
    reward: &RewardFunction,
    source: &MomentSource,
    opts: &AreaOptions,
) -> Result<AreaTrace> {
    let spec = initial.spec();
    constraints.validate(&spec)?;
    if reward.spec() != spec {
        return Err(Error::SpecMismatch("reward built for another spec".into()));
    }
    if let MomentSource::Exact { reference } = source {
        if reference.spec() != spec {
            return Err(Error::SpecMismatch(
                "reference human built for another spec".into(),
            ));
        }
    }
    opts.estimation.validate()?;
    let mut state = AreaState::from_policy(initial);
    let mut policies = vec![state.policy.clone()];
    for _ in 0..opts.iterations {
        area_step(&mut state, constraints, reward, source, opts)?;
        if opts.keep_policies {
            policies.push(state.policy.clone());
        }
    }
    if !opts.keep_policies && opts.iterations > 0 {
        policies = vec![state.policy.clone()];
    }
    Ok(AreaTrace {
        records: state.history,
        converged_at: state.converged_at,
        policies,
        final_human: state.human,
    })
}

/// A human model fitted to a large LCA sample taken under the uniform
/// policy. With decomposable features the fitted model does not depend on
/// the machine policy, so it serves as an exact moment source.
pub fn calibrated_reference(
    spec: ProcessSpec,
    constraints: &ConstraintSet,
    params: &LcaParams,
    samples: usize,
    seed: u64,
    opts: &EstimationOptions,
) -> Result<HumanEstimate> {
    let uniform = StructuredPolicy::uniform(spec);
    let batch = sample_interactions(&uniform, params, samples, seed, "uniform")?;
    let mut fitted = constraints.clone();
    fitted.set_targets(&empirical_moments(&batch, constraints)?);
    estimate_human_from(&uniform, &fitted, &DualVars::zeros(&fitted), opts)
}
