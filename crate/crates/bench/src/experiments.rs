//! The experiment pipelines behind the CLI: AREA runs, the convergence and
//! comparison studies, and the scaling benchmark.

use std::io::Write;
use std::time::Instant;

use anyhow::Context;
use area_core::area::{calibrated_reference, run_area, AreaTrace, MomentSource};
use area_core::estimation::{DualProblem, EstimationOptions, StructuredDual};
use area_core::features::{
    follow_feature, periodic_target_reward, weighted_follow_feature, Constraint, ConstraintSet,
    Feature,
};
use area_core::lca::mix_seed;
use area_core::machine::{backward_y_structured, extract_policy};
use area_core::process::{CausalTable, ProcessSpec, Side, Trajectory, DEFAULT_JOINT_CAP};
use area_core::qlearning::run_qlearning;
use area_core::structured::{StructuredHuman, StructuredPolicy};
use rayon::prelude::*;
use serde::Serialize;

use crate::config::{ExperimentConfig, MomentDecl, Problem};
use crate::stats::{log_log_slope, mean, std_dev, t_interval};

/// Stream ids for seeds derived from the master seed.
const REFERENCE_STREAM: u64 = 1;
const SAMPLING_STREAM: u64 = 2;
const QLEARNING_STREAM: u64 = 3;

/// Samples behind the reference model used by exact-moment runs, when the
/// config asks for sampled moments but an exact series is also wanted.
pub const DEFAULT_REFERENCE_SAMPLES: usize = 100_000;

/// Fits the reference human for exact moments. Tight tolerances, since its
/// moments are then treated as exact.
pub fn reference_model(
    config: &ExperimentConfig,
    problem: &Problem,
    samples: usize,
) -> anyhow::Result<StructuredHuman> {
    let opts = EstimationOptions {
        max_iters: 20_000,
        grad_tol: 1e-10,
        moment_tol: 1e-8,
        ..config.estimation.clone()
    };
    let est = calibrated_reference(
        problem.spec,
        &problem.constraints,
        &config.lca,
        samples,
        mix_seed(config.seed, REFERENCE_STREAM),
        &opts,
    )?;
    Ok(est.model)
}

pub fn moment_source(
    config: &ExperimentConfig,
    problem: &Problem,
    seed: u64,
) -> anyhow::Result<MomentSource> {
    Ok(match config.moments {
        MomentDecl::Exact { reference_samples } => MomentSource::Exact {
            reference: reference_model(config, problem, reference_samples)?,
        },
        MomentDecl::Sampled { per_iteration } => MomentSource::Sampled {
            params: config.lca.clone(),
            per_iteration,
            seed: mix_seed(seed, SAMPLING_STREAM),
        },
    })
}

/// One AREA run as the config declares it.
pub fn area_run(config: &ExperimentConfig, keep_policies: bool) -> anyhow::Result<AreaTrace> {
    let problem = config.problem()?;
    let source = moment_source(config, &problem, config.seed)?;
    let opts = area_core::area::AreaOptions {
        keep_policies,
        ..config.area_options()
    };
    Ok(run_area(
        StructuredPolicy::uniform(problem.spec),
        &problem.constraints,
        &problem.reward,
        &source,
        &opts,
    )?)
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceRow {
    /// `exact` or `n=<samples per iteration>`.
    pub series: String,
    pub seed: u64,
    pub iteration: usize,
    pub l: f64,
    pub policy_delta: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct ConvergenceSummary {
    pub series: String,
    /// Mean over seeds of the mean `|L_{n+1} - L_n|`.
    pub mean_abs_delta: f64,
    /// Mean over seeds of the standard deviation of `L` over iterations 3 onward.
    pub late_std: f64,
    /// Largest first iteration at which a seed's run was flagged converged.
    pub converged_by: Option<usize>,
    pub monotone: bool,
}

pub struct Convergence {
    pub rows: Vec<ConvergenceRow>,
    pub summary: Vec<ConvergenceSummary>,
}

/// L-series for exact moments and for each configured per-iteration sample
/// size, over `convergence.seeds` seeds.
pub fn reproduce_convergence(config: &ExperimentConfig) -> anyhow::Result<Convergence> {
    let problem = config.problem()?;
    let opts = config.area_options();
    let reference_samples = match config.moments {
        MomentDecl::Exact { reference_samples } => reference_samples,
        MomentDecl::Sampled { .. } => DEFAULT_REFERENCE_SAMPLES,
    };
    let reference = reference_model(config, &problem, reference_samples)?;
    let mut units: Vec<(String, u64, MomentSource)> = vec![(
        "exact".into(),
        config.seed,
        MomentSource::Exact {
            reference: reference.clone(),
        },
    )];
    for &n in &config.convergence.sample_sizes {
        for s in 0..config.convergence.seeds as u64 {
            let seed = mix_seed(config.seed, 100 + s);
            units.push((
                format!("n={n}"),
                seed,
                MomentSource::Sampled {
                    params: config.lca.clone(),
                    per_iteration: n,
                    seed: mix_seed(seed, SAMPLING_STREAM),
                },
            ));
        }
    }
    let traces: Vec<(String, u64, AreaTrace)> = units
        .into_par_iter()
        .map(|(series, seed, source)| {
            let initial = StructuredPolicy::uniform(problem.spec);
            run_area(
                initial,
                &problem.constraints,
                &problem.reward,
                &source,
                &opts,
            )
            .map(|t| (series, seed, t))
            .map_err(anyhow::Error::from)
        })
        .collect::<anyhow::Result<_>>()?;

    let mut rows = Vec::new();
    let mut names: Vec<String> = Vec::new();
    for (series, seed, trace) in &traces {
        if !names.contains(series) {
            names.push(series.clone());
        }
        for r in &trace.records {
            rows.push(ConvergenceRow {
                series: series.clone(),
                seed: *seed,
                iteration: r.iter,
                l: r.l,
                policy_delta: r.policy_delta,
            });
        }
    }
    let summary = names
        .into_iter()
        .map(|name| {
            let runs: Vec<&AreaTrace> = traces
                .iter()
                .filter(|(s, _, _)| *s == name)
                .map(|(_, _, t)| t)
                .collect();
            let deltas: Vec<f64> = runs
                .iter()
                .map(|t| {
                    let d: Vec<f64> = t
                        .records
                        .windows(2)
                        .map(|w| (w[1].l - w[0].l).abs())
                        .collect();
                    if d.is_empty() {
                        0.0
                    } else {
                        mean(&d)
                    }
                })
                .collect();
            let late: Vec<f64> = runs
                .iter()
                .map(|t| {
                    let ls: Vec<f64> = t.records.iter().skip(2).map(|r| r.l).collect();
                    std_dev(&ls)
                })
                .collect();
            let converged_by = runs
                .iter()
                .map(|t| t.converged_at)
                .try_fold(0usize, |acc, c| c.map(|c| acc.max(c)));
            let monotone = runs
                .iter()
                .all(|t| t.records.windows(2).all(|w| w[1].l - w[0].l >= -1e-8));
            ConvergenceSummary {
                series: name,
                mean_abs_delta: mean(&deltas),
                late_std: mean(&late),
                converged_by,
                monotone,
            }
        })
        .collect();
    Ok(Convergence { rows, summary })
}

#[derive(Clone, Debug, Serialize)]
pub struct ComparisonRow {
    pub samples_observed: usize,
    pub method: String,
    pub avg_reward: f64,
    pub entropy: f64,
    pub ci90_low: f64,
    pub ci90_high: f64,
    pub entropy_ci90_low: f64,
    pub entropy_ci90_high: f64,
}

/// Cumulative averages of one round at each checkpoint.
struct Curve {
    reward: Vec<f64>,
    entropy: Vec<f64>,
}

/// AREA with `per_iteration` fresh samples per iteration against Q-learning
/// over the same number of episodes, `rounds` times. Checkpoints fall after
/// every AREA iteration; both curves report running means of realized reward
/// and realized `-log Q` over all interactions so far.
pub fn reproduce_comparison(config: &ExperimentConfig) -> anyhow::Result<Vec<ComparisonRow>> {
    let problem = config.problem()?;
    let per_iteration = match config.moments {
        MomentDecl::Sampled { per_iteration } => per_iteration,
        MomentDecl::Exact { .. } => {
            anyhow::bail!("at `moments`: the comparison needs sampled moments")
        }
    };
    let episodes = config.qlearning.episodes;
    let checkpoints = episodes / per_iteration;
    if checkpoints == 0 {
        anyhow::bail!("at `qlearning.episodes`: fewer episodes than samples per iteration");
    }
    let opts = area_core::area::AreaOptions {
        iterations: checkpoints,
        ..config.area_options()
    };
    let rounds: Vec<(Curve, Curve)> = (0..config.rounds as u64)
        .into_par_iter()
        .map(|round| {
            let seed = mix_seed(config.seed, 1000 + round);
            let source = MomentSource::Sampled {
                params: config.lca.clone(),
                per_iteration,
                seed: mix_seed(seed, SAMPLING_STREAM),
            };
            let trace = run_area(
                StructuredPolicy::uniform(problem.spec),
                &problem.constraints,
                &problem.reward,
                &source,
                &opts,
            )?;
            let mut area = Curve {
                reward: Vec::new(),
                entropy: Vec::new(),
            };
            let (mut r, mut h, mut n) = (0.0, 0.0, 0usize);
            for rec in &trace.records {
                let k = rec.sample_count;
                r += rec
                    .sample_reward
                    .context("sampled run without sample statistics")?
                    * k as f64;
                h += rec
                    .sample_entropy
                    .context("sampled run without sample statistics")?
                    * k as f64;
                n += k;
                area.reward.push(r / n as f64);
                area.entropy.push(h / n as f64);
            }
            let ql = run_qlearning(
                problem.spec,
                &problem.reward,
                &config.lca,
                &config.qlearning.params,
                episodes,
                mix_seed(seed, QLEARNING_STREAM),
            )?;
            let mut baseline = Curve {
                reward: Vec::new(),
                entropy: Vec::new(),
            };
            for c in 1..=checkpoints {
                let row = &ql.rows[c * per_iteration - 1];
                baseline.reward.push(row.avg_reward);
                baseline.entropy.push(row.entropy_estimate);
            }
            Ok((area, baseline))
        })
        .collect::<anyhow::Result<_>>()?;

    let uniform_entropy = problem.spec.horizon as f64 * (problem.spec.machine_actions as f64).ln();
    let mut rows = Vec::new();
    for method in ["area", "qlearning"] {
        rows.push(ComparisonRow {
            samples_observed: 0,
            method: method.into(),
            avg_reward: f64::NAN,
            entropy: uniform_entropy,
            ci90_low: f64::NAN,
            ci90_high: f64::NAN,
            entropy_ci90_low: uniform_entropy,
            entropy_ci90_high: uniform_entropy,
        });
    }
    for c in 0..checkpoints {
        for (method, pick) in [("area", 0usize), ("qlearning", 1)] {
            let curves = rounds
                .iter()
                .map(|pair| if pick == 0 { &pair.0 } else { &pair.1 });
            let rewards: Vec<f64> = curves.clone().map(|cv| cv.reward[c]).collect();
            let entropies: Vec<f64> = curves.map(|cv| cv.entropy[c]).collect();
            let (lo, hi) = t_interval(&rewards, 0.9);
            let (elo, ehi) = t_interval(&entropies, 0.9);
            rows.push(ComparisonRow {
                samples_observed: (c + 1) * per_iteration,
                method: method.into(),
                avg_reward: mean(&rewards),
                entropy: mean(&entropies),
                ci90_low: lo,
                ci90_high: hi,
                entropy_ci90_low: elo,
                entropy_ci90_high: ehi,
            });
        }
    }
    Ok(rows)
}

#[derive(Clone, Debug, Serialize)]
pub struct ScalingRow {
    pub features: String,
    pub horizon: usize,
    pub dual_update_ms: f64,
    pub machine_opt_ms: f64,
    pub peak_model_entries: usize,
}

pub struct Scaling {
    pub rows: Vec<ScalingRow>,
    /// Fitted log-log exponent of dual-update time, per feature set.
    pub exponents: Vec<(String, f64)>,
    /// The dense path refused `T = 10` at `3 x 3`.
    pub dense_refused: bool,
}

pub const SCALING_HORIZONS: [usize; 4] = [10, 20, 40, 80];

fn scaling_constraints(spec: ProcessSpec, hybrid: bool) -> ConstraintSet {
    let reward = periodic_target_reward(spec, 5, 0);
    let mut features = vec![
        reward.as_feature("r"),
        follow_feature(spec, "follow"),
        weighted_follow_feature(spec, "weighted-follow", 5, 0.25),
    ];
    if hybrid {
        let t = spec.horizon;
        let path = Trajectory::new(&spec, (0..t).map(|i| i % 3).collect(), vec![0; t])
            .expect("valid path");
        features.push(Feature::path_based(&spec, "path", path, 1.0).expect("valid path feature"));
    }
    let equality = features
        .into_iter()
        .map(|feature| Constraint {
            feature,
            target: 0.0,
        })
        .collect();
    ConstraintSet::build(equality, vec![]).expect("valid constraints")
}

/// Median wall time of `f` in milliseconds. Each sample repeats `f` enough
/// times to last about a millisecond, so short calls are not lost in timer
/// noise.
fn median_ms(mut f: impl FnMut(), reps: usize) -> f64 {
    let start = Instant::now();
    f();
    let once = start.elapsed().as_secs_f64().max(1e-9);
    let inner = ((1e-3 / once).ceil() as usize).clamp(1, 100_000);
    let mut times: Vec<f64> = (0..reps)
        .map(|_| {
            let start = Instant::now();
            for _ in 0..inner {
                f();
            }
            start.elapsed().as_secs_f64() * 1e3 / inner as f64
        })
        .collect();
    times.sort_by(f64::total_cmp);
    times[reps / 2]
}

/// Times one dual evaluation (model recursion plus moments) and one machine
/// optimization at `|H| = |M| = 3` for each horizon, with decomposable and
/// with hybrid (one extra path feature) feature sets.
pub fn bench_scaling(reps: usize) -> anyhow::Result<Scaling> {
    let reps = reps.max(1);
    let mut rows = Vec::new();
    let mut exponents = Vec::new();
    for hybrid in [false, true] {
        let name = if hybrid { "hybrid" } else { "decomposable" };
        let mut times = Vec::new();
        for &t in &SCALING_HORIZONS {
            let spec = ProcessSpec::new(t, 3, 3)?;
            let c = scaling_constraints(spec, hybrid);
            let policy = StructuredPolicy::uniform(spec);
            let problem = StructuredDual::new(&policy, &c)?;
            let lambda: Vec<f64> = (0..c.len()).map(|i| 0.3 - 0.1 * i as f64).collect();
            let dual_ms = median_ms(
                || {
                    problem.evaluate(&lambda).expect("dual evaluation");
                },
                reps,
            );
            let (model, _) = problem.model(&lambda)?;
            let reward = periodic_target_reward(spec, 5, 0);
            let opt_ms = median_ms(
                || {
                    let y = backward_y_structured(&model, &reward, 4.0).expect("backward values");
                    extract_policy(&y).expect("policy");
                },
                reps,
            );
            times.push(dual_ms);
            rows.push(ScalingRow {
                features: name.into(),
                horizon: t,
                dual_update_ms: dual_ms,
                machine_opt_ms: opt_ms,
                peak_model_entries: model.storage_entries(),
            });
        }
        let x: Vec<f64> = SCALING_HORIZONS.iter().map(|&t| t as f64).collect();
        exponents.push((name.to_string(), log_log_slope(&x, &times)));
    }
    let dense_refused = matches!(
        CausalTable::uniform(ProcessSpec::new(10, 3, 3)?, Side::Human, DEFAULT_JOINT_CAP),
        Err(area_core::Error::CapExceeded { .. })
    );
    Ok(Scaling {
        rows,
        exponents,
        dense_refused,
    })
}

/// Writes serializable rows as CSV with the given header; floats that are
/// NaN become empty fields.
pub fn write_rows<W: Write>(
    mut out: W,
    header: &[&str],
    rows: impl IntoIterator<Item = Vec<String>>,
) -> std::io::Result<()> {
    writeln!(out, "{}", header.join(","))?;
    for r in rows {
        writeln!(out, "{}", r.join(","))?;
    }
    Ok(())
}

pub fn num(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        x.to_string()
    }
}
