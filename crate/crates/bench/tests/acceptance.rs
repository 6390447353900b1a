//! Acceptance suite: one PASS/FAIL line per criterion, in order. Runs
//! without the libtest harness so the lines come out sequentially; the
//! process exits nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::{Duration, Instant};

use area_bench::config::{ExperimentConfig, MomentDecl};
use area_bench::experiments::{
    bench_scaling, reference_model, reproduce_comparison, reproduce_convergence,
};
use area_core::area::{run_area, AreaOptions, MomentSource};
use area_core::estimation::{
    backward_z_dense, backward_z_structured, dual_gradient, dual_objective,
    feature_moments_structured, solve_dual, DualVars, EstimationOptions, StructuredDual,
};
use area_core::features::{prefix_features, Constraint, ConstraintSet, Feature, RewardFunction};
use area_core::lca::{lca_choose, lca_step, sample_interactions, LcaParams};
use area_core::machine::{
    backward_y_dense, backward_y_structured, decomposable_policy, extract_policy,
};
use area_core::process::{CausalTable, ProcessSpec, DEFAULT_JOINT_CAP};
use area_core::structured::{StructuredHuman, StructuredPolicy};
use area_oracle::{instances, OracleBudget};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CAP: u64 = DEFAULT_JOINT_CAP;
const CONVERGENCE: &str = include_str!("../configs/convergence.json");
const COMPARISON: &str = include_str!("../configs/comparison.json");

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn sup(a: &CausalTable, b: &CausalTable) -> f64 {
    a.steps()
        .iter()
        .flatten()
        .zip(b.steps().iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// The prefix-feature fixed point is only visible once the dual is solved to
/// near machine precision; looser solves leave ~1e-8 noise in the policy.
fn precise() -> EstimationOptions {
    EstimationOptions {
        max_iters: 500_000,
        grad_tol: 1e-13,
        moment_tol: 1e-12,
        ..EstimationOptions::default()
    }
}

fn gamma_for(seed: u64) -> f64 {
    [0.5, 1.0, 2.0, 4.0][seed as usize % 4]
}

fn tight() -> EstimationOptions {
    EstimationOptions {
        max_iters: 50_000,
        grad_tol: 1e-11,
        moment_tol: 1e-9,
        ..EstimationOptions::default()
    }
}

fn equivalence() -> Outcome {
    let start = Instant::now();
    let (mut worst_z, mut worst_y) = (0.0f64, 0.0f64);
    for seed in 0..100 {
        let mut rng = instances::rng(100_000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 2, 1, 1);
        let lambda = DualVars::from_flat(&c, &instances::lambda(&mut rng, &c, 1.5))
            .map_err(|e| e.to_string())?;
        let q = CausalTable::from_machine(&policy, CAP).map_err(|e| e.to_string())?;
        let dense = backward_z_dense(&q, &lambda, &c, CAP).map_err(|e| e.to_string())?;
        let structured = backward_z_structured(&policy, &lambda, &c).map_err(|e| e.to_string())?;
        worst_z = worst_z.max(sup(
            &dense.model,
            &CausalTable::from_human(&structured, CAP).unwrap(),
        ));

        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 2);
        let gamma = gamma_for(seed);
        let yd = backward_y_dense(
            &CausalTable::from_human(&human, CAP).unwrap(),
            &reward,
            gamma,
            CAP,
        )
        .unwrap();
        let ys = backward_y_structured(&human, &reward, gamma).unwrap();
        let qd = extract_policy(&yd).unwrap().into_dense().unwrap();
        let qs = extract_policy(&ys).unwrap().into_structured().unwrap();
        worst_y = worst_y.max(sup(&qd, &CausalTable::from_machine(&qs, CAP).unwrap()));
    }
    let elapsed = start.elapsed();
    check(
        worst_z <= 1e-9 && worst_y <= 1e-9 && elapsed < Duration::from_secs(60),
        format!("100 instances; max sup diff human {worst_z:.1e}, machine {worst_y:.1e} (tol 1e-9); {elapsed:.2?} (limit 60 s)"),
    )
}

fn gradient() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..50 {
        let mut rng = instances::rng(200_000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 1, 1, 1);
        let mut flat = instances::lambda(&mut rng, &c, 1.0);
        for l in flat.iter_mut().skip(c.equality.len()) {
            *l += 0.1;
        }
        let grad = dual_gradient(&policy, &DualVars::from_flat(&c, &flat).unwrap(), &c).unwrap();
        let h = 1e-5;
        for i in 0..flat.len() {
            let (mut plus, mut minus) = (flat.clone(), flat.clone());
            plus[i] += h;
            minus[i] -= h;
            let fp = dual_objective(&policy, &DualVars::from_flat(&c, &plus).unwrap(), &c).unwrap();
            let fm =
                dual_objective(&policy, &DualVars::from_flat(&c, &minus).unwrap(), &c).unwrap();
            let err = ((fp - fm) / (2.0 * h) - grad[i]).abs() / 1e-6f64.max(1e-4 * grad[i].abs());
            worst = worst.max(err);
        }
    }
    check(
        worst <= 1.0,
        format!("50 instances; worst error / tolerance {worst:.3} (must be <= 1)"),
    )
}

fn planted() -> Outcome {
    let budget = OracleBudget::default();
    let (mut worst_res, mut worst_gap, mut worst_iters) = (0.0f64, 0.0f64, 0usize);
    for seed in 0..10 {
        let mut rng = instances::rng(300_000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let policy = instances::policy(&mut rng, &spec, 1);
        let mut c = instances::constraints(&mut rng, &spec, 2, 1, 1, 0);
        let star = instances::lambda(&mut rng, &c, 1.0);
        let model =
            backward_z_structured(&policy, &DualVars::from_flat(&c, &star).unwrap(), &c).unwrap();
        let moments = feature_moments_structured(&model, &policy, &c).unwrap();
        c.set_targets(&moments);
        let sol = solve_dual(
            &StructuredDual::new(&policy, &c).unwrap(),
            &EstimationOptions::default(),
        )
        .unwrap();
        if !sol.converged() {
            return Err(format!("seed {seed} ended {:?}", sol.status));
        }
        let gap =
            area_oracle::duality_gap(&policy, &c, &sol.lambda, &sol.eval.model, &budget).unwrap();
        worst_res = worst_res.max(sol.max_residual());
        worst_gap = worst_gap.max(gap.abs());
        worst_iters = worst_iters.max(sol.iterations);
    }
    check(
        worst_res <= 1e-4 && worst_gap <= 1e-4 && worst_iters <= 5000,
        format!("10 instances; max residual {worst_res:.1e}, max |gap| {worst_gap:.1e} (tol 1e-4), max {worst_iters} iterations (limit 5000)"),
    )
}

fn machine_optimality() -> Outcome {
    let budget = OracleBudget::default();
    let mut worst = 0.0f64;
    for seed in 0..12 {
        let mut rng = instances::rng(400_000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 1);
        let reward = instances::reward(&mut rng, &spec, 1);
        let gamma = gamma_for(seed);
        let q = extract_policy(&backward_y_structured(&human, &reward, gamma).unwrap()).unwrap();
        let ours = area_oracle::machine_objective(&human, &q, &reward, gamma, &budget).unwrap();
        let oracle = area_oracle::oracle_machine_opt(&human, &reward, gamma, &budget)
            .map_err(|e| format!("{e:?}"))?;
        worst = worst.max((oracle.objective - ours).abs());
    }

    let mut uniform = true;
    for seed in 0..10 {
        let mut rng = instances::rng(410_000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 2);
        let q = extract_policy(&backward_y_structured(&human, &reward, 0.0).unwrap()).unwrap();
        let dense = CausalTable::from_machine(&q.into_structured().unwrap(), CAP).unwrap();
        let p = 1.0 / spec.machine_actions as f64;
        uniform &= dense.steps().iter().flatten().all(|&x| x == p);
    }

    let mut closed = 0.0f64;
    for seed in 0..20 {
        let mut rng = instances::rng(420_000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let human = instances::markov_human(&mut rng, &spec);
        let reward = RewardFunction::decomposable(instances::step_tables(&mut rng, &spec, 1.0));
        let gamma = gamma_for(seed);
        let form = decomposable_policy(&human, &reward, gamma).unwrap();
        let q = extract_policy(&backward_y_structured(&human, &reward, gamma).unwrap())
            .unwrap()
            .into_structured()
            .unwrap();
        let dense = CausalTable::from_machine(&q, CAP).unwrap();
        for (k, step) in dense.steps().iter().enumerate() {
            for block in step.chunks(spec.machine_actions) {
                for (a, b) in block.iter().zip(&form[k]) {
                    closed = closed.max((a - b).abs());
                }
            }
        }
    }
    check(
        worst <= 1e-6 && uniform && closed <= 1e-9,
        format!("oracle gap {worst:.1e} (tol 1e-6); zero-weight policies exactly uniform: {uniform}; closed form diff {closed:.1e} (tol 1e-9)"),
    )
}

fn log_partition_identity() -> Outcome {
    let budget = OracleBudget::default();
    let mut worst = 0.0f64;
    for seed in 0..20 {
        let mut rng = instances::rng(500_000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 1);
        let gamma = gamma_for(seed);
        let y = backward_y_structured(&human, &reward, gamma).unwrap();
        let q = extract_policy(&y).unwrap();
        let exact = area_oracle::machine_objective(&human, &q, &reward, gamma, &budget).unwrap();
        worst = worst.max((y.log_partition - exact).abs());
    }
    check(
        worst <= 1e-9,
        format!("20 instances; max |log partition - E[-log Q + gamma r]| {worst:.1e} (tol 1e-9)"),
    )
}

fn planted_config(seed: u64) -> (StructuredHuman, ConstraintSet, RewardFunction, f64) {
    let mut rng = instances::rng(600_000 + seed);
    let spec = instances::spec(&mut rng, 4, 3);
    let reward = RewardFunction::decomposable(instances::step_tables(&mut rng, &spec, 1.0));
    let mut equality = vec![Constraint {
        feature: reward.as_feature("r"),
        target: 0.0,
    }];
    for i in 0..2 {
        equality.push(Constraint {
            feature: Feature::decomposable(
                format!("d{i}"),
                instances::step_tables(&mut rng, &spec, 1.0),
            ),
            target: 0.0,
        });
    }
    let c = ConstraintSet::build(equality, vec![]).unwrap();
    let star = instances::lambda(&mut rng, &c, 1.0);
    let uniform = StructuredPolicy::uniform(spec);
    let reference =
        backward_z_structured(&uniform, &DualVars::from_flat(&c, &star).unwrap(), &c).unwrap();
    (reference, c, reward, rng.random_range(0.5..3.0))
}

fn min_step(trace: &area_core::area::AreaTrace) -> f64 {
    trace
        .records
        .windows(2)
        .map(|w| w[1].l - w[0].l)
        .fold(f64::INFINITY, f64::min)
}

fn monotonicity() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::from_json(CONVERGENCE).map_err(|e| e.to_string())?;
    let problem = config.problem().map_err(|e| e.to_string())?;
    let samples = match config.moments {
        MomentDecl::Exact { reference_samples } => reference_samples,
        MomentDecl::Sampled { .. } => {
            return Err("shipped convergence config should use exact moments".into())
        }
    };
    let reference = reference_model(&config, &problem, samples).map_err(|e| e.to_string())?;
    let opts = AreaOptions {
        estimation: tight(),
        ..config.area_options()
    };
    let trace = run_area(
        StructuredPolicy::uniform(problem.spec),
        &problem.constraints,
        &problem.reward,
        &MomentSource::Exact { reference },
        &opts,
    )
    .map_err(|e| e.to_string())?;
    let main = min_step(&trace);
    let elapsed = start.elapsed();

    let mut small = f64::INFINITY;
    for seed in 0..10 {
        let (reference, c, reward, gamma) = planted_config(seed);
        let opts = AreaOptions {
            gamma,
            iterations: 10,
            estimation: tight(),
            ..AreaOptions::default()
        };
        let initial = StructuredPolicy::uniform(reference.spec());
        let trace = run_area(
            initial,
            &c,
            &reward,
            &MomentSource::Exact { reference },
            &opts,
        )
        .map_err(|e| e.to_string())?;
        small = small.min(min_step(&trace));
    }
    check(
        main >= -1e-8 && small >= -1e-8 && elapsed < Duration::from_secs(300),
        format!(
            "min L step: 30x6x6 config {main:.2e}, 10 small configs {small:.2e} (slack -1e-8); large run {elapsed:.2?} (limit 300 s)"
        ),
    )
}

fn one_iteration() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = instances::rng(700_000 + seed);
        let spec = instances::spec(&mut rng, 5, 3);
        let path = instances::trajectory(&mut rng, &spec);
        let reward = RewardFunction::path(spec, path.clone(), rng.random_range(0.5..2.0)).unwrap();
        let equality = prefix_features(&spec, "x", &path, 1.0)
            .unwrap()
            .into_iter()
            .map(|feature| Constraint {
                feature,
                target: 0.0,
            })
            .collect();
        let c = ConstraintSet::build(equality, vec![]).unwrap();
        let reference = instances::human(&mut rng, &spec, 2);
        let initial = instances::policy(&mut rng, &spec, 2);
        let opts = AreaOptions {
            gamma: rng.random_range(0.5..3.0),
            iterations: 2,
            estimation: precise(),
            keep_policies: true,
            ..AreaOptions::default()
        };
        let trace = run_area(
            initial,
            &c,
            &reward,
            &MomentSource::Exact { reference },
            &opts,
        )
        .map_err(|e| e.to_string())?;
        worst = worst.max(trace.policies[2].sup_distance(&trace.policies[1]).unwrap());
    }
    check(
        worst <= 1e-8,
        format!("10 instances, T <= 5; max sup |Q2 - Q1| {worst:.1e} (tol 1e-8)"),
    )
}

fn convergence_study() -> Outcome {
    let config = ExperimentConfig::from_json(CONVERGENCE).map_err(|e| e.to_string())?;
    let result = reproduce_convergence(&config).map_err(|e| e.to_string())?;
    let get = |name: &str| {
        result
            .summary
            .iter()
            .find(|s| s.series == name)
            .ok_or(format!("missing series {name}"))
    };
    let exact = get("exact")?;
    let small = get("n=10")?;
    let large = get("n=1000")?;
    let converged = exact.converged_by.is_some_and(|n| n <= 3);
    check(
        converged && small.mean_abs_delta > large.mean_abs_delta && small.late_std > 0.0,
        format!(
            "exact converged at {:?} (limit 3); mean |dL| n=10 {:.3} > n=1000 {:.3}; n=10 late std {:.3} > 0",
            exact.converged_by, small.mean_abs_delta, large.mean_abs_delta, small.late_std
        ),
    )
}

fn comparison_study() -> Outcome {
    let start = Instant::now();
    let config = ExperimentConfig::from_json(COMPARISON).map_err(|e| e.to_string())?;
    let rows = reproduce_comparison(&config).map_err(|e| e.to_string())?;
    let at = |method: &str| {
        rows.iter()
            .filter(|r| r.method == method)
            .max_by_key(|r| r.samples_observed)
            .cloned()
            .ok_or(format!("missing method {method}"))
    };
    let (area, ql) = (at("area")?, at("qlearning")?);
    let elapsed = start.elapsed();
    check(
        area.samples_observed == 100
            && area.avg_reward >= ql.avg_reward
            && area.entropy >= ql.entropy
            && elapsed < Duration::from_secs(600),
        format!(
            "at {} samples over {} rounds: reward AREA {:.3} vs Q-learning {:.3}; entropy AREA {:.3} vs Q-learning {:.3}; {elapsed:.2?} (limit 600 s)",
            area.samples_observed, config.rounds, area.avg_reward, ql.avg_reward, area.entropy, ql.entropy
        ),
    )
}

fn scaling() -> Outcome {
    let result = bench_scaling(21).map_err(|e| e.to_string())?;
    let entries = |name: &str| -> Vec<(usize, usize)> {
        result
            .rows
            .iter()
            .filter(|r| r.features == name)
            .map(|r| (r.horizon, r.peak_model_entries))
            .collect()
    };
    let dec = entries("decomposable");
    let ratio = dec[1].1 as f64 / dec[0].1 as f64;
    let proportional = dec.iter().all(|&(t, e)| e * dec[0].0 == dec[0].1 * t);
    // Hybrid storage is affine in T: equal increments per unit of T.
    let hyb = entries("hybrid");
    let slope = (hyb[1].1 - hyb[0].1) / (hyb[1].0 - hyb[0].0);
    let affine = hyb
        .iter()
        .all(|&(t, e)| e == hyb[0].1 + slope * (t - hyb[0].0));
    let worst = result
        .exponents
        .iter()
        .map(|(_, e)| *e)
        .fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<String> = result
        .exponents
        .iter()
        .map(|(n, e)| format!("{n} {e:.2}"))
        .collect();
    check(
        ratio == 2.0 && proportional && affine && worst <= 2.3 && result.dense_refused,
        format!(
            "storage ratio T=20/T=10 {ratio} (want 2.0), linear {proportional}, hybrid affine {affine}; time exponents {} (limit 2.3); dense T=10 refused {}",
            exps.join(", "),
            result.dense_refused
        ),
    )
}

fn lca() -> Outcome {
    let quiet = LcaParams {
        sigma2: 0.0,
        ..LcaParams::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let from_rest = lca_step(&quiet, &[0.0; 3], 2, &mut rng) == vec![0.0, 0.0, 0.4];
    let no_stim = LcaParams {
        rho: 0.0,
        ..quiet.clone()
    };
    let decay = lca_step(&no_stim, &[1.0, 0.0], 9, &mut rng) == vec![0.9, 0.0];
    let argmax = lca_choose(&[0.3, 0.1, 0.2], &mut rng) == 0;
    let hand = from_rest && decay && argmax;

    let spec = ProcessSpec::new(8, 3, 3).unwrap();
    let q = StructuredPolicy::uniform(spec);
    let p = LcaParams::default();
    let a = sample_interactions(&q, &p, 600, 42, "u").unwrap();
    let b = sample_interactions(&q, &p, 600, 42, "u").unwrap();
    let single = rayon::ThreadPoolBuilder::new()
        .num_threads(1)
        .build()
        .unwrap();
    let c = single.install(|| sample_interactions(&q, &p, 600, 42, "u").unwrap());
    let reproducible = a == b && a == c;

    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut acc = vec![0.0; 6];
    let mut nonnegative = true;
    for _ in 0..1_000_000 {
        let s = rng.random_range(0..6);
        acc = lca_step(&p, &acc, s, &mut rng);
        nonnegative &= acc.iter().all(|&x| x >= 0.0);
    }
    check(
        hand && reproducible && nonnegative,
        format!("quiet hand-computed steps match: {hand}; seeded batches bit-identical across runs and thread counts: {reproducible}; 1e6 noisy steps nonnegative: {nonnegative}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 11] = [
        ("dense/structured equivalence", equivalence),
        ("dual gradient vs finite differences", gradient),
        ("planted-model recovery", planted),
        ("machine-optimization optimality", machine_optimality),
        ("log-partition identity", log_partition_identity),
        ("monotone regularized reward", monotonicity),
        (
            "one-iteration convergence with prefix features",
            one_iteration,
        ),
        ("convergence vs sample size", convergence_study),
        ("AREA vs Q-learning", comparison_study),
        ("scaling in the horizon", scaling),
        ("LCA correctness", lca),
    ];
    let mut failed = Vec::new();
    for (i, (name, run)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            Err(format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!(
                "criterion {:>2} PASS  {name}: {detail} [{secs:.1} s]",
                i + 1
            ),
            Err(detail) => {
                println!(
                    "criterion {:>2} FAIL  {name}: {detail} [{secs:.1} s]",
                    i + 1
                );
                failed.push(i + 1);
            }
        }
    }
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", criteria.len());
    } else {
        println!("acceptance: failed criteria {failed:?}");
        std::process::exit(1);
    }
}
