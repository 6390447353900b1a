use area_core::estimation::{
    backward_z_dense, backward_z_structured, dual_gradient, dual_objective, dual_objective_dense,
    feature_moments_structured, solve_dual, DualVars, EstimationOptions, StructuredDual,
};
use area_core::features::{ConstraintSet, RewardFunction};
use area_core::machine::{
    backward_y_dense, backward_y_structured, decomposable_policy, extract_policy,
    machine_objective, regularized_reward,
};
use area_core::process::{CausalTable, ProcessSpec, Side, DEFAULT_JOINT_CAP};
use area_core::structured::{stopping_time_survival, StructuredPolicy};
use area_oracle::{instances, OracleBudget};

const CAP: u64 = DEFAULT_JOINT_CAP;

fn sup(a: &CausalTable, b: &CausalTable) -> f64 {
    a.steps()
        .iter()
        .flatten()
        .zip(b.steps().iter().flatten())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn dense_and_structured_gibbs_models_agree() {
    for seed in 0..100 {
        let mut rng = instances::rng(seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 2, 1, 1);
        let lambda = DualVars::from_flat(&c, &instances::lambda(&mut rng, &c, 1.5)).unwrap();
        let q = CausalTable::from_machine(&policy, CAP).unwrap();
        let dense = backward_z_dense(&q, &lambda, &c, CAP).unwrap();
        let structured = backward_z_structured(&policy, &lambda, &c).unwrap();
        let d = sup(
            &dense.model,
            &CausalTable::from_human(&structured, CAP).unwrap(),
        );
        assert!(d <= 1e-9, "seed {seed}: {d:e}");
        let obj_d = dual_objective_dense(&q, &lambda, &c, CAP).unwrap();
        let obj_s = dual_objective(&policy, &lambda, &c).unwrap();
        assert!(
            (obj_d - obj_s).abs() <= 1e-9,
            "seed {seed}: {obj_d} vs {obj_s}"
        );
    }
}

#[test]
fn dense_gibbs_matches_naive_recursion() {
    for seed in 0..20 {
        let mut rng = instances::rng(1000 + seed);
        let spec = ProcessSpec::new(2, 2, 2).unwrap();
        let policy = instances::policy(&mut rng, &spec, 1);
        let c = instances::constraints(&mut rng, &spec, 2, 1, 1, 0);
        let flat = instances::lambda(&mut rng, &c, 1.0);
        let lambda = DualVars::from_flat(&c, &flat).unwrap();
        let q = CausalTable::from_machine(&policy, CAP).unwrap();
        let dense = backward_z_dense(&q, &lambda, &c, CAP).unwrap();
        let naive = area_oracle::NaiveGibbs::new(&policy, &c, &flat);
        let d = sup(&dense.model, &CausalTable::from_human(&naive, CAP).unwrap());
        assert!(d <= 1e-12, "seed {seed}: {d:e}");
        let obj = dual_objective_dense(&q, &lambda, &c, CAP).unwrap();
        assert!((obj - naive.dual_objective()).abs() <= 1e-12);
    }
}

#[test]
fn structured_moments_and_survival_match_enumeration() {
    let budget = OracleBudget::default();
    for seed in 0..30 {
        let mut rng = instances::rng(2000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 2, 2, 0);
        let lambda = DualVars::from_flat(&c, &instances::lambda(&mut rng, &c, 1.0)).unwrap();
        let model = backward_z_structured(&policy, &lambda, &c).unwrap();
        let moments = feature_moments_structured(&model, &policy, &c).unwrap();
        for (f, m) in c.features().zip(&moments) {
            let exact =
                area_oracle::expectation(&model, &policy, &budget, |t| f.value(&spec, t)).unwrap();
            assert!(
                (exact - m).abs() <= 1e-9,
                "seed {seed} {}: {m} vs {exact}",
                f.id
            );
        }
        // Survival of the union of the model tree's leaves.
        let aligned = area_core::structured::align(&model, &policy).unwrap();
        let tree = aligned.0.tree().clone();
        let mut prev = 1.0;
        for t in 1..=spec.horizon {
            let s = stopping_time_survival(&model, &policy, t).unwrap();
            let exact = area_oracle::expectation(&model, &policy, &budget, |traj| {
                tree.locate(&traj.human[..t], &traj.machine[..t]).is_some() as u8 as f64
            })
            .unwrap();
            assert!(
                (s - exact).abs() <= 1e-12,
                "seed {seed} t {t}: {s} vs {exact}"
            );
            assert!(s <= prev + 1e-15);
            prev = s;
        }
    }
}

#[test]
fn dual_gradient_matches_finite_differences() {
    for seed in 0..50 {
        let mut rng = instances::rng(3000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 1, 1, 1);
        let mut flat = instances::lambda(&mut rng, &c, 1.0);
        // Keep inequality multipliers away from the boundary for central differences.
        for l in flat.iter_mut().skip(c.equality.len()) {
            *l += 0.1;
        }
        let lambda = DualVars::from_flat(&c, &flat).unwrap();
        let grad = dual_gradient(&policy, &lambda, &c).unwrap();
        let h = 1e-5;
        for i in 0..flat.len() {
            let mut plus = flat.clone();
            let mut minus = flat.clone();
            plus[i] += h;
            minus[i] -= h;
            let fp = dual_objective(&policy, &DualVars::from_flat(&c, &plus).unwrap(), &c).unwrap();
            let fm =
                dual_objective(&policy, &DualVars::from_flat(&c, &minus).unwrap(), &c).unwrap();
            let fd = (fp - fm) / (2.0 * h);
            let tol = 1e-6f64.max(1e-4 * grad[i].abs());
            assert!(
                (fd - grad[i]).abs() <= tol,
                "seed {seed} coord {i}: {fd} vs {}",
                grad[i]
            );
        }
    }
}

#[test]
fn dual_objective_is_midpoint_convex() {
    for seed in 0..30 {
        let mut rng = instances::rng(3500 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let policy = instances::policy(&mut rng, &spec, 1);
        let c = instances::constraints(&mut rng, &spec, 2, 1, 1, 1);
        let a = instances::lambda(&mut rng, &c, 2.0);
        let b = instances::lambda(&mut rng, &c, 2.0);
        let mid: Vec<f64> = a.iter().zip(&b).map(|(x, y)| 0.5 * (x + y)).collect();
        let f =
            |x: &[f64]| dual_objective(&policy, &DualVars::from_flat(&c, x).unwrap(), &c).unwrap();
        assert!(f(&mid) <= 0.5 * (f(&a) + f(&b)) + 1e-12);
    }
}

fn planted(seed: u64) -> (StructuredPolicy, ConstraintSet, Vec<f64>) {
    let mut rng = instances::rng(4000 + seed);
    let spec = ProcessSpec::new(2 + (seed as usize % 2), 2, 2).unwrap();
    let policy = instances::policy(&mut rng, &spec, 1);
    let mut c = instances::constraints(&mut rng, &spec, 2, 1, 1, 0);
    let star = instances::lambda(&mut rng, &c, 1.0);
    let model =
        backward_z_structured(&policy, &DualVars::from_flat(&c, &star).unwrap(), &c).unwrap();
    let moments = feature_moments_structured(&model, &policy, &c).unwrap();
    c.set_targets(&moments);
    (policy, c, star)
}

#[test]
fn planted_models_are_recovered_with_small_duality_gap() {
    let budget = OracleBudget::default();
    for seed in 0..10 {
        let (policy, c, star) = planted(seed);
        let problem = StructuredDual::new(&policy, &c).unwrap();
        let sol = solve_dual(&problem, &EstimationOptions::default()).unwrap();
        assert!(sol.converged(), "seed {seed}: {:?}", sol.status);
        assert!(sol.iterations <= 5000);
        assert!(
            sol.max_residual() <= 1e-4,
            "seed {seed}: {}",
            sol.max_residual()
        );
        let gap =
            area_oracle::duality_gap(&policy, &c, &sol.lambda, &sol.eval.model, &budget).unwrap();
        assert!(gap.abs() <= 1e-4, "seed {seed}: gap {gap}");
        // At the planted multipliers the Gibbs model is exact.
        let model =
            backward_z_structured(&policy, &DualVars::from_flat(&c, &star).unwrap(), &c).unwrap();
        let gap = area_oracle::duality_gap(&policy, &c, &star, &model, &budget).unwrap();
        assert!(gap.abs() <= 1e-10, "seed {seed}: planted gap {gap}");
    }
}

#[test]
fn duality_gap_is_positive_away_from_the_optimum() {
    let budget = OracleBudget::default();
    let (policy, c, star) = planted(3);
    let model =
        backward_z_structured(&policy, &DualVars::from_flat(&c, &star).unwrap(), &c).unwrap();
    let far: Vec<f64> = star.iter().map(|l| l + 3.0).collect();
    let gap = area_oracle::duality_gap(&policy, &c, &far, &model, &budget).unwrap();
    assert!(gap > 1e-3, "{gap}");

    let spec = ProcessSpec::new(2, 2, 3).unwrap();
    let empty = ConstraintSet::build(vec![], vec![]).unwrap();
    let uniform = StructuredPolicy::uniform(spec);
    let p = area_core::structured::StructuredHuman::uniform(spec);
    let gap = area_oracle::duality_gap(&uniform, &empty, &[], &p, &budget).unwrap();
    assert!(gap.abs() <= 1e-14, "{gap}");
}

#[test]
fn dense_and_structured_machine_policies_agree() {
    for seed in 0..100 {
        let mut rng = instances::rng(5000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 2);
        let gamma = rng_gamma(seed);
        let dense_p = CausalTable::from_human(&human, CAP).unwrap();
        let yd = backward_y_dense(&dense_p, &reward, gamma, CAP).unwrap();
        let ys = backward_y_structured(&human, &reward, gamma).unwrap();
        let qd = extract_policy(&yd).unwrap().into_dense().unwrap();
        let qs = extract_policy(&ys).unwrap().into_structured().unwrap();
        let d = sup(&qd, &CausalTable::from_machine(&qs, CAP).unwrap());
        assert!(d <= 1e-9, "seed {seed}: {d:e}");
        // The structured values are shifted by collected reward; the
        // partition function differs by nothing because nothing is collected
        // before step 1.
        assert!((yd.log_partition - ys.log_partition).abs() <= 1e-9);
    }
}

fn rng_gamma(seed: u64) -> f64 {
    [0.5, 1.0, 2.0, 4.0][seed as usize % 4]
}

#[test]
fn log_partition_equals_regularized_reward() {
    let budget = OracleBudget::default();
    for seed in 0..20 {
        let mut rng = instances::rng(6000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 1);
        let gamma = rng_gamma(seed);
        let y = backward_y_structured(&human, &reward, gamma).unwrap();
        let q = extract_policy(&y).unwrap().into_structured().unwrap();
        let exact = area_oracle::machine_objective(&human, &q, &reward, gamma, &budget).unwrap();
        assert!(
            (y.log_partition - exact).abs() <= 1e-9,
            "seed {seed}: {} vs {exact}",
            y.log_partition
        );
        let structured = regularized_reward(&human, &q, &reward, gamma).unwrap();
        assert!((structured.value - exact).abs() <= 1e-9);
    }
}

#[test]
fn recursion_policy_matches_projected_gradient_oracle() {
    let budget = OracleBudget::default();
    for seed in 0..12 {
        let mut rng = instances::rng(7000 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 1);
        let reward = instances::reward(&mut rng, &spec, 1);
        let gamma = rng_gamma(seed);
        let y = backward_y_structured(&human, &reward, gamma).unwrap();
        let q = extract_policy(&y).unwrap();
        let ours = area_oracle::machine_objective(&human, &q, &reward, gamma, &budget).unwrap();
        let oracle = area_oracle::oracle_machine_opt(&human, &reward, gamma, &budget).unwrap();
        assert!(
            oracle.objective <= ours + 1e-6,
            "seed {seed}: {} > {ours}",
            oracle.objective
        );
        assert!(
            (oracle.objective - ours).abs() <= 1e-6,
            "seed {seed}: {} vs {ours}",
            oracle.objective
        );

        let dense_p = CausalTable::from_human(&human, CAP).unwrap();
        let dense_q = CausalTable::from_machine(&q, CAP).unwrap();
        let objective = machine_objective(&dense_p, &dense_q, &reward, gamma, CAP).unwrap();
        for _ in 0..200 {
            let random = instances::policy(&mut rng, &spec, 2);
            let other =
                area_oracle::machine_objective(&human, &random, &reward, gamma, &budget).unwrap();
            assert!(other <= objective + 1e-12);
        }
    }
}

#[test]
fn oracle_finds_uniform_policy_without_reward_weight() {
    let budget = OracleBudget::default();
    let spec = ProcessSpec::new(2, 2, 3).unwrap();
    let mut rng = instances::rng(8);
    let human = instances::human(&mut rng, &spec, 1);
    let reward = instances::reward(&mut rng, &spec, 1);
    let opt = area_oracle::oracle_machine_opt(&human, &reward, 0.0, &budget).unwrap();
    assert!((opt.objective - 2.0 * 3f64.ln()).abs() <= 1e-9);
    for p in opt.policy.get(&[], &[]) {
        assert!((p - 1.0 / 3.0).abs() <= 1e-9);
    }
}

#[test]
fn closed_form_matches_recursion_for_markov_humans() {
    for seed in 0..20 {
        let mut rng = instances::rng(9000 + seed);
        let spec = instances::spec(&mut rng, 4, 3);
        let human = instances::markov_human(&mut rng, &spec);
        let reward = RewardFunction::decomposable(instances::step_tables(&mut rng, &spec, 1.0));
        let gamma = rng_gamma(seed);
        let closed = decomposable_policy(&human, &reward, gamma).unwrap();
        let q = extract_policy(&backward_y_structured(&human, &reward, gamma).unwrap())
            .unwrap()
            .into_structured()
            .unwrap();
        assert!(q.is_product());
        let dense = CausalTable::from_machine(&q, CAP).unwrap();
        for (k, step) in dense.steps().iter().enumerate() {
            for block in step.chunks(spec.machine_actions) {
                for (a, b) in block.iter().zip(&closed[k]) {
                    assert!((a - b).abs() <= 1e-9, "seed {seed}");
                }
            }
        }
    }
}

#[test]
fn oracle_expectations_match_dense_enumeration() {
    let budget = OracleBudget::default();
    for seed in 0..10 {
        let mut rng = instances::rng(9500 + seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let policy = instances::policy(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 2);
        let p = CausalTable::from_human(&human, CAP).unwrap();
        let q = CausalTable::from_machine(&policy, CAP).unwrap();
        let a = area_core::process::expect_function(&p, &q, CAP, |t| reward.eval(t)).unwrap();
        let b = area_oracle::expectation(&human, &policy, &budget, |t| reward.eval(t)).unwrap();
        assert!((a - b).abs() <= 1e-12);
        for (side, human_side) in [(Side::Human, true), (Side::Machine, false)] {
            let a = area_core::process::causal_entropy(side, &p, &q, CAP).unwrap();
            let b = area_oracle::causal_entropy(&human, &policy, &budget, human_side).unwrap();
            assert!((a - b).abs() <= 1e-12);
        }
    }
}

proptest::proptest! {
    #![proptest_config(proptest::prelude::ProptestConfig::with_cases(64))]

    #[test]
    fn log_partition_identity_holds_for_any_instance(seed in 0u64..u64::MAX, gamma in 0.0f64..5.0) {
        let mut rng = instances::rng(seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let human = instances::human(&mut rng, &spec, 2);
        let reward = instances::reward(&mut rng, &spec, 1);
        let y = backward_y_structured(&human, &reward, gamma).unwrap();
        let q = extract_policy(&y).unwrap();
        let exact = area_oracle::machine_objective(&human, &q, &reward, gamma, &OracleBudget::default()).unwrap();
        proptest::prop_assert!((y.log_partition - exact).abs() <= 1e-9);
    }

    #[test]
    fn dense_and_structured_agree_for_any_instance(seed in 0u64..u64::MAX) {
        let mut rng = instances::rng(seed);
        let spec = instances::spec(&mut rng, 3, 3);
        let policy = instances::policy(&mut rng, &spec, 2);
        let c = instances::constraints(&mut rng, &spec, 2, 1, 1, 1);
        let lambda = DualVars::from_flat(&c, &instances::lambda(&mut rng, &c, 1.5)).unwrap();
        let q = CausalTable::from_machine(&policy, CAP).unwrap();
        let dense = backward_z_dense(&q, &lambda, &c, CAP).unwrap();
        let structured = backward_z_structured(&policy, &lambda, &c).unwrap();
        proptest::prop_assert!(sup(&dense.model, &CausalTable::from_human(&structured, CAP).unwrap()) <= 1e-9);
    }
}
