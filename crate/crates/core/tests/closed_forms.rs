use approx::assert_abs_diff_eq;
use area_core::estimation::{
    backward_z_dense, backward_z_structured, dual_objective, estimate_human,
    feature_moments_structured, solve_dual, DualVars, EstimationOptions, StructuredDual,
};
use area_core::features::{
    follow_feature, periodic_target_reward, weighted_follow_feature, Constraint, ConstraintSet,
    Feature, RewardFunction, StepTables,
};
use area_core::machine::{
    backward_y_dense, backward_y_structured, decomposable_policy, extract_policy, log_partition,
    machine_objective, regularized_reward, MachineTable,
};
use area_core::process::{
    CausalTable, MachinePolicy, ProcessSpec, Side, Trajectory, DEFAULT_JOINT_CAP,
};
use area_core::structured::{StructuredHuman, StructuredPolicy};

const CAP: u64 = DEFAULT_JOINT_CAP;

fn eq(feature: Feature, target: f64) -> Constraint {
    Constraint { feature, target }
}

#[test]
fn zero_multipliers_give_the_uniform_model() {
    let spec = ProcessSpec::new(3, 3, 2).unwrap();
    let c = ConstraintSet::build(vec![eq(follow_feature(spec, "f"), 1.0)], vec![]).unwrap();
    let q = CausalTable::uniform(spec, Side::Machine, CAP).unwrap();
    let p = backward_z_dense(&q, &DualVars::zeros(&c), &c, CAP).unwrap();
    assert!(p.model.steps().iter().flatten().all(|&x| x == 1.0 / 3.0));

    let policy = StructuredPolicy::uniform(spec);
    let s = backward_z_structured(&policy, &DualVars::zeros(&c), &c).unwrap();
    assert_eq!(s.tree().len(), 1);
    for t in 1..=3 {
        assert!(s.off_path(t).iter().all(|&x| x == 1.0 / 3.0));
    }
    let dual = dual_objective(&policy, &DualVars::zeros(&c), &c).unwrap();
    assert_abs_diff_eq!(dual, 3.0 * 3f64.ln(), epsilon = 1e-12);
}

#[test]
fn single_step_softmax() {
    let spec = ProcessSpec::new(1, 2, 2).unwrap();
    let f = Feature::decomposable(
        "h0",
        StepTables::from_fn(spec, |_, h, _| (h == 0) as u8 as f64),
    );
    let c = ConstraintSet::build(vec![eq(f, 0.5)], vec![]).unwrap();
    let lambda = DualVars {
        lambda_f: vec![3f64.ln()],
        lambda_g: vec![],
    };
    let q = CausalTable::uniform(spec, Side::Machine, CAP).unwrap();
    let p = backward_z_dense(&q, &lambda, &c, CAP).unwrap();
    for m in 0..2 {
        assert_abs_diff_eq!(p.model.probs(1, 0, m)[0], 0.75, epsilon = 1e-15);
    }
    let s = backward_z_structured(&StructuredPolicy::uniform(spec), &lambda, &c).unwrap();
    assert_abs_diff_eq!(s.off_path(1)[spec.cond(1, 0)], 0.75, epsilon = 1e-15);
}

#[test]
fn matching_targets_are_accepted_without_iterating() {
    let spec = ProcessSpec::new(4, 2, 2).unwrap();
    let policy = StructuredPolicy::uniform(spec);
    let mut c = ConstraintSet::build(vec![eq(follow_feature(spec, "f"), 0.0)], vec![]).unwrap();
    let model = backward_z_structured(&policy, &DualVars::zeros(&c), &c).unwrap();
    let moments = feature_moments_structured(&model, &policy, &c).unwrap();
    assert_abs_diff_eq!(moments[0], 2.0, epsilon = 1e-12);
    c.set_targets(&moments);
    let sol = solve_dual(
        &StructuredDual::new(&policy, &c).unwrap(),
        &EstimationOptions::default(),
    )
    .unwrap();
    assert!(sol.converged());
    assert_eq!(sol.iterations, 0);
    assert_eq!(sol.lambda, vec![0.0]);
}

#[test]
fn no_constraints_estimate_is_uniform() {
    let spec = ProcessSpec::new(3, 3, 3).unwrap();
    let c = ConstraintSet::build(vec![], vec![]).unwrap();
    assert_eq!(c.warnings().len(), 1);
    let est = estimate_human(
        &StructuredPolicy::uniform(spec),
        &c,
        &EstimationOptions::default(),
    )
    .unwrap();
    assert!(est.status == area_core::estimation::Status::Converged);
    for t in 1..=3 {
        assert!(est
            .model
            .off_path(t)
            .iter()
            .all(|&x| (x - 1.0 / 3.0).abs() < 1e-15));
    }
    assert_abs_diff_eq!(est.entropy, 3.0 * 3f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(est.duality_gap, 0.0, epsilon = 1e-12);
}

#[test]
fn pinned_path_forces_a_deterministic_estimate() {
    let spec = ProcessSpec::new(2, 2, 2).unwrap();
    let path = Trajectory::new(&spec, vec![1, 0], vec![0, 1]).unwrap();
    // Under a human that always plays the path's actions, the path has the
    // probability of its machine moves: 1/4 under a uniform policy.
    let f = Feature::path_based(&spec, "path", path.clone(), 1.0).unwrap();
    let c = ConstraintSet::build(vec![eq(f, 0.25)], vec![]).unwrap();
    let policy = StructuredPolicy::uniform(spec);
    let est = estimate_human(&policy, &c, &EstimationOptions::default()).unwrap();
    assert!(est.max_residual <= 1e-4, "{}", est.max_residual);
    let mut buf = [0.0; 2];
    use area_core::process::HumanModel;
    est.model.human_conditional(&[], &[0], &mut buf);
    assert!(buf[1] > 0.999, "{buf:?}");
    est.model.human_conditional(&[1], &[0, 1], &mut buf);
    assert!(buf[0] > 0.999, "{buf:?}");
}

#[test]
fn reward_feature_set_has_three_constraints() {
    let spec = ProcessSpec::new(30, 6, 6).unwrap();
    let r = periodic_target_reward(spec, 5, 0);
    let c = ConstraintSet::build(
        vec![
            eq(r.as_feature("reward"), 10.0),
            eq(follow_feature(spec, "follow"), 6.0),
            eq(
                weighted_follow_feature(spec, "weighted-follow", 5, 0.25),
                2.0,
            ),
        ],
        vec![],
    )
    .unwrap();
    assert_eq!(c.len(), 3);
    assert!(c.includes_reward());
    assert!(c.warnings().is_empty());
}

#[test]
fn large_structured_estimate_stays_linear() {
    // T = 30 and 6 x 6 alphabets: far beyond any dense table.
    let spec = ProcessSpec::new(30, 6, 6).unwrap();
    let reward = periodic_target_reward(spec, 5, 0);
    let mut c = ConstraintSet::build(
        vec![
            eq(reward.as_feature("reward"), 0.0),
            eq(follow_feature(spec, "follow"), 0.0),
            eq(
                weighted_follow_feature(spec, "weighted-follow", 5, 0.25),
                0.0,
            ),
        ],
        vec![],
    )
    .unwrap();
    let policy = StructuredPolicy::uniform(spec);
    let planted = DualVars {
        lambda_f: vec![0.3, 0.8, -0.4],
        lambda_g: vec![],
    };
    let truth = backward_z_structured(&policy, &planted, &c).unwrap();
    c.set_targets(&feature_moments_structured(&truth, &policy, &c).unwrap());
    let est = estimate_human(&policy, &c, &EstimationOptions::default()).unwrap();
    assert!(est.max_residual <= 1e-3);
    assert_eq!(est.model.storage_entries(), truth.storage_entries());
    assert_eq!(est.model.tree().len(), 1);
}

#[test]
fn single_step_machine_values() {
    let spec = ProcessSpec::new(1, 2, 2).unwrap();
    let reward =
        RewardFunction::decomposable(StepTables::from_fn(spec, |_, _, m| (m == 0) as u8 as f64));
    let p = CausalTable::from_fn(spec, Side::Human, CAP, |_, _, _| vec![0.3, 0.7]).unwrap();
    for gamma in [0.5, 1.0, 3.0] {
        let y = backward_y_dense(&p, &reward, gamma, CAP).unwrap();
        let area_core::machine::YValues::Dense { steps } = &y.values else {
            panic!()
        };
        assert_abs_diff_eq!(steps[0][0].exp(), gamma.exp(), epsilon = 1e-12);
        assert_abs_diff_eq!(steps[0][1].exp(), 1.0, epsilon = 1e-15);
    }
    let y = backward_y_dense(&p, &reward, 1.0, CAP).unwrap();
    let e = std::f64::consts::E;
    assert_abs_diff_eq!(log_partition(&y), (e + 1.0).ln(), epsilon = 1e-15);
    let q = extract_policy(&y).unwrap().into_dense().unwrap();
    assert_abs_diff_eq!(q.probs(1, 0, 0)[0], e / (e + 1.0), epsilon = 1e-15);
    assert_abs_diff_eq!(q.probs(1, 0, 0)[0], 0.7311, epsilon = 1e-4);
}

#[test]
fn zero_gamma_gives_uniform_policies() {
    let spec = ProcessSpec::new(3, 2, 3).unwrap();
    let reward = periodic_target_reward(spec, 2, 1);
    let p = CausalTable::from_fn(spec, Side::Human, CAP, |t, _, m| {
        let x = 0.1 + 0.2 * ((t + m[t - 1]) % 3) as f64;
        vec![x, 1.0 - x]
    })
    .unwrap();
    let y = backward_y_dense(&p, &reward, 0.0, CAP).unwrap();
    let q = extract_policy(&y).unwrap().into_dense().unwrap();
    assert!(q.steps().iter().flatten().all(|&x| x == 1.0 / 3.0));
    assert_abs_diff_eq!(log_partition(&y), 3.0 * 3f64.ln(), epsilon = 1e-12);
    assert_abs_diff_eq!(
        machine_objective(&p, &q, &reward, 0.0, CAP).unwrap(),
        3.0 * 3f64.ln(),
        epsilon = 1e-12
    );

    let human = StructuredHuman::uniform(spec);
    let ys = backward_y_structured(&human, &reward, 0.0).unwrap();
    let MachineTable::Structured(qs) = extract_policy(&ys).unwrap() else {
        panic!()
    };
    assert!(qs.is_product());
    for t in 1..=3 {
        assert!(qs.off_path(t).iter().all(|&x| x == 1.0 / 3.0));
    }
    let l = regularized_reward(&human, &qs, &reward, 0.0).unwrap();
    assert_abs_diff_eq!(l.value, 3.0 * 3f64.ln(), epsilon = 1e-12);
}

#[test]
fn deterministic_policy_without_reward_weight_scores_zero() {
    let spec = ProcessSpec::new(2, 2, 2).unwrap();
    let reward = periodic_target_reward(spec, 2, 1);
    let p = CausalTable::uniform(spec, Side::Human, CAP).unwrap();
    let q = CausalTable::from_fn(spec, Side::Machine, CAP, |_, _, _| vec![1.0, 0.0]).unwrap();
    assert_eq!(machine_objective(&p, &q, &reward, 0.0, CAP).unwrap(), 0.0);
}

#[test]
fn closed_form_product_policy() {
    let spec = ProcessSpec::new(1, 2, 2).unwrap();
    // Expected per-action rewards (0.5, 0.0) with gamma = 2.
    let human = StructuredHuman::markov(spec, vec![vec![0.5, 0.5, 0.5, 0.5]]).unwrap();
    let reward = RewardFunction::decomposable(StepTables::from_fn(spec, |_, h, m| {
        (h == 0 && m == 0) as u8 as f64
    }));
    let q = decomposable_policy(&human, &reward, 2.0).unwrap();
    assert_abs_diff_eq!(q[0][0], 0.7311, epsilon = 1e-4);
    assert_abs_diff_eq!(q[0][1], 0.2689, epsilon = 1e-4);
    assert_abs_diff_eq!(q[0][0], 1.0 / (1.0 + (-1f64).exp()), epsilon = 1e-15);

    let zero = RewardFunction::decomposable(StepTables::zeros(spec));
    assert_eq!(
        decomposable_policy(&human, &zero, 2.0).unwrap()[0],
        vec![0.5, 0.5]
    );

    let path =
        RewardFunction::path(spec, Trajectory::new(&spec, vec![0], vec![0]).unwrap(), 1.0).unwrap();
    assert!(decomposable_policy(&human, &path, 2.0).is_err());
}

#[test]
fn reward_maximizing_action_gains_probability_with_gamma() {
    let spec = ProcessSpec::new(1, 2, 3).unwrap();
    let reward =
        RewardFunction::decomposable(StepTables::from_fn(spec, |_, h, m| (h + m) as f64 * 0.3));
    let human = StructuredHuman::markov(spec, vec![vec![0.2, 0.8, 0.6, 0.4, 0.5, 0.5]]).unwrap();
    let mut prev = 0.0;
    for i in 0..50 {
        let gamma = i as f64 * 0.2;
        let y = backward_y_structured(&human, &reward, gamma).unwrap();
        let q = extract_policy(&y).unwrap();
        let mut buf = [0.0; 3];
        q.machine_conditional(&[], &[], &mut buf);
        assert!(buf[2] >= prev);
        prev = buf[2];
    }
}
