//! Seeded random instances shared by the test suites.

use area_core::features::{Constraint, ConstraintSet, Feature, RewardFunction, StepTables};
use area_core::process::{ProcessSpec, Trajectory};
use area_core::structured::{StructuredHuman, StructuredPolicy};
use area_core::tree::PrefixTree;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// A probability vector with every entry at least `floor / n`-ish.
pub fn simplex(rng: &mut impl Rng, n: usize, floor: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..n).map(|_| floor + rng.random::<f64>()).collect();
    let s: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / s).collect()
}

/// Horizon in `1..=max_horizon`, alphabets in `2..=max_actions`.
pub fn spec(rng: &mut impl Rng, max_horizon: usize, max_actions: usize) -> ProcessSpec {
    ProcessSpec::new(
        rng.random_range(1..=max_horizon),
        rng.random_range(2..=max_actions),
        rng.random_range(2..=max_actions),
    )
    .unwrap()
}

pub fn trajectory(rng: &mut impl Rng, spec: &ProcessSpec) -> Trajectory {
    Trajectory {
        human: (0..spec.horizon)
            .map(|_| rng.random_range(0..spec.human_actions))
            .collect(),
        machine: (0..spec.horizon)
            .map(|_| rng.random_range(0..spec.machine_actions))
            .collect(),
    }
}

/// A tree holding random prefixes of `paths` random trajectories.
pub fn tree(rng: &mut impl Rng, spec: &ProcessSpec, paths: usize) -> PrefixTree {
    let mut tree = PrefixTree::new(*spec);
    for _ in 0..paths {
        let t = trajectory(rng, spec);
        let depth = rng.random_range(1..=spec.horizon);
        tree.insert(&t.human[..depth], &t.machine[..depth]).unwrap();
    }
    tree
}

fn blocks(rng: &mut impl Rng, blocks: usize, width: usize) -> Vec<f64> {
    (0..blocks)
        .flat_map(|_| simplex(rng, width, 0.05))
        .collect()
}

pub fn policy(rng: &mut impl Rng, spec: &ProcessSpec, paths: usize) -> StructuredPolicy {
    let tree = tree(rng, spec, paths);
    let nm = spec.machine_actions;
    let off = (0..spec.horizon).map(|_| simplex(rng, nm, 0.05)).collect();
    let nodes = (0..tree.len())
        .map(|id| {
            if tree.node(id).depth < spec.horizon {
                simplex(rng, nm, 0.05)
            } else {
                Vec::new()
            }
        })
        .collect();
    StructuredPolicy::new(*spec, tree, off, nodes).unwrap()
}

pub fn human(rng: &mut impl Rng, spec: &ProcessSpec, paths: usize) -> StructuredHuman {
    let tree = tree(rng, spec, paths);
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    let off = (0..spec.horizon).map(|_| blocks(rng, nm, nh)).collect();
    let nodes = (0..tree.len())
        .map(|id| {
            if tree.node(id).depth < spec.horizon {
                blocks(rng, nm, nh)
            } else {
                Vec::new()
            }
        })
        .collect();
    StructuredHuman::new(*spec, tree, off, nodes).unwrap()
}

/// One-step Markov human model.
pub fn markov_human(rng: &mut impl Rng, spec: &ProcessSpec) -> StructuredHuman {
    let (nh, nm) = (spec.human_actions, spec.machine_actions);
    StructuredHuman::markov(
        *spec,
        (0..spec.horizon).map(|_| blocks(rng, nm, nh)).collect(),
    )
    .unwrap()
}

pub fn step_tables(rng: &mut impl Rng, spec: &ProcessSpec, scale: f64) -> StepTables {
    let n = spec.horizon * spec.pairs();
    StepTables::from_values(
        *spec,
        (0..n)
            .map(|_| scale * (2.0 * rng.random::<f64>() - 1.0))
            .collect(),
    )
    .unwrap()
}

pub fn reward(rng: &mut impl Rng, spec: &ProcessSpec, paths: usize) -> RewardFunction {
    let mut r = RewardFunction::decomposable(step_tables(rng, spec, 1.0));
    for _ in 0..paths {
        r.paths
            .push((trajectory(rng, spec), rng.random_range(-1.0..2.0)));
    }
    r
}

/// Mixed features: decomposable, path-based and prefix indicators, split
/// between equality and inequality constraints, with random targets.
pub fn constraints(
    rng: &mut impl Rng,
    spec: &ProcessSpec,
    decomposable: usize,
    paths: usize,
    prefixes: usize,
    inequalities: usize,
) -> ConstraintSet {
    let mut features = Vec::new();
    for i in 0..decomposable {
        features.push(Feature::decomposable(
            format!("d{i}"),
            step_tables(rng, spec, 1.0),
        ));
    }
    for i in 0..paths {
        let c = rng.random_range(0.5..2.0);
        features
            .push(Feature::path_based(spec, format!("p{i}"), trajectory(rng, spec), c).unwrap());
    }
    for i in 0..prefixes {
        let t = trajectory(rng, spec);
        let depth = rng.random_range(1..=spec.horizon);
        features.push(
            Feature::prefix(
                spec,
                format!("x{i}"),
                t.human[..depth].to_vec(),
                t.machine[..depth].to_vec(),
                1.0,
            )
            .unwrap(),
        );
    }
    let n_ineq = inequalities.min(features.len());
    let split = features.len() - n_ineq;
    let mut all: Vec<Constraint> = features
        .into_iter()
        .map(|feature| Constraint {
            feature,
            target: rng.random_range(-0.5..0.5),
        })
        .collect();
    let inequality = all.split_off(split);
    ConstraintSet::build(all, inequality).unwrap()
}

/// Multipliers of magnitude up to `scale`, nonnegative on inequalities.
pub fn lambda(rng: &mut impl Rng, c: &ConstraintSet, scale: f64) -> Vec<f64> {
    (0..c.len())
        .map(|i| {
            let x = scale * (2.0 * rng.random::<f64>() - 1.0);
            if i >= c.equality.len() {
                x.abs()
            } else {
                x
            }
        })
        .collect()
}
