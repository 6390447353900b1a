//! Feature and reward functions over trajectories, and the moment
//! constraint sets assembled from them.

use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::process::{ProcessSpec, Trajectory};

/// Per-step tables `f_t(h, m)` for `t = 1..=T`, laid out `[t][pair(h, m)]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepTables {
    spec: ProcessSpec,
    values: Vec<f64>,
}

impl StepTables {
    pub fn zeros(spec: ProcessSpec) -> Self {
        StepTables {
            spec,
            values: vec![0.0; spec.horizon * spec.pairs()],
        }
    }

    /// `f(t, h, m)` with 1-based `t`.
    pub fn from_fn(spec: ProcessSpec, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut out = Self::zeros(spec);
        for t in 1..=spec.horizon {
            for h in 0..spec.human_actions {
                for m in 0..spec.machine_actions {
                    out.values[(t - 1) * spec.pairs() + spec.pair(h, m)] = f(t, h, m);
                }
            }
        }
        out
    }

    pub fn from_values(spec: ProcessSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.horizon * spec.pairs() {
            return Err(Error::Shape(format!(
                "decomposable table has {} entries, expected T*|H|*|M| = {}",
                values.len(),
                spec.horizon * spec.pairs()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("decomposable table".into()));
        }
        Ok(StepTables { spec, values })
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    #[inline]
    pub fn get(&self, t: usize, h: usize, m: usize) -> f64 {
        self.values[(t - 1) * self.spec.pairs() + self.spec.pair(h, m)]
    }

    /// The `|H| * |M|` block for step `t` (1-based).
    pub fn step(&self, t: usize) -> &[f64] {
        let n = self.spec.pairs();
        &self.values[(t - 1) * n..t * n]
    }

    pub fn eval(&self, traj: &Trajectory) -> f64 {
        traj.human
            .iter()
            .zip(&traj.machine)
            .enumerate()
            .map(|(k, (&h, &m))| self.get(k + 1, h, m))
            .sum()
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &StepTables, scale: f64) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += scale * b;
        }
    }
}

/// A term `1{(h^k, m^k) = prefix} * table(h_{k+1}, m_{k+1})`: a per-step
/// contribution that is active only below one history prefix. Path-based and
/// prefix indicators, and the history-dependent corrections of the step
/// constraint, all reduce to sums of these.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnchoredTerm {
    pub human: Vec<usize>,
    pub machine: Vec<usize>,
    /// Indexed by `pair(h, m)`.
    pub table: Vec<f64>,
    /// For indicator terms, the pair that continues the indicated path.
    #[serde(default)]
    pub support: Option<usize>,
}

impl AnchoredTerm {
    pub fn depth(&self) -> usize {
        self.human.len()
    }

    pub fn eval(&self, spec: &ProcessSpec, traj: &Trajectory) -> f64 {
        let k = self.depth();
        if !traj.starts_with(&self.human, &self.machine) {
            return 0.0;
        }
        self.table[spec.pair(traj.human[k], traj.machine[k])]
    }

    fn indicator(spec: &ProcessSpec, human: &[usize], machine: &[usize], coefficient: f64) -> Self {
        let k = human.len() - 1;
        let pair = spec.pair(human[k], machine[k]);
        let mut table = vec![0.0; spec.pairs()];
        table[pair] = coefficient;
        AnchoredTerm {
            human: human[..k].to_vec(),
            machine: machine[..k].to_vec(),
            table,
            support: Some(pair),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum FeatureForm {
    /// `sum_t f_t(h_t, m_t)`.
    Decomposable { tables: StepTables },
    /// `c * 1{(h^T, m^T) = path}`.
    PathBased { path: Trajectory, coefficient: f64 },
    /// `c * 1{(h^k, m^k) = prefix}` for a prefix of length `1..=T`.
    Prefix {
        human: Vec<usize>,
        machine: Vec<usize>,
        coefficient: f64,
    },
    /// A decomposable part plus anchored terms.
    Composite {
        decomposable: Option<StepTables>,
        anchored: Vec<AnchoredTerm>,
    },
    /// Arbitrary values indexed by [`Trajectory::index`]; small horizons only.
    Dense { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub form: FeatureForm,
    /// Marks the reward function when it is used as a feature.
    #[serde(default)]
    pub reward: bool,
}

impl Feature {
    pub fn decomposable(id: impl Into<String>, tables: StepTables) -> Self {
        Feature {
            id: id.into(),
            form: FeatureForm::Decomposable { tables },
            reward: false,
        }
    }

    pub fn path_based(
        spec: &ProcessSpec,
        id: impl Into<String>,
        path: Trajectory,
        coefficient: f64,
    ) -> Result<Self> {
        path.validate(spec)?;
        if !coefficient.is_finite() {
            return Err(Error::NonFinite("path coefficient".into()));
        }
        Ok(Feature {
            id: id.into(),
            form: FeatureForm::PathBased { path, coefficient },
            reward: false,
        })
    }

    pub fn prefix(
        spec: &ProcessSpec,
        id: impl Into<String>,
        human: Vec<usize>,
        machine: Vec<usize>,
        coefficient: f64,
    ) -> Result<Self> {
        if human.is_empty() || human.len() != machine.len() || human.len() > spec.horizon {
            return Err(Error::Shape(format!(
                "prefix of length {} is invalid",
                human.len()
            )));
        }
        if human.iter().any(|&h| h >= spec.human_actions)
            || machine.iter().any(|&m| m >= spec.machine_actions)
        {
            return Err(Error::Shape("prefix action out of range".into()));
        }
        if !coefficient.is_finite() {
            return Err(Error::NonFinite("prefix coefficient".into()));
        }
        Ok(Feature {
            id: id.into(),
            form: FeatureForm::Prefix {
                human,
                machine,
                coefficient,
            },
            reward: false,
        })
    }

    pub fn dense(spec: &ProcessSpec, id: impl Into<String>, values: Vec<f64>) -> Result<Self> {
        if values.len() as u128 != spec.trajectory_count() {
            return Err(Error::Shape(format!(
                "dense feature has {} values for {} trajectories",
                values.len(),
                spec.trajectory_count()
            )));
        }
        Ok(Feature {
            id: id.into(),
            form: FeatureForm::Dense { values },
            reward: false,
        })
    }

    /// Value on a trajectory already known to fit the spec.
    pub fn value(&self, spec: &ProcessSpec, traj: &Trajectory) -> f64 {
        match &self.form {
            FeatureForm::Decomposable { tables } => tables.eval(traj),
            FeatureForm::PathBased { path, coefficient } => {
                if traj == path {
                    *coefficient
                } else {
                    0.0
                }
            }
            FeatureForm::Prefix {
                human,
                machine,
                coefficient,
            } => {
                if traj.starts_with(human, machine) {
                    *coefficient
                } else {
                    0.0
                }
            }
            FeatureForm::Composite {
                decomposable,
                anchored,
            } => {
                decomposable.as_ref().map_or(0.0, |d| d.eval(traj))
                    + anchored.iter().map(|a| a.eval(spec, traj)).sum::<f64>()
            }
            FeatureForm::Dense { values } => values[traj.index(spec)],
        }
    }

    /// Checks that the feature's tables and supports fit `spec`.
    pub fn validate(&self, spec: &ProcessSpec) -> Result<()> {
        let check_tables = |t: &StepTables| {
            if t.spec() != *spec {
                Err(Error::Shape(format!(
                    "feature `{}` built for {:?}",
                    self.id,
                    t.spec()
                )))
            } else {
                Ok(())
            }
        };
        match &self.form {
            FeatureForm::Decomposable { tables } => check_tables(tables),
            FeatureForm::PathBased { path, .. } => path.validate(spec),
            FeatureForm::Prefix { human, machine, .. } => {
                Feature::prefix(spec, self.id.clone(), human.clone(), machine.clone(), 0.0)
                    .map(|_| ())
            }
            FeatureForm::Composite {
                decomposable,
                anchored,
            } => {
                if let Some(d) = decomposable {
                    check_tables(d)?;
                }
                for a in anchored {
                    if a.human.len() != a.machine.len()
                        || a.depth() >= spec.horizon
                        || a.table.len() != spec.pairs()
                    {
                        return Err(Error::Shape(format!(
                            "anchored term in `{}` has a bad shape",
                            self.id
                        )));
                    }
                }
                Ok(())
            }
            FeatureForm::Dense { values } => {
                if values.len() as u128 != spec.trajectory_count() {
                    Err(Error::Shape(format!(
                        "dense feature `{}` has the wrong length",
                        self.id
                    )))
                } else {
                    Ok(())
                }
            }
        }
    }

    pub fn is_dense(&self) -> bool {
        matches!(self.form, FeatureForm::Dense { .. })
    }

    /// Splits the feature into an optional decomposable part and anchored
    /// terms. Dense features have no such form.
    pub fn structured_parts(
        &self,
        spec: &ProcessSpec,
    ) -> Result<(Option<&StepTables>, Vec<AnchoredTerm>)> {
        Ok(match &self.form {
            FeatureForm::Decomposable { tables } => (Some(tables), Vec::new()),
            FeatureForm::PathBased { path, coefficient } => (
                None,
                vec![AnchoredTerm::indicator(
                    spec,
                    &path.human,
                    &path.machine,
                    *coefficient,
                )],
            ),
            FeatureForm::Prefix {
                human,
                machine,
                coefficient,
            } => (
                None,
                vec![AnchoredTerm::indicator(spec, human, machine, *coefficient)],
            ),
            FeatureForm::Composite {
                decomposable,
                anchored,
            } => (decomposable.as_ref(), anchored.clone()),
            FeatureForm::Dense { .. } => {
                return Err(Error::Unsupported(format!(
                    "dense feature `{}` cannot be used by the structured recursions",
                    self.id
                )))
            }
        })
    }
}

/// Evaluates a feature on a trajectory, validating shapes first.
pub fn eval_feature(spec: &ProcessSpec, feature: &Feature, traj: &Trajectory) -> Result<f64> {
    traj.validate(spec)?;
    feature.validate(spec)?;
    Ok(feature.value(spec, traj))
}

/// `r(h^T, m^T) = sum_t r^d_t(h_t, m_t) + sum_i c_i 1{(h^T, m^T) = path_i}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RewardFunction {
    pub decomposable: StepTables,
    #[serde(default)]
    pub paths: Vec<(Trajectory, f64)>,
}

impl RewardFunction {
    pub fn decomposable(tables: StepTables) -> Self {
        RewardFunction {
            decomposable: tables,
            paths: Vec::new(),
        }
    }

    pub fn path(spec: ProcessSpec, path: Trajectory, coefficient: f64) -> Result<Self> {
        path.validate(&spec)?;
        Ok(RewardFunction {
            decomposable: StepTables::zeros(spec),
            paths: vec![(path, coefficient)],
        })
    }

    pub fn spec(&self) -> ProcessSpec {
        self.decomposable.spec()
    }

    pub fn eval(&self, traj: &Trajectory) -> f64 {
        self.decomposable.eval(traj)
            + self
                .paths
                .iter()
                .filter(|(p, _)| p == traj)
                .map(|(_, c)| c)
                .sum::<f64>()
    }

    pub fn is_decomposable(&self) -> bool {
        self.paths.is_empty()
    }

    /// Path parts as anchored terms at depth `T - 1`.
    pub fn anchored_terms(&self) -> Vec<AnchoredTerm> {
        let spec = self.spec();
        self.paths
            .iter()
            .map(|(p, c)| AnchoredTerm::indicator(&spec, &p.human, &p.machine, *c))
            .collect()
    }

    /// The reward as a feature (for inclusion in the equality set).
    pub fn as_feature(&self, id: impl Into<String>) -> Feature {
        let form = if self.paths.is_empty() {
            FeatureForm::Decomposable {
                tables: self.decomposable.clone(),
            }
        } else {
            FeatureForm::Composite {
                decomposable: Some(self.decomposable.clone()),
                anchored: self.anchored_terms(),
            }
        };
        Feature {
            id: id.into(),
            form,
            reward: true,
        }
    }
}

/// Evaluates both parts of a reward on a validated trajectory.
pub fn reward_eval(reward: &RewardFunction, traj: &Trajectory) -> Result<f64> {
    traj.validate(&reward.spec())?;
    Ok(reward.eval(traj))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub feature: Feature,
    pub target: f64,
}

/// Equality constraints `E[f] = c_f` and inequality constraints
/// `E[g] >= c_g`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConstraintSet {
    pub equality: Vec<Constraint>,
    pub inequality: Vec<Constraint>,
    #[serde(skip)]
    warnings: Vec<String>,
}

impl ConstraintSet {
    /// Assembles a set, rejecting duplicate ids and non-finite moments.
    pub fn build(equality: Vec<Constraint>, inequality: Vec<Constraint>) -> Result<Self> {
        let mut seen = HashSet::new();
        for c in equality.iter().chain(&inequality) {
            if !seen.insert(c.feature.id.clone()) {
                return Err(Error::DuplicateId(c.feature.id.clone()));
            }
            if !c.target.is_finite() {
                return Err(Error::NonFinite(format!("moment of `{}`", c.feature.id)));
            }
        }
        let mut warnings = Vec::new();
        if !equality.iter().any(|c| c.feature.reward) {
            warnings.push("reward function is not in the equality feature set".to_string());
        }
        Ok(ConstraintSet {
            equality,
            inequality,
            warnings,
        })
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn includes_reward(&self) -> bool {
        self.equality.iter().any(|c| c.feature.reward)
    }

    pub fn len(&self) -> usize {
        self.equality.len() + self.inequality.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Equality constraints first, then inequality constraints.
    pub fn iter(&self) -> impl Iterator<Item = &Constraint> {
        self.equality.iter().chain(&self.inequality)
    }

    pub fn features(&self) -> impl Iterator<Item = &Feature> {
        self.iter().map(|c| &c.feature)
    }

    pub fn targets(&self) -> Vec<f64> {
        self.iter().map(|c| c.target).collect()
    }

    pub fn validate(&self, spec: &ProcessSpec) -> Result<()> {
        self.features().try_for_each(|f| f.validate(spec))
    }

    /// Replaces every target, keeping the order of [`ConstraintSet::iter`].
    pub fn set_targets(&mut self, targets: &[f64]) {
        for (c, &t) in self
            .equality
            .iter_mut()
            .chain(self.inequality.iter_mut())
            .zip(targets)
        {
            c.target = t;
        }
    }
}

/// `f_t(h, m) = 1{h = m}`: the number of times the human follows the machine.
pub fn follow_feature(spec: ProcessSpec, id: impl Into<String>) -> Feature {
    weighted_follow_feature(spec, id, 1, 1.0)
}

/// `f_t(h, m) = (1{t mod p = 0} + w 1{t mod p != 0}) 1{h = m}`.
pub fn weighted_follow_feature(
    spec: ProcessSpec,
    id: impl Into<String>,
    period: usize,
    off_weight: f64,
) -> Feature {
    let tables = StepTables::from_fn(spec, |t, h, m| {
        let w = if t % period == 0 { 1.0 } else { off_weight };
        if h == m {
            w
        } else {
            0.0
        }
    });
    Feature::decomposable(id, tables)
}

/// Reward that pays for `h_t = target` when `t mod p = 0` and for
/// `h_t != target` otherwise.
pub fn periodic_target_reward(spec: ProcessSpec, period: usize, target: usize) -> RewardFunction {
    RewardFunction::decomposable(StepTables::from_fn(spec, |t, h, _| {
        let on_beat = t % period == 0;
        ((h == target) == on_beat) as u8 as f64
    }))
}

/// Indicators of every prefix `(h^t, m^t)`, `t = 1..=T`, of a path.
pub fn prefix_features(
    spec: &ProcessSpec,
    id: &str,
    path: &Trajectory,
    coefficient: f64,
) -> Result<Vec<Feature>> {
    path.validate(spec)?;
    (1..=spec.horizon)
        .map(|t| {
            Feature::prefix(
                spec,
                format!("{id}/{t}"),
                path.human[..t].to_vec(),
                path.machine[..t].to_vec(),
                coefficient,
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn spec(t: usize, h: usize, m: usize) -> ProcessSpec {
        ProcessSpec::new(t, h, m).unwrap()
    }

    #[test]
    fn path_feature_fires_only_on_its_path() {
        let s = spec(3, 2, 2);
        let path = Trajectory::new(&s, vec![0, 1, 1], vec![1, 1, 0]).unwrap();
        let f = Feature::path_based(&s, "p", path.clone(), 2.0).unwrap();
        assert_eq!(eval_feature(&s, &f, &path).unwrap(), 2.0);
        let mut other = path.clone();
        other.machine[2] = 1;
        assert_eq!(eval_feature(&s, &f, &other).unwrap(), 0.0);
    }

    #[test]
    fn follow_counts_matching_steps() {
        let s = spec(30, 6, 6);
        let f = follow_feature(s, "follow");
        let machine: Vec<usize> = (0..30).map(|t| t % 6).collect();
        let mut human: Vec<usize> = machine.iter().map(|m| (m + 1) % 6).collect();
        for t in [2, 9, 17, 25] {
            human[t] = machine[t];
        }
        let traj = Trajectory::new(&s, human, machine).unwrap();
        assert_eq!(eval_feature(&s, &f, &traj).unwrap(), 4.0);
    }

    #[test]
    fn periodic_reward_values() {
        let s = spec(30, 6, 6);
        let r = periodic_target_reward(s, 5, 0);
        let best: Vec<usize> = (1..=30).map(|t| if t % 5 == 0 { 0 } else { 3 }).collect();
        let traj = Trajectory::new(&s, best, vec![0; 30]).unwrap();
        assert_eq!(reward_eval(&r, &traj).unwrap(), 30.0);
        let always_target = Trajectory::new(&s, vec![0; 30], vec![2; 30]).unwrap();
        assert_eq!(reward_eval(&r, &always_target).unwrap(), 6.0);
    }

    #[test]
    fn path_reward_part_adds_to_decomposable_part() {
        let s = spec(2, 2, 2);
        let path = Trajectory::new(&s, vec![1, 0], vec![0, 1]).unwrap();
        let r = RewardFunction::path(s, path.clone(), 1.0).unwrap();
        assert_eq!(reward_eval(&r, &path).unwrap(), 1.0);
        let feature = r.as_feature("r");
        assert!(feature.reward);
        assert_eq!(feature.value(&s, &path), 1.0);
    }

    #[test]
    fn weighted_follow_with_unit_weight_is_follow() {
        let s = spec(12, 3, 3);
        let a = weighted_follow_feature(s, "a", 5, 1.0);
        let b = follow_feature(s, "b");
        assert_eq!(a.form, b.form);
    }

    #[test]
    fn constraint_set_checks_ids_and_warns_without_reward() {
        let s = spec(2, 2, 2);
        let empty = ConstraintSet::build(vec![], vec![]).unwrap();
        assert!(empty.is_empty());
        assert_eq!(empty.warnings().len(), 1);

        let r = periodic_target_reward(s, 5, 0);
        let eq = vec![
            Constraint {
                feature: r.as_feature("reward"),
                target: 1.0,
            },
            Constraint {
                feature: follow_feature(s, "f1"),
                target: 0.5,
            },
            Constraint {
                feature: weighted_follow_feature(s, "f2", 5, 0.25),
                target: 0.2,
            },
        ];
        let set = ConstraintSet::build(eq.clone(), vec![]).unwrap();
        assert_eq!(set.equality.len(), 3);
        assert!(set.includes_reward());
        assert!(set.warnings().is_empty());

        let dup = ConstraintSet::build(eq.clone(), vec![eq[1].clone()]);
        assert!(matches!(dup, Err(Error::DuplicateId(id)) if id == "f1"));
    }

    #[test]
    fn shape_errors_are_reported() {
        let s = spec(2, 2, 2);
        let other = spec(3, 2, 2);
        let f = follow_feature(other, "f");
        let traj = Trajectory::new(&s, vec![0, 0], vec![0, 0]).unwrap();
        assert!(eval_feature(&s, &f, &traj).is_err());
        assert!(StepTables::from_values(s, vec![0.0; 3]).is_err());
        assert!(Feature::dense(&s, "d", vec![0.0; 3]).is_err());
    }

    #[test]
    fn prefix_features_cover_every_length() {
        let s = spec(3, 2, 2);
        let path = Trajectory::new(&s, vec![0, 1, 1], vec![1, 1, 0]).unwrap();
        let fs = prefix_features(&s, "p", &path, 1.0).unwrap();
        assert_eq!(fs.len(), 3);
        let mut partial = path.clone();
        partial.human[2] = 0;
        let values: Vec<f64> = fs.iter().map(|f| f.value(&s, &partial)).collect();
        assert_eq!(values, vec![1.0, 1.0, 0.0]);
    }

    fn all_trajectories(s: &ProcessSpec) -> Vec<Trajectory> {
        (0..s.trajectory_count() as usize)
            .map(|i| Trajectory::from_index(s, i))
            .collect()
    }

    proptest! {
        #[test]
        fn decomposable_features_are_local(seed in 0u64..1000, t in 1usize..=3, h2 in 0usize..3, m2 in 0usize..3) {
            let s = spec(3, 3, 3);
            let tables = StepTables::from_fn(s, |tt, h, m| ((seed as usize * 31 + tt * 7 + h * 3 + m) % 11) as f64 - 5.0);
            let f = Feature::decomposable("f", tables.clone());
            let a = Trajectory::from_index(&s, (seed as usize * 97) % s.trajectory_count() as usize);
            let mut b = a.clone();
            b.human[t - 1] = h2;
            b.machine[t - 1] = m2;
            let diff = f.value(&s, &b) - f.value(&s, &a);
            let expected = tables.get(t, h2, m2) - tables.get(t, a.human[t - 1], a.machine[t - 1]);
            prop_assert!((diff - expected).abs() < 1e-12);
        }

        #[test]
        fn path_indicator_sums_to_one(idx in 0usize..216) {
            let s = spec(3, 2, 3);
            let path = Trajectory::from_index(&s, idx);
            let f = Feature::path_based(&s, "p", path, 1.0).unwrap();
            let total: f64 = all_trajectories(&s).iter().map(|tr| f.value(&s, tr)).sum();
            prop_assert_eq!(total, 1.0);
        }
    }
}
