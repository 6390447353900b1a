//! The interaction process: alphabets, trajectories, causally conditioned
//! tables in dense form, and the exact joint built from a human table and a
//! machine table.
//!
//! Turn order within a step `t` is machine first, then human: the machine's
//! action `m_t` depends on `(h^{t-1}, m^{t-1})`, the human's action `h_t` on
//! `(h^{t-1}, m^t)`.
//!
//! Histories of depth `k` (the first `k` completed steps) are packed into a
//! mixed-radix integer with one digit per step, digit value `h * |M| + m`,
//! most significant digit first. Dense tables are only intended for small
//! horizons; every dense entry point checks the joint-size cap.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::logspace::{ln0, xlogx};

/// Default bound on `(|H| |M|)^T` for anything that materializes every history.
pub const DEFAULT_JOINT_CAP: u64 = 10_000_000;

const NORMALIZATION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ProcessSpec {
    pub horizon: usize,
    pub human_actions: usize,
    pub machine_actions: usize,
}

impl ProcessSpec {
    pub fn new(horizon: usize, human_actions: usize, machine_actions: usize) -> Result<Self> {
        let spec = ProcessSpec {
            horizon,
            human_actions,
            machine_actions,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.human_actions == 0 || self.machine_actions == 0 {
            return Err(Error::InvalidSpec(format!(
                "horizon, |H| and |M| must all be positive (got T={}, |H|={}, |M|={})",
                self.horizon, self.human_actions, self.machine_actions
            )));
        }
        Ok(())
    }

    /// Number of `(h, m)` pairs per step.
    #[inline]
    pub fn pairs(&self) -> usize {
        self.human_actions * self.machine_actions
    }

    /// Index of `(h, m)` in per-step feature tables.
    #[inline]
    pub fn pair(&self, h: usize, m: usize) -> usize {
        h * self.machine_actions + m
    }

    #[inline]
    pub fn unpair(&self, pair: usize) -> (usize, usize) {
        (pair / self.machine_actions, pair % self.machine_actions)
    }

    /// Index of `P(h | ., m)` inside a human conditional block: vectors over
    /// `h` are contiguous for each `m`.
    #[inline]
    pub fn cond(&self, m: usize, h: usize) -> usize {
        m * self.human_actions + h
    }

    /// `(|H||M|)^depth`, or `None` on overflow.
    pub fn histories_at(&self, depth: usize) -> Option<usize> {
        let mut n: usize = 1;
        for _ in 0..depth {
            n = n.checked_mul(self.pairs())?;
        }
        Some(n)
    }

    /// Total number of trajectories `(|H||M|)^T` as an exact integer.
    pub fn trajectory_count(&self) -> u128 {
        let mut n: u128 = 1;
        for _ in 0..self.horizon {
            n = n.saturating_mul(self.pairs() as u128);
        }
        n
    }

    /// Fails with [`Error::CapExceeded`] when dense materialization is too large.
    pub fn check_cap(&self, cap: u64) -> Result<usize> {
        let count = self.trajectory_count();
        if count > cap as u128 {
            return Err(Error::CapExceeded { count, cap });
        }
        Ok(count as usize)
    }

    pub fn decode_history(&self, depth: usize, mut index: usize) -> (Vec<usize>, Vec<usize>) {
        let mut human = vec![0; depth];
        let mut machine = vec![0; depth];
        for k in (0..depth).rev() {
            let (h, m) = self.unpair(index % self.pairs());
            human[k] = h;
            machine[k] = m;
            index /= self.pairs();
        }
        (human, machine)
    }

    pub fn encode_history(&self, human: &[usize], machine: &[usize]) -> usize {
        human
            .iter()
            .zip(machine)
            .fold(0, |acc, (&h, &m)| acc * self.pairs() + self.pair(h, m))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Trajectory {
    pub human: Vec<usize>,
    pub machine: Vec<usize>,
}

impl Trajectory {
    pub fn new(spec: &ProcessSpec, human: Vec<usize>, machine: Vec<usize>) -> Result<Self> {
        let traj = Trajectory { human, machine };
        traj.validate(spec)?;
        Ok(traj)
    }

    pub fn validate(&self, spec: &ProcessSpec) -> Result<()> {
        if self.human.len() != spec.horizon || self.machine.len() != spec.horizon {
            return Err(Error::Shape(format!(
                "trajectory lengths ({}, {}) differ from horizon {}",
                self.human.len(),
                self.machine.len(),
                spec.horizon
            )));
        }
        if let Some(&h) = self.human.iter().find(|&&h| h >= spec.human_actions) {
            return Err(Error::Shape(format!("human action {h} out of range")));
        }
        if let Some(&m) = self.machine.iter().find(|&&m| m >= spec.machine_actions) {
            return Err(Error::Shape(format!("machine action {m} out of range")));
        }
        Ok(())
    }

    pub fn horizon(&self) -> usize {
        self.human.len()
    }

    /// Mixed-radix index of the full trajectory (lexicographic over steps).
    pub fn index(&self, spec: &ProcessSpec) -> usize {
        spec.encode_history(&self.human, &self.machine)
    }

    pub fn from_index(spec: &ProcessSpec, index: usize) -> Self {
        let (human, machine) = spec.decode_history(spec.horizon, index);
        Trajectory { human, machine }
    }

    /// Whether the first `len` steps of `self` equal `(human, machine)`.
    pub fn starts_with(&self, human: &[usize], machine: &[usize]) -> bool {
        human.len() <= self.human.len()
            && self.human[..human.len()] == *human
            && self.machine[..machine.len()] == *machine
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Human,
    Machine,
}

/// Conditional distributions of the human given `(h^{t-1}, m^t)`.
pub trait HumanModel: Sync {
    fn spec(&self) -> ProcessSpec;
    /// Writes `P(. | h^{t-1}, m^t)` into `out` (length `|H|`), where
    /// `human.len() + 1 == machine.len() == t`.
    fn human_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]);
}

/// Conditional distributions of the machine given `(h^{t-1}, m^{t-1})`.
pub trait MachinePolicy: Sync {
    fn spec(&self) -> ProcessSpec;
    /// Writes `Q(. | h^{t-1}, m^{t-1})` into `out` (length `|M|`).
    fn machine_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]);
}

/// A dense causally conditioned table covering every history.
///
/// Human step `t` (0-based `k = t - 1`) stores `(|H||M|)^k * |M| * |H|`
/// entries laid out `[history][m_t][h_t]`; machine step `k` stores
/// `(|H||M|)^k * |M|` entries laid out `[history][m_t]`.
#[derive(Clone, Debug, PartialEq)]
pub struct CausalTable {
    spec: ProcessSpec,
    side: Side,
    steps: Vec<Vec<f64>>,
}

impl CausalTable {
    fn block(spec: &ProcessSpec, side: Side) -> usize {
        match side {
            Side::Human => spec.pairs(),
            Side::Machine => spec.machine_actions,
        }
    }

    fn width(spec: &ProcessSpec, side: Side) -> usize {
        match side {
            Side::Human => spec.human_actions,
            Side::Machine => spec.machine_actions,
        }
    }

    /// Builds a table from raw step vectors, checking shape only.
    pub fn from_steps(spec: ProcessSpec, side: Side, steps: Vec<Vec<f64>>) -> Result<Self> {
        spec.validate()?;
        if steps.len() != spec.horizon {
            return Err(Error::Shape(format!(
                "expected {} steps, got {}",
                spec.horizon,
                steps.len()
            )));
        }
        for (k, step) in steps.iter().enumerate() {
            let expected = spec
                .histories_at(k)
                .and_then(|n| n.checked_mul(Self::block(&spec, side)))
                .ok_or_else(|| Error::Shape("history count overflows".into()))?;
            if step.len() != expected {
                return Err(Error::Shape(format!(
                    "step {} has {} entries, expected {expected}",
                    k + 1,
                    step.len()
                )));
            }
        }
        Ok(CausalTable { spec, side, steps })
    }

    /// Builds a table by calling `f(t, h_hist, m_hist)` for every history.
    /// For the human side `m_hist` already contains `m_t`.
    pub fn from_fn<F>(spec: ProcessSpec, side: Side, cap: u64, mut f: F) -> Result<Self>
    where
        F: FnMut(usize, &[usize], &[usize]) -> Vec<f64>,
    {
        spec.check_cap(cap)?;
        let width = Self::width(&spec, side);
        let mut steps = Vec::with_capacity(spec.horizon);
        for k in 0..spec.horizon {
            let n_hist = spec.histories_at(k).expect("under cap");
            let mut step = Vec::with_capacity(n_hist * Self::block(&spec, side));
            for idx in 0..n_hist {
                let (h_hist, mut m_hist) = spec.decode_history(k, idx);
                match side {
                    Side::Machine => step.extend(check_width(f(k + 1, &h_hist, &m_hist), width)?),
                    Side::Human => {
                        for m in 0..spec.machine_actions {
                            m_hist.push(m);
                            step.extend(check_width(f(k + 1, &h_hist, &m_hist), width)?);
                            m_hist.pop();
                        }
                    }
                }
            }
            steps.push(step);
        }
        Ok(CausalTable { spec, side, steps })
    }

    pub fn uniform(spec: ProcessSpec, side: Side, cap: u64) -> Result<Self> {
        let width = Self::width(&spec, side);
        Self::from_fn(spec, side, cap, |_, _, _| vec![1.0 / width as f64; width])
    }

    /// Densifies any human model.
    pub fn from_human<H: HumanModel + ?Sized>(model: &H, cap: u64) -> Result<Self> {
        let spec = model.spec();
        let mut buf = vec![0.0; spec.human_actions];
        Self::from_fn(spec, Side::Human, cap, |_, h, m| {
            model.human_conditional(h, m, &mut buf);
            buf.clone()
        })
    }

    /// Densifies any machine policy.
    pub fn from_machine<Q: MachinePolicy + ?Sized>(policy: &Q, cap: u64) -> Result<Self> {
        let spec = policy.spec();
        let mut buf = vec![0.0; spec.machine_actions];
        Self::from_fn(spec, Side::Machine, cap, |_, h, m| {
            policy.machine_conditional(h, m, &mut buf);
            buf.clone()
        })
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn side(&self) -> Side {
        self.side
    }

    pub fn steps(&self) -> &[Vec<f64>] {
        &self.steps
    }

    pub fn steps_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.steps
    }

    /// Conditional vector at step `t` (1-based) for a packed history; for the
    /// human side `m` selects `m_t`, for the machine side it is ignored.
    pub fn probs(&self, t: usize, history: usize, m: usize) -> &[f64] {
        let k = t - 1;
        match self.side {
            Side::Human => {
                let start = history * self.spec.pairs() + m * self.spec.human_actions;
                &self.steps[k][start..start + self.spec.human_actions]
            }
            Side::Machine => {
                let start = history * self.spec.machine_actions;
                &self.steps[k][start..start + self.spec.machine_actions]
            }
        }
    }

    /// Fails unless [`validate_causal`] reports no violation.
    pub fn ensure_valid(&self) -> Result<()> {
        match validate_causal(self).first() {
            None => Ok(()),
            Some(v) => Err(Error::Unnormalized(v.to_string())),
        }
    }

    fn ensure_side(&self, side: Side) -> Result<()> {
        if self.side != side {
            return Err(Error::SpecMismatch(format!(
                "expected a {side:?} table, got {:?}",
                self.side
            )));
        }
        Ok(())
    }
}

fn check_width(v: Vec<f64>, width: usize) -> Result<Vec<f64>> {
    if v.len() != width {
        return Err(Error::Shape(format!(
            "conditional has {} entries, expected {width}",
            v.len()
        )));
    }
    Ok(v)
}

impl HumanModel for CausalTable {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn human_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        debug_assert_eq!(self.side, Side::Human);
        let t = machine.len();
        let hist = self.spec.encode_history(human, &machine[..t - 1]);
        out.copy_from_slice(self.probs(t, hist, machine[t - 1]));
    }
}

impl MachinePolicy for CausalTable {
    fn spec(&self) -> ProcessSpec {
        self.spec
    }

    fn machine_conditional(&self, human: &[usize], machine: &[usize], out: &mut [f64]) {
        debug_assert_eq!(self.side, Side::Machine);
        let t = machine.len() + 1;
        let hist = self.spec.encode_history(human, machine);
        out.copy_from_slice(self.probs(t, hist, 0));
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Defect {
    Normalization { sum: f64 },
    Negative { action: usize, value: f64 },
    NonFinite { action: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub t: usize,
    /// Chronological history `m_1, h_1, ..., m_t` (human side) or
    /// `m_1, h_1, ..., h_{t-1}` (machine side).
    pub history: Vec<usize>,
    pub defect: Defect,
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "t={} history={:?}: {:?}",
            self.t, self.history, self.defect
        )
    }
}

fn chronological(human: &[usize], machine: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(human.len() + machine.len());
    for (k, &m) in machine.iter().enumerate() {
        out.push(m);
        if let Some(&h) = human.get(k) {
            out.push(h);
        }
    }
    out
}

fn split_chronological(history: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let machine = history.iter().step_by(2).copied().collect();
    let human = history.iter().skip(1).step_by(2).copied().collect();
    (human, machine)
}

/// Lists every conditional vector that is negative, non-finite, or does not
/// sum to one within `1e-12`. Never fails.
pub fn validate_causal(table: &CausalTable) -> Vec<Violation> {
    let spec = table.spec;
    let width = CausalTable::width(&spec, table.side);
    let mut out = Vec::new();
    for (k, step) in table.steps.iter().enumerate() {
        for (chunk_idx, probs) in step.chunks(width).enumerate() {
            let mut defects = Vec::new();
            for (a, &p) in probs.iter().enumerate() {
                if !p.is_finite() {
                    defects.push(Defect::NonFinite { action: a });
                } else if p < 0.0 {
                    defects.push(Defect::Negative {
                        action: a,
                        value: p,
                    });
                }
            }
            let sum: f64 = probs.iter().sum();
            if defects.is_empty() && (sum - 1.0).abs() > NORMALIZATION_TOL {
                defects.push(Defect::Normalization { sum });
            }
            if defects.is_empty() {
                continue;
            }
            let (hist_idx, m_t) = match table.side {
                Side::Human => (
                    chunk_idx / spec.machine_actions,
                    Some(chunk_idx % spec.machine_actions),
                ),
                Side::Machine => (chunk_idx, None),
            };
            let (h_hist, mut m_hist) = spec.decode_history(k, hist_idx);
            m_hist.extend(m_t);
            let history = chronological(&h_hist, &m_hist);
            out.extend(defects.into_iter().map(|defect| Violation {
                t: k + 1,
                history: history.clone(),
                defect,
            }));
        }
    }
    out
}

/// Exact joint distribution over all trajectories, indexed by
/// [`Trajectory::index`].
#[derive(Clone, Debug)]
pub struct JointDistribution {
    spec: ProcessSpec,
    mass: Vec<f64>,
}

impl JointDistribution {
    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn masses(&self) -> &[f64] {
        &self.mass
    }

    pub fn mass(&self, traj: &Trajectory) -> f64 {
        self.mass[traj.index(&self.spec)]
    }

    pub fn iter(&self) -> impl Iterator<Item = (Trajectory, f64)> + '_ {
        self.mass
            .iter()
            .enumerate()
            .map(|(i, &p)| (Trajectory::from_index(&self.spec, i), p))
    }

    pub fn total(&self) -> f64 {
        self.mass.iter().sum()
    }
}

fn check_pair(human: &CausalTable, machine: &CausalTable, cap: u64) -> Result<ProcessSpec> {
    human.ensure_side(Side::Human)?;
    machine.ensure_side(Side::Machine)?;
    if human.spec != machine.spec {
        return Err(Error::SpecMismatch(format!(
            "human table {:?} vs machine table {:?}",
            human.spec, machine.spec
        )));
    }
    human.spec.check_cap(cap)?;
    human.ensure_valid()?;
    machine.ensure_valid()?;
    Ok(human.spec)
}

/// Per-depth log-probabilities of every history prefix under `PQ`.
fn prefix_log_masses(
    spec: &ProcessSpec,
    human: &CausalTable,
    machine: &CausalTable,
) -> Vec<Vec<f64>> {
    let pairs = spec.pairs();
    let mut levels = Vec::with_capacity(spec.horizon + 1);
    levels.push(vec![0.0]);
    for k in 0..spec.horizon {
        let cur = &levels[k];
        let mut next = vec![f64::NEG_INFINITY; cur.len() * pairs];
        for (hist, &lp) in cur.iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let q = machine.probs(k + 1, hist, 0);
            for m in 0..spec.machine_actions {
                let lq = ln0(q[m]);
                let p = human.probs(k + 1, hist, m);
                for h in 0..spec.human_actions {
                    next[hist * pairs + spec.pair(h, m)] = lp + lq + ln0(p[h]);
                }
            }
        }
        levels.push(next);
    }
    levels
}

/// `PQ(h^T, m^T) = prod_t P(h_t | h^{t-1}, m^t) * prod_t Q(m_t | h^{t-1}, m^{t-1})`,
/// accumulated in log space.
pub fn factorize_joint(
    human: &CausalTable,
    machine: &CausalTable,
    cap: u64,
) -> Result<JointDistribution> {
    let spec = check_pair(human, machine, cap)?;
    let mut levels = prefix_log_masses(&spec, human, machine);
    let last = levels.pop().expect("horizon >= 1");
    let mass = last.into_iter().map(f64::exp).collect();
    Ok(JointDistribution { spec, mass })
}

/// Causally conditioned entropy of one side in nats, computed by the chain
/// rule `sum_t H(X_t | history)`.
pub fn causal_entropy(
    side: Side,
    human: &CausalTable,
    machine: &CausalTable,
    cap: u64,
) -> Result<f64> {
    let spec = check_pair(human, machine, cap)?;
    let levels = prefix_log_masses(&spec, human, machine);
    let mut total = 0.0;
    for k in 0..spec.horizon {
        for (hist, &lp) in levels[k].iter().enumerate() {
            if lp == f64::NEG_INFINITY {
                continue;
            }
            let w = lp.exp();
            let q = machine.probs(k + 1, hist, 0);
            match side {
                Side::Machine => total -= w * q.iter().map(|&p| xlogx(p)).sum::<f64>(),
                Side::Human => {
                    for m in 0..spec.machine_actions {
                        let p = human.probs(k + 1, hist, m);
                        total -= w * q[m] * p.iter().map(|&x| xlogx(x)).sum::<f64>();
                    }
                }
            }
        }
    }
    Ok(total)
}

/// `E_{PQ}[f(H^T, M^T)]` by summing over the exact joint.
pub fn expect_function<F>(human: &CausalTable, machine: &CausalTable, cap: u64, f: F) -> Result<f64>
where
    F: Fn(&Trajectory) -> f64,
{
    let joint = factorize_joint(human, machine, cap)?;
    Ok(joint
        .iter()
        .filter(|(_, p)| *p > 0.0)
        .map(|(traj, p)| p * f(&traj))
        .sum())
}

#[derive(Serialize, Deserialize)]
struct TableEntry {
    t: usize,
    history: Vec<usize>,
    probs: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct TableDoc {
    spec: ProcessSpec,
    side: Side,
    entries: Vec<TableEntry>,
}

impl CausalTable {
    /// Serializes to `{spec, side, entries: [{t, history, probs}]}` where
    /// `history` is chronological (`m_1, h_1, m_2, ...`).
    pub fn to_json(&self) -> Result<String> {
        let width = Self::width(&self.spec, self.side);
        let mut entries = Vec::new();
        for (k, step) in self.steps.iter().enumerate() {
            for (chunk_idx, probs) in step.chunks(width).enumerate() {
                let (hist_idx, m_t) = match self.side {
                    Side::Human => (
                        chunk_idx / self.spec.machine_actions,
                        Some(chunk_idx % self.spec.machine_actions),
                    ),
                    Side::Machine => (chunk_idx, None),
                };
                let (h_hist, mut m_hist) = self.spec.decode_history(k, hist_idx);
                m_hist.extend(m_t);
                entries.push(TableEntry {
                    t: k + 1,
                    history: chronological(&h_hist, &m_hist),
                    probs: probs.to_vec(),
                });
            }
        }
        Ok(serde_json::to_string(&TableDoc {
            spec: self.spec,
            side: self.side,
            entries,
        })?)
    }

    /// Parses the JSON schema of [`CausalTable::to_json`]. Every history must
    /// be present exactly once; normalization is not enforced here.
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: TableDoc = serde_json::from_str(text)?;
        let spec = doc.spec;
        spec.check_cap(DEFAULT_JOINT_CAP)?;
        let side = doc.side;
        let width = Self::width(&spec, side);
        let mut steps: Vec<Vec<f64>> = (0..spec.horizon)
            .map(|k| vec![f64::NAN; spec.histories_at(k).unwrap() * Self::block(&spec, side)])
            .collect();
        for e in doc.entries {
            if e.t == 0 || e.t > spec.horizon {
                return Err(Error::Shape(format!("entry step {} out of range", e.t)));
            }
            let expected_len = match side {
                Side::Human => 2 * e.t - 1,
                Side::Machine => 2 * (e.t - 1),
            };
            if e.history.len() != expected_len || e.probs.len() != width {
                return Err(Error::Shape(format!("malformed entry at t={}", e.t)));
            }
            let (h_hist, m_hist) = split_chronological(&e.history);
            if h_hist.iter().any(|&h| h >= spec.human_actions)
                || m_hist.iter().any(|&m| m >= spec.machine_actions)
            {
                return Err(Error::Shape(format!(
                    "history action out of range at t={}",
                    e.t
                )));
            }
            let k = e.t - 1;
            let hist = spec.encode_history(&h_hist[..k], &m_hist[..k]);
            let start = match side {
                Side::Human => hist * spec.pairs() + m_hist[k] * spec.human_actions,
                Side::Machine => hist * spec.machine_actions,
            };
            steps[k][start..start + width].copy_from_slice(&e.probs);
        }
        if steps.iter().flatten().any(|p| p.is_nan()) {
            return Err(Error::Shape(
                "table JSON does not cover every history".into(),
            ));
        }
        Self::from_steps(spec, side, steps)
    }
}
