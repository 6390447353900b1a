//! Time-indexed tabular Q-learning over a finite memory window, with softmax
//! action selection. The baseline plays against the LCA human.

use std::collections::HashMap;
use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::RewardFunction;
use crate::lca::{lca_choose, lca_step, LcaParams};
use crate::logspace::softmax_into;
use crate::process::ProcessSpec;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QlParams {
    pub learning_rate: f64,
    pub discount: f64,
    /// Softmax inverse temperature `c`.
    pub inverse_temperature: f64,
    /// Number of past `(h, m)` pairs in the state.
    pub memory: usize,
}

impl Default for QlParams {
    fn default() -> Self {
        QlParams {
            learning_rate: 0.1,
            discount: 0.8,
            inverse_temperature: 10.0,
            memory: 1,
        }
    }
}

impl QlParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::Invalid("Q-learning rate must lie in (0, 1]".into()));
        }
        if !(0.0..=1.0).contains(&self.discount) {
            return Err(Error::Invalid(
                "Q-learning discount must lie in [0, 1]".into(),
            ));
        }
        if !(self.inverse_temperature > 0.0 && self.inverse_temperature.is_finite()) {
            return Err(Error::Invalid(
                "softmax inverse temperature must be positive".into(),
            ));
        }
        if self.memory == 0 {
            return Err(Error::Invalid(
                "Q-learning memory must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// The last `memory` pairs as `pair(h, m)` codes, oldest first. Positions
/// before the start of the episode hold the null code `pairs()`.
pub type Window = Vec<usize>;

/// Window ending just before step `t` (1-based) of a partial episode.
pub fn window(spec: &ProcessSpec, memory: usize, human: &[usize], machine: &[usize]) -> Window {
    let done = human.len();
    (0..memory)
        .map(|i| {
            let back = memory - i;
            if back > done {
                spec.pairs()
            } else {
                spec.pair(human[done - back], machine[done - back])
            }
        })
        .collect()
}

/// Q values keyed by `(window, t)`; unvisited entries read as zero.
#[derive(Clone, Debug, PartialEq)]
pub struct QTable {
    spec: ProcessSpec,
    memory: usize,
    values: HashMap<(Window, usize), Vec<f64>>,
    zeros: Vec<f64>,
}

impl QTable {
    pub fn new(spec: ProcessSpec, memory: usize) -> Self {
        QTable {
            spec,
            memory,
            values: HashMap::new(),
            zeros: vec![0.0; spec.machine_actions],
        }
    }

    pub fn spec(&self) -> ProcessSpec {
        self.spec
    }

    pub fn memory(&self) -> usize {
        self.memory
    }

    pub fn get(&self, window: &[usize], t: usize) -> &[f64] {
        self.values
            .get(&(window.to_vec(), t))
            .unwrap_or(&self.zeros)
    }

    fn entry(&mut self, window: &[usize], t: usize) -> &mut Vec<f64> {
        let zeros = &self.zeros;
        self.values
            .entry((window.to_vec(), t))
            .or_insert_with(|| zeros.clone())
    }

    pub fn set(&mut self, window: &[usize], t: usize, m: usize, value: f64) {
        self.entry(window, t)[m] = value;
    }

    /// Number of visited `(window, t)` states.
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Selection probabilities `softmax(c Q(window, t, .))`.
pub fn ql_probabilities(table: &QTable, params: &QlParams, window: &[usize], t: usize) -> Vec<f64> {
    let scaled: Vec<f64> = table
        .get(window, t)
        .iter()
        .map(|q| params.inverse_temperature * q)
        .collect();
    let mut probs = vec![0.0; scaled.len()];
    softmax_into(&scaled, &mut probs);
    probs
}

/// Samples a machine action; returns it with its selection probability.
pub fn ql_select<R: Rng + ?Sized>(
    table: &QTable,
    params: &QlParams,
    window: &[usize],
    t: usize,
    rng: &mut R,
) -> (usize, f64) {
    let probs = ql_probabilities(table, params, window, t);
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (m, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return (m, p);
        }
    }
    let m = probs.iter().rposition(|&p| p > 0.0).unwrap_or(0);
    (m, probs[m])
}

/// `Q(w_t, t, m_t) <- (1 - a) Q(w_t, t, m_t) + a (r_t + d max_m Q(w_{t+1}, t + 1, m))`,
/// with no bootstrap after the last step.
pub fn ql_update_value(
    table: &mut QTable,
    params: &QlParams,
    window_t: &[usize],
    t: usize,
    m_t: usize,
    r_t: f64,
    window_next: &[usize],
) {
    let bootstrap = if t < table.spec.horizon {
        table
            .get(window_next, t + 1)
            .iter()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max)
    } else {
        0.0
    };
    let a = params.learning_rate;
    let entry = table.entry(window_t, t);
    entry[m_t] = (1.0 - a) * entry[m_t] + a * (r_t + params.discount * bootstrap);
}

/// The update with the step reward read off a decomposable reward.
#[allow(clippy::too_many_arguments)]
pub fn ql_update(
    table: &mut QTable,
    params: &QlParams,
    reward: &RewardFunction,
    window_t: &[usize],
    t: usize,
    h_t: usize,
    m_t: usize,
    window_next: &[usize],
) -> Result<()> {
    if !reward.is_decomposable() {
        return Err(Error::Unsupported(
            "Q-learning needs a per-step reward; path rewards have none".into(),
        ));
    }
    let r = reward.decomposable.get(t, h_t, m_t);
    ql_update_value(table, params, window_t, t, m_t, r, window_next);
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QlRow {
    pub episode: usize,
    pub cumulative_samples: usize,
    pub episode_reward: f64,
    /// `-sum_t log prob(m_t)` for this episode.
    pub episode_nll: f64,
    /// Mean episode reward so far.
    pub avg_reward: f64,
    /// Mean over episodes so far of `-sum_t log prob(m_t)`.
    pub entropy_estimate: f64,
}

#[derive(Clone, Debug)]
pub struct QlTrace {
    pub rows: Vec<QlRow>,
    pub table: QTable,
}

impl QlTrace {
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "episode,cumulative_samples,avg_reward,entropy_estimate"
        )?;
        for r in &self.rows {
            writeln!(
                out,
                "{},{},{},{}",
                r.episode, r.cumulative_samples, r.avg_reward, r.entropy_estimate
            )?;
        }
        Ok(())
    }
}

/// Runs `episodes` episodes against the LCA human from a zero table.
pub fn run_qlearning(
    spec: ProcessSpec,
    reward: &RewardFunction,
    lca: &LcaParams,
    params: &QlParams,
    episodes: usize,
    seed: u64,
) -> Result<QlTrace> {
    params.validate()?;
    lca.validate(&spec)?;
    if reward.spec() != spec {
        return Err(Error::SpecMismatch("reward built for another spec".into()));
    }
    if !reward.is_decomposable() {
        return Err(Error::Unsupported(
            "Q-learning needs a per-step reward; path rewards have none".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = QTable::new(spec, params.memory);
    let mut rows = Vec::with_capacity(episodes);
    let (mut reward_sum, mut nll_sum) = (0.0, 0.0);
    for episode in 1..=episodes {
        let mut acc = vec![lca.initial; spec.human_actions];
        let mut human = Vec::with_capacity(spec.horizon);
        let mut machine = Vec::with_capacity(spec.horizon);
        let (mut total, mut nll) = (0.0, 0.0);
        let mut current = window(&spec, params.memory, &human, &machine);
        for t in 1..=spec.horizon {
            let (m, p) = ql_select(&table, params, &current, t, &mut rng);
            nll -= p.ln();
            acc = lca_step(lca, &acc, lca.stimulus(m), &mut rng);
            let h = lca_choose(&acc, &mut rng);
            human.push(h);
            machine.push(m);
            total += reward.decomposable.get(t, h, m);
            let next = window(&spec, params.memory, &human, &machine);
            ql_update(&mut table, params, reward, &current, t, h, m, &next)?;
            current = next;
        }
        reward_sum += total;
        nll_sum += nll;
        rows.push(QlRow {
            episode,
            cumulative_samples: episode,
            episode_reward: total,
            episode_nll: nll,
            avg_reward: reward_sum / episode as f64,
            entropy_estimate: nll_sum / episode as f64,
        });
    }
    Ok(QlTrace { rows, table })
}
