//! Leaky competing accumulator model of a human responding to machine
//! stimuli, and sampling of interactions against a machine policy.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::ConstraintSet;
use crate::process::{MachinePolicy, ProcessSpec, Trajectory};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LcaParams {
    /// Self decay.
    pub alpha: f64,
    /// Inhibition from the other accumulators.
    pub beta: f64,
    /// Stimulus strength.
    pub rho: f64,
    /// Noise power; the noise scale is its square root.
    pub sigma2: f64,
    pub initial: f64,
    /// Human option stimulated by each machine action. Identity when absent.
    pub stimulus_map: Option<Vec<usize>>,
}

impl Default for LcaParams {
    fn default() -> Self {
        LcaParams {
            alpha: 0.1,
            beta: 0.2,
            rho: 0.4,
            sigma2: 0.09,
            initial: 0.0,
            stimulus_map: None,
        }
    }
}

impl LcaParams {
    pub fn validate(&self, spec: &ProcessSpec) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("rho", self.rho),
            ("sigma2", self.sigma2),
            ("initial", self.initial),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Invalid(format!(
                    "LCA parameter {name} must be finite and nonnegative"
                )));
            }
        }
        match &self.stimulus_map {
            None if spec.human_actions != spec.machine_actions => Err(Error::Invalid(
                "an explicit stimulus map is needed when the alphabets differ in size".into(),
            )),
            Some(map)
                if map.len() != spec.machine_actions
                    || map.iter().any(|&h| h >= spec.human_actions) =>
            {
                Err(Error::Invalid(
                    "stimulus map must send every machine action to a human option".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    pub fn sigma(&self) -> f64 {
        self.sigma2.sqrt()
    }

    pub fn stimulus(&self, machine_action: usize) -> usize {
        self.stimulus_map
            .as_ref()
            .map_or(machine_action, |map| map[machine_action])
    }
}

/// One accumulator update with the stimulus on human option `stimulus`:
/// `X'(h) = max(0, X(h) - alpha X(h) - beta sum_{h' != h} X(h') + rho 1{S = h} + sigma N_h)`.
/// Normal draws are taken in option order, and only when `sigma > 0`.
pub fn lca_step<R: Rng + ?Sized>(
    params: &LcaParams,
    acc: &[f64],
    stimulus: usize,
    rng: &mut R,
) -> Vec<f64> {
    let total: f64 = acc.iter().sum();
    let sigma = params.sigma();
    acc.iter()
        .enumerate()
        .map(|(h, &x)| {
            let mut next = x - params.alpha * x - params.beta * (total - x);
            if h == stimulus {
                next += params.rho;
            }
            if sigma > 0.0 {
                let n: f64 = rng.sample(StandardNormal);
                next += sigma * n;
            }
            next.max(0.0)
        })
        .collect()
}

/// Index of the largest accumulator, ties broken uniformly at random. The
/// generator is only used when there is a tie.
pub fn lca_choose<R: Rng + ?Sized>(acc: &[f64], rng: &mut R) -> usize {
    let max = acc.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let ties: Vec<usize> = (0..acc.len()).filter(|&h| acc[h] == max).collect();
    if ties.len() == 1 {
        ties[0]
    } else {
        ties[rng.random_range(0..ties.len())]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleBatch {
    pub spec: ProcessSpec,
    pub policy_id: String,
    pub seed: u64,
    pub trajectories: Vec<Trajectory>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// One row per trajectory: `h_1..h_T, m_1..m_T`.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        let t = self.spec.horizon;
        let header: Vec<String> = (1..=t)
            .map(|i| format!("h_{i}"))
            .chain((1..=t).map(|i| format!("m_{i}")))
            .collect();
        writeln!(out, "{}", header.join(","))?;
        for traj in &self.trajectories {
            let row: Vec<String> = traj
                .human
                .iter()
                .chain(&traj.machine)
                .map(|a| a.to_string())
                .collect();
            writeln!(out, "{}", row.join(","))?;
        }
        Ok(())
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const SHARD: usize = 256;

/// Draws `m` from a probability vector with one uniform variate.
fn draw<R: Rng + ?Sized>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    // Round-off left u above the total; take the last action with mass.
    probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
}

/// Simulates one interaction: at each step the machine acts, the
/// accumulators take its stimulus, and the human picks the largest.
pub fn simulate_one<R: Rng + ?Sized>(
    policy: &dyn MachinePolicy,
    params: &LcaParams,
    rng: &mut R,
) -> Trajectory {
    let spec = policy.spec();
    let mut acc = vec![params.initial; spec.human_actions];
    let mut human = Vec::with_capacity(spec.horizon);
    let mut machine = Vec::with_capacity(spec.horizon);
    let mut probs = vec![0.0; spec.machine_actions];
    for _ in 0..spec.horizon {
        policy.machine_conditional(&human, &machine, &mut probs);
        let m = draw(&probs, rng);
        machine.push(m);
        acc = lca_step(params, &acc, params.stimulus(m), rng);
        human.push(lca_choose(&acc, rng));
    }
    Trajectory { human, machine }
}

/// `count` interactions against `policy`, generated in fixed-size shards
/// whose seeds derive from `seed` and the shard index, so the batch does not
/// depend on the number of threads.
pub fn sample_interactions(
    policy: &dyn MachinePolicy,
    params: &LcaParams,
    count: usize,
    seed: u64,
    policy_id: impl Into<String>,
) -> Result<SampleBatch> {
    let spec = policy.spec();
    params.validate(&spec)?;
    let shards = count.div_ceil(SHARD);
    let trajectories = (0..shards)
        .into_par_iter()
        .map(|shard| {
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(seed, shard as u64));
            let n = SHARD.min(count - shard * SHARD);
            (0..n)
                .map(|_| simulate_one(policy, params, &mut rng))
                .collect::<Vec<_>>()
        })
        .collect::<Vec<_>>()
        .into_iter()
        .flatten()
        .collect();
    Ok(SampleBatch {
        spec,
        policy_id: policy_id.into(),
        seed,
        trajectories,
    })
}

/// Sample means of every constraint feature.
pub fn empirical_moments(batch: &SampleBatch, constraints: &ConstraintSet) -> Result<Vec<f64>> {
    if batch.is_empty() {
        return Err(Error::Invalid(
            "empirical moments need at least one trajectory".into(),
        ));
    }
    constraints.validate(&batch.spec)?;
    let n = batch.len() as f64;
    Ok(constraints
        .features()
        .map(|f| {
            batch
                .trajectories
                .iter()
                .map(|t| f.value(&batch.spec, t))
                .sum::<f64>()
                / n
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structured::StructuredPolicy;

    fn quiet() -> LcaParams {
        LcaParams {
            sigma2: 0.0,
            ..LcaParams::default()
        }
    }

    #[test]
    fn stimulus_from_rest() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let next = lca_step(&quiet(), &[0.0; 3], 1, &mut rng);
        assert_eq!(next, vec![0.0, 0.4, 0.0]);
    }

    #[test]
    fn decay_and_clipped_inhibition() {
        let params = LcaParams {
            rho: 0.0,
            ..quiet()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        // The stimulus index is out of range, so no option is stimulated.
        let next = lca_step(&params, &[1.0, 0.0], 5, &mut rng);
        assert_eq!(next, vec![0.9, 0.0]);
    }

    #[test]
    fn choice_is_the_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(lca_choose(&[0.3, 0.1, 0.2], &mut rng), 0);
    }

    #[test]
    fn sampling_is_reproducible_and_thread_independent() {
        let spec = ProcessSpec::new(6, 3, 3).unwrap();
        let q = StructuredPolicy::uniform(spec);
        let a = sample_interactions(&q, &LcaParams::default(), 700, 11, "u").unwrap();
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let b =
            pool.install(|| sample_interactions(&q, &LcaParams::default(), 700, 11, "u").unwrap());
        assert_eq!(a, b);
        assert_eq!(a.len(), 700);
        let c = sample_interactions(&q, &LcaParams::default(), 700, 12, "u").unwrap();
        assert_ne!(a.trajectories, c.trajectories);
        assert!(sample_interactions(&q, &LcaParams::default(), 0, 1, "u")
            .unwrap()
            .is_empty());
    }

    #[test]
    fn csv_layout() {
        let spec = ProcessSpec::new(2, 2, 2).unwrap();
        let batch = SampleBatch {
            spec,
            policy_id: "x".into(),
            seed: 0,
            trajectories: vec![Trajectory::new(&spec, vec![1, 0], vec![0, 1]).unwrap()],
        };
        let mut out = Vec::new();
        batch.write_csv(&mut out).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "h_1,h_2,m_1,m_2\n1,0,0,1\n"
        );
    }

    #[test]
    fn mismatched_alphabets_need_a_map() {
        let spec = ProcessSpec::new(2, 2, 3).unwrap();
        assert!(LcaParams::default().validate(&spec).is_err());
        let p = LcaParams {
            stimulus_map: Some(vec![0, 1, 1]),
            ..LcaParams::default()
        };
        assert!(p.validate(&spec).is_ok());
    }
}
