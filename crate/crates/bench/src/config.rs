//! Versioned JSON experiment configuration. Features and rewards are named
//! builders, so the shipped configs carry no inline tables.

use std::path::Path;

use anyhow::{bail, Context};
use area_core::area::AreaOptions;
use area_core::estimation::EstimationOptions;
use area_core::features::{
    follow_feature, periodic_target_reward, prefix_features, weighted_follow_feature, Constraint,
    ConstraintSet, Feature, RewardFunction,
};
use area_core::lca::LcaParams;
use area_core::process::{ProcessSpec, Trajectory};
use area_core::qlearning::QlParams;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub spec: ProcessSpec,
    pub features: Vec<FeatureDecl>,
    pub reward: RewardDecl,
    pub gamma: f64,
    #[serde(default)]
    pub moments: MomentDecl,
    #[serde(default = "default_iterations")]
    pub iterations: usize,
    #[serde(default)]
    pub estimation: EstimationOptions,
    #[serde(default)]
    pub step_constraint: Option<bool>,
    #[serde(default)]
    pub lca: LcaParams,
    #[serde(default)]
    pub qlearning: QlearningDecl,
    #[serde(default = "default_rounds")]
    pub rounds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub convergence: ConvergenceDecl,
}

fn default_iterations() -> usize {
    10
}

fn default_rounds() -> usize {
    1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "kebab-case", deny_unknown_fields)]
pub enum FeatureDecl {
    /// The reward itself as a moment constraint.
    Reward { id: String },
    /// `sum_t 1{h_t = m_t}`.
    Follow { id: String },
    /// Follow indicator weighted 1 on every `period`-th step, `off_weight` elsewhere.
    WeightedFollow {
        id: String,
        period: usize,
        off_weight: f64,
    },
    /// Indicators of every prefix of one trajectory.
    PathPrefixes {
        id: String,
        human: Vec<usize>,
        machine: Vec<usize>,
        #[serde(default = "one")]
        coefficient: f64,
    },
    PathBased {
        id: String,
        human: Vec<usize>,
        machine: Vec<usize>,
        #[serde(default = "one")]
        coefficient: f64,
    },
}

fn one() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "builder", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardDecl {
    /// `1{h = target}` on every `period`-th step, `1{h != target}` elsewhere.
    PeriodicTarget { period: usize, target: usize },
    Path {
        human: Vec<usize>,
        machine: Vec<usize>,
        #[serde(default = "one")]
        coefficient: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum MomentDecl {
    /// Exact expectations under a reference model fitted to
    /// `reference_samples` LCA interactions taken under the uniform policy.
    Exact {
        reference_samples: usize,
    },
    Sampled {
        per_iteration: usize,
    },
}

impl Default for MomentDecl {
    fn default() -> Self {
        MomentDecl::Exact {
            reference_samples: 100_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QlearningDecl {
    pub params: QlParams,
    pub episodes: usize,
}

impl Default for QlearningDecl {
    fn default() -> Self {
        QlearningDecl {
            params: QlParams::default(),
            episodes: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConvergenceDecl {
    /// Per-iteration sample sizes of the sampled series.
    pub sample_sizes: Vec<usize>,
    /// Seeds per series.
    pub seeds: usize,
}

impl Default for ConvergenceDecl {
    fn default() -> Self {
        ConvergenceDecl {
            sample_sizes: vec![10, 100, 1000],
            seeds: 5,
        }
    }
}

/// Everything the experiments need, built from a config.
#[derive(Clone, Debug)]
pub struct Problem {
    pub spec: ProcessSpec,
    pub constraints: ConstraintSet,
    pub reward: RewardFunction,
}

impl ExperimentConfig {
    /// Parses and validates; errors name the offending field path.
    pub fn from_json(text: &str) -> anyhow::Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let config: ExperimentConfig = serde_path_to_error::deserialize(de)
            .map_err(|e| anyhow::anyhow!("at `{}`: {}", e.path(), e.inner()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text =
            std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("configs serialize")
    }

    /// SHA-256 of the canonical serialization.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("configs serialize");
        Sha256::digest(&bytes)
            .iter()
            .map(|b| format!("{b:02x}"))
            .collect()
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        if self.version != SCHEMA_VERSION {
            bail!(
                "at `version`: unsupported schema version {} (expected {SCHEMA_VERSION})",
                self.version
            );
        }
        self.spec.validate().context("at `spec`")?;
        if !(self.gamma.is_finite() && self.gamma >= 0.0) {
            bail!("at `gamma`: must be finite and nonnegative");
        }
        if self.rounds == 0 {
            bail!("at `rounds`: must be at least 1");
        }
        if let MomentDecl::Sampled { per_iteration: 0 } = self.moments {
            bail!("at `moments.per_iteration`: must be at least 1");
        }
        if let MomentDecl::Exact {
            reference_samples: 0,
        } = self.moments
        {
            bail!("at `moments.reference_samples`: must be at least 1");
        }
        self.estimation.validate().context("at `estimation`")?;
        self.lca.validate(&self.spec).context("at `lca`")?;
        self.qlearning
            .params
            .validate()
            .context("at `qlearning.params`")?;
        self.problem()?;
        Ok(())
    }

    pub fn problem(&self) -> anyhow::Result<Problem> {
        let spec = self.spec;
        let reward = match &self.reward {
            RewardDecl::PeriodicTarget { period, target } => {
                if *period == 0 || *target >= spec.human_actions {
                    bail!("at `reward`: period must be positive and target a human action");
                }
                periodic_target_reward(spec, *period, *target)
            }
            RewardDecl::Path {
                human,
                machine,
                coefficient,
            } => {
                let path = Trajectory::new(&spec, human.clone(), machine.clone())
                    .context("at `reward`")?;
                RewardFunction::path(spec, path, *coefficient)?
            }
        };
        let mut equality = Vec::new();
        for (i, decl) in self.features.iter().enumerate() {
            let at = || format!("at `features[{i}]`");
            let built: Vec<Feature> = match decl {
                FeatureDecl::Reward { id } => vec![reward.as_feature(id.clone())],
                FeatureDecl::Follow { id } => vec![follow_feature(spec, id.clone())],
                FeatureDecl::WeightedFollow {
                    id,
                    period,
                    off_weight,
                } => {
                    if *period == 0 || !off_weight.is_finite() {
                        bail!("{}: period must be positive and off_weight finite", at());
                    }
                    vec![weighted_follow_feature(
                        spec,
                        id.clone(),
                        *period,
                        *off_weight,
                    )]
                }
                FeatureDecl::PathPrefixes {
                    id,
                    human,
                    machine,
                    coefficient,
                } => {
                    let path =
                        Trajectory::new(&spec, human.clone(), machine.clone()).with_context(at)?;
                    prefix_features(&spec, id, &path, *coefficient).with_context(at)?
                }
                FeatureDecl::PathBased {
                    id,
                    human,
                    machine,
                    coefficient,
                } => {
                    let path =
                        Trajectory::new(&spec, human.clone(), machine.clone()).with_context(at)?;
                    vec![Feature::path_based(&spec, id.clone(), path, *coefficient)
                        .with_context(at)?]
                }
            };
            equality.extend(built.into_iter().map(|feature| Constraint {
                feature,
                target: 0.0,
            }));
        }
        let constraints = ConstraintSet::build(equality, vec![]).context("at `features`")?;
        Ok(Problem {
            spec,
            constraints,
            reward,
        })
    }

    pub fn area_options(&self) -> AreaOptions {
        AreaOptions {
            gamma: self.gamma,
            iterations: self.iterations,
            estimation: self.estimation.clone(),
            step_constraint: self.step_constraint.unwrap_or(true),
            ..AreaOptions::default()
        }
    }
}
