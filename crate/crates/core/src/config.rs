//! Run configuration: a single strict JSON document.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::{ModelSpec, StateVec};
use crate::error::{Error, Result};
use crate::ilmpc::IlmpcConfig;
use crate::scenarios::{
    build_racing_task, build_robot_task, check_permutation, racing_initial_state, BaselinePolicy,
    CorridorSpec, TrackSpec,
};
use crate::task::TaskSpec;
use crate::tdmpc::DecomposeConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind", deny_unknown_fields)]
pub enum Scenario {
    Robot {
        corridor: CorridorSpec,
        baseline: BaselinePolicy,
    },
    Racing {
        track: TrackSpec,
        baseline: BaselinePolicy,
    },
}

impl Scenario {
    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Robot { .. } => "robot",
            Scenario::Racing { .. } => "racing",
        }
    }

    /// Number of subtasks in the library.
    pub fn library_size(&self) -> usize {
        match self {
            Scenario::Robot { corridor, .. } => corridor.obstacles.len(),
            Scenario::Racing { track, .. } => track.segments.len(),
        }
    }

    pub fn build(&self, order: &[usize]) -> Result<(TaskSpec, ModelSpec)> {
        match self {
            Scenario::Robot { corridor, .. } => build_robot_task(corridor, order),
            Scenario::Racing { track, .. } => build_racing_task(track, order),
        }
    }

    pub fn initial_state(&self, order: &[usize]) -> StateVec {
        match self {
            Scenario::Robot { corridor, .. } => corridor.initial_state(order),
            Scenario::Racing { .. } => racing_initial_state(),
        }
    }

    pub fn baseline(&self) -> &BaselinePolicy {
        match self {
            Scenario::Robot { baseline, .. } | Scenario::Racing { baseline, .. } => baseline,
        }
    }

    fn validate(&self) -> Result<()> {
        match self {
            Scenario::Robot { corridor, baseline } => {
                corridor.validate()?;
                match baseline {
                    BaselinePolicy::CenterHeight { centers, .. } if centers.len() == corridor.obstacles.len() => Ok(()),
                    _ => Err(Error::Config("robot scenario needs a center-height baseline with one center per obstacle".into())),
                }
            }
            Scenario::Racing { track, baseline } => {
                track.validate()?;
                match baseline {
                    BaselinePolicy::CenterlinePid { .. } => Ok(()),
                    _ => Err(Error::Config(
                        "racing scenario needs a centerline PID baseline".into(),
                    )),
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainingConfig {
    pub orders: Vec<Vec<usize>>,
    /// ILMPC iterations per order after the baseline run.
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvaluationConfig {
    /// Held-out order; drawn from the seed when absent.
    #[serde(default)]
    pub order: Option<Vec<usize>>,
    pub iterations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub name: String,
    pub seed: u64,
    pub scenario: Scenario,
    pub training: TrainingConfig,
    pub evaluation: EvaluationConfig,
    pub ilmpc: IlmpcConfig,
    #[serde(default)]
    pub decompose: DecomposeConfig,
}

impl RunConfig {
    pub fn robot_default() -> Self {
        let corridor = CorridorSpec::default();
        let baseline = BaselinePolicy::robot_default(&corridor);
        RunConfig {
            name: "robot".into(),
            seed: 7,
            scenario: Scenario::Robot { corridor, baseline },
            training: TrainingConfig {
                orders: vec![
                    vec![0, 1, 2, 3, 4, 5],
                    vec![1, 3, 5, 0, 2, 4],
                    vec![2, 4, 0, 5, 1, 3],
                    vec![3, 0, 4, 1, 5, 2],
                    vec![4, 5, 3, 2, 0, 1],
                ],
                iterations: 10,
            },
            evaluation: EvaluationConfig {
                order: Some(vec![0, 2, 4, 1, 3, 5]),
                iterations: 20,
            },
            ilmpc: IlmpcConfig {
                horizon: 12,
                max_steps: 2000,
                ..IlmpcConfig::default()
            },
            decompose: DecomposeConfig::default(),
        }
    }

    pub fn racing_default() -> Self {
        let track = TrackSpec::default();
        let baseline = BaselinePolicy::racing_default(&track);
        RunConfig {
            name: "racing".into(),
            seed: 7,
            scenario: Scenario::Racing { track, baseline },
            training: TrainingConfig {
                orders: vec![(0..10).collect()],
                iterations: 5,
            },
            evaluation: EvaluationConfig {
                order: Some(vec![0, 5, 2, 7, 8, 1, 4, 3, 6, 9]),
                iterations: 10,
            },
            ilmpc: IlmpcConfig {
                horizon: 8,
                max_steps: 600,
                ..IlmpcConfig::default()
            },
            decompose: DecomposeConfig::default(),
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) {
            return Err(Error::Config(
                "name must be a plain, non-empty directory name".into(),
            ));
        }
        self.scenario.validate()?;
        self.ilmpc.validate()?;
        if !(self.decompose.replay_tol >= 0.0) {
            return Err(Error::Config(
                "decompose.replay_tol must be non-negative".into(),
            ));
        }
        let n = self.scenario.library_size();
        if self.training.orders.is_empty() {
            return Err(Error::Config(
                "at least one training order is required".into(),
            ));
        }
        for o in &self.training.orders {
            check_permutation(o, n).map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(o) = &self.evaluation.order {
            check_permutation(o, n).map_err(|e| Error::Config(e.to_string()))?;
        }
        Ok(())
    }

    /// The configured evaluation order, or one drawn from the seed that
    /// differs from every training order.
    pub fn evaluation_order(&self) -> Vec<usize> {
        if let Some(o) = &self.evaluation.order {
            return o.clone();
        }
        random_order(
            self.scenario.library_size(),
            self.seed,
            &self.training.orders,
        )
    }
}

/// Seeded permutation of `0..n` avoiding `exclude` when possible.
pub fn random_order(n: usize, seed: u64, exclude: &[Vec<usize>]) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..1000 {
        order.shuffle(&mut rng);
        if !exclude.contains(&order) {
            break;
        }
    }
    order
}
