//! Run configuration, read from TOML. Every field is required and unknown
//! keys are rejected; [`RunConfig::default`] is the documented baseline run.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{DatasetSpec, Generator};
use crate::diffusion::TrainConfig;
use crate::distill::{DistillConfig, GridSpec};
use crate::error::{domain, Error, Result};
use crate::nn::{Activation, Architecture};
use crate::pso::{OnlineConfig, PsoConfig, RewardModel};
use crate::data::SyntheticDataset;
use crate::schedule::ScheduleSpec;
use crate::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum DatasetLayout {
    /// See [`DatasetSpec::circle`].
    Circle {
        conditions: usize,
        radius: f64,
        std: f64,
    },
    Explicit {
        conditions: Vec<Generator>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    pub layout: DatasetLayout,
    /// Points per condition written by `gen-data`.
    pub preview_per_condition: usize,
}

impl DatasetConfig {
    pub fn spec(&self) -> DatasetSpec {
        match &self.layout {
            DatasetLayout::Circle {
                conditions,
                radius,
                std,
            } => DatasetSpec::circle(*conditions, *radius, *std),
            DatasetLayout::Explicit { conditions } => DatasetSpec {
                conditions: conditions.clone(),
            },
        }
    }
}

/// Network shape apart from `T` and the condition count, which come from
/// the schedule and dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub time_frequencies: usize,
    pub cond_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardSpec {
    /// Mode-distance reward towards the first mode of every condition.
    PreferredModes,
    ModeDistance { targets: Vec<Point> },
    HalfPlane { normals: Vec<Point>, offsets: Vec<f64> },
    RingRadius { center: Point, radius: f64 },
}

impl RewardSpec {
    pub fn resolve(&self, dataset: &SyntheticDataset) -> Result<RewardModel> {
        let rm = match self.clone() {
            RewardSpec::PreferredModes => RewardModel::preferred_modes(dataset),
            RewardSpec::ModeDistance { targets } => RewardModel::ModeDistance { targets },
            RewardSpec::HalfPlane { normals, offsets } => RewardModel::HalfPlane { normals, offsets },
            RewardSpec::RingRadius { center, radius } => RewardModel::RingRadius { center, radius },
        };
        rm.validate(dataset.n_conditions())?;
        Ok(rm)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OfflineSection {
    /// Number of preference pairs generated for the offline dataset.
    pub pairs: usize,
    pub train: TrainConfig,
    pub pso: PsoConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineSection {
    pub train: OnlineConfig,
    pub pso: PsoConfig,
}

/// Concept shift: a handful of target points around an unseen centroid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConceptSection {
    pub condition: usize,
    pub centroid: Point,
    pub spread: f64,
    pub points: usize,
    /// Radius around the centroid used when scoring samples.
    pub radius: f64,
    pub train: TrainConfig,
    pub pso: PsoConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NaiveSection {
    pub train: TrainConfig,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Total samples per evaluation, split evenly across conditions.
    pub samples: usize,
    /// Held-out seed for evaluation sampling; must differ from the run seed.
    pub seed: u64,
    /// DDIM steps for teacher samples.
    pub teacher_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: String,
    pub dataset: DatasetConfig,
    pub schedule: ScheduleSpec,
    pub grid: GridSpec,
    pub model: ModelConfig,
    pub teacher: TrainConfig,
    pub distill: DistillConfig,
    pub reward: RewardSpec,
    pub offline: OfflineSection,
    pub online: OnlineSection,
    pub concept: ConceptSection,
    pub naive: NaiveSection,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            output_dir: "runs/default".into(),
            dataset: DatasetConfig {
                layout: DatasetLayout::Circle {
                    conditions: 4,
                    radius: 4.0,
                    std: 0.3,
                },
                preview_per_condition: 1024,
            },
            schedule: ScheduleSpec::default(),
            grid: GridSpec::default(),
            model: ModelConfig {
                time_frequencies: 8,
                cond_dim: 8,
                hidden: vec![128, 128, 128],
                activation: Activation::Silu,
            },
            teacher: TrainConfig {
                steps: 8_000,
                batch_size: 256,
                lr: 1e-3,
                final_lr_fraction: 0.01,
            },
            distill: DistillConfig {
                train: TrainConfig {
                    steps: 4_000,
                    batch_size: 256,
                    lr: 1e-4,
                    final_lr_fraction: 0.1,
                },
                teacher_steps: 50,
                targets_per_time: 16_384,
            },
            reward: RewardSpec::PreferredModes,
            offline: OfflineSection {
                pairs: 4096,
                train: TrainConfig {
                    steps: 500,
                    batch_size: 64,
                    lr: 1e-4,
                    final_lr_fraction: 1.0,
                },
                pso: PsoConfig::offline(),
            },
            online: OnlineSection {
                train: OnlineConfig {
                    rounds: 375,
                    pairs_per_round: 128,
                    batch_size: 32,
                    lr: 2e-5,
                },
                pso: PsoConfig::online(),
            },
            concept: ConceptSection {
                condition: 0,
                centroid: [0.0, 1.5],
                spread: 0.2,
                points: 5,
                radius: 1.0,
                train: TrainConfig {
                    steps: 1_000,
                    batch_size: 64,
                    lr: 1e-3,
                    final_lr_fraction: 1.0,
                },
                pso: PsoConfig::full(),
            },
            naive: NaiveSection {
                train: TrainConfig {
                    steps: 500,
                    batch_size: 64,
                    lr: 1e-4,
                    final_lr_fraction: 1.0,
                },
            },
            eval: EvalConfig {
                samples: 4096,
                seed: 1_000_003,
                teacher_steps: 50,
            },
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    /// Hex SHA-256 of the canonical JSON form. `output_dir` is excluded so
    /// that moving a run does not change its identity.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir.clear();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        self.dataset.spec()
    }

    pub fn architecture(&self) -> Architecture {
        Architecture {
            timesteps: self.schedule.timesteps,
            n_conditions: self.dataset_spec().n_conditions(),
            time_frequencies: self.model.time_frequencies,
            cond_dim: self.model.cond_dim,
            hidden: self.model.hidden.clone(),
            activation: self.model.activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dataset_spec().validate()?;
        crate::schedule::NoiseSchedule::from_spec(&self.schedule)?;
        let k = self.dataset_spec().n_conditions();
        if self.concept.condition >= k {
            return Err(domain(format!("concept condition {} outside [0, {k})", self.concept.condition)));
        }
        if self.eval.seed == self.seed {
            return Err(domain("evaluation seed must differ from the run seed"));
        }
        if self.eval.samples < k {
            return Err(domain("eval.samples must cover every condition"));
        }
        for t in [
            &self.teacher,
            &self.distill.train,
            &self.offline.train,
            &self.concept.train,
            &self.naive.train,
        ] {
            t.validate()?;
        }
        for p in [&self.offline.pso, &self.online.pso, &self.concept.pso] {
            p.validate()?;
        }
        Ok(())
    }
}
