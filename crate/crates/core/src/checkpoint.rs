//! JSON checkpoints.
//!
//! ```text
//! {
//!   "format_version": 1,
//!   "role": "teacher" | "student" | "tuned-student",
//!   "architecture": { ... },
//!   "schedule": { "timesteps": .., "beta_start": .., "beta_end": .. },
//!   "grid": null | { "steps": N, "times": [t_0, .., t_N] },
//!   "config_hash": "<sha256 hex>",
//!   "seed": 7,
//!   "params": [ ... ]
//! }
//! ```
//!
//! `params` uses the flat layout documented in [`crate::nn`]. Floats are
//! written as shortest round-trip decimals, so save, load and save again
//! gives identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::distill::TimeGrid;
use crate::error::{Error, Result};
use crate::nn::{Architecture, Denoiser};
use crate::schedule::{NoiseSchedule, ScheduleSpec};

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Role {
    Teacher,
    Student,
    TunedStudent,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridHeader {
    pub steps: usize,
    pub times: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub role: Role,
    pub architecture: Architecture,
    pub schedule: ScheduleSpec,
    pub grid: Option<GridHeader>,
    pub config_hash: String,
    pub seed: u64,
    pub params: Vec<f64>,
}

impl Checkpoint {
    pub fn new(
        role: Role,
        net: &Denoiser,
        schedule: ScheduleSpec,
        grid: Option<&TimeGrid>,
        config_hash: String,
        seed: u64,
    ) -> Result<Self> {
        if (role == Role::Teacher) != grid.is_none() {
            return Err(Error::Compatibility(
                "students embed a grid and teachers do not".into(),
            ));
        }
        Ok(Self {
            format_version: FORMAT_VERSION,
            role,
            architecture: net.arch().clone(),
            schedule,
            grid: grid.map(|g| GridHeader {
                steps: g.steps(),
                times: g.times().to_vec(),
            }),
            config_hash,
            seed,
            params: net.params().to_vec(),
        })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("checkpoint serializes");
        s.push('\n');
        s
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let ck: Self = serde_json::from_str(text).map_err(|e| Error::Parse(format!("checkpoint: {e}")))?;
        if ck.format_version != FORMAT_VERSION {
            return Err(Error::Compatibility(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                ck.format_version
            )));
        }
        if ck.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Parse("checkpoint holds non-finite parameters".into()));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Parse(format!("cannot read checkpoint {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Rebuild the network, checking the stored architecture against `expected`.
    pub fn denoiser(&self, expected: &Architecture) -> Result<Denoiser> {
        if &self.architecture != expected {
            return Err(Error::Compatibility(format!(
                "checkpoint architecture {:?} does not match expected {:?}",
                self.architecture, expected
            )));
        }
        Denoiser::from_params(self.architecture.clone(), self.params.clone())
            .map_err(|e| Error::Compatibility(e.to_string()))
    }

    /// Rebuild the network with the architecture stored in the checkpoint.
    pub fn denoiser_as_stored(&self) -> Result<Denoiser> {
        self.denoiser(&self.architecture.clone())
    }

    pub fn check_schedule(&self, spec: &ScheduleSpec) -> Result<NoiseSchedule> {
        if &self.schedule != spec {
            return Err(Error::Compatibility(format!(
                "checkpoint schedule {:?} differs from {:?}",
                self.schedule, spec
            )));
        }
        NoiseSchedule::from_spec(spec)
    }

    /// The embedded grid, checked against `grid` when one is given.
    pub fn time_grid(&self, sched: &NoiseSchedule) -> Result<TimeGrid> {
        let h = self
            .grid
            .as_ref()
            .ok_or_else(|| Error::Compatibility("teacher checkpoints carry no grid".into()))?;
        let g = TimeGrid::from_times(h.times.clone(), sched)?;
        if g.steps() != h.steps {
            return Err(Error::Compatibility("grid header steps disagree with its times".into()));
        }
        Ok(g)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::rng::SeededRng;

    fn net() -> Denoiser {
        let arch = Architecture {
            timesteps: 1000,
            n_conditions: 3,
            time_frequencies: 2,
            cond_dim: 3,
            hidden: vec![5, 4],
            activation: Activation::Tanh,
        };
        Denoiser::init(arch, &mut SeededRng::new(3)).unwrap()
    }

    #[test]
    fn bytes_roundtrip() {
        let s = ScheduleSpec::default();
        let sched = NoiseSchedule::from_spec(&s).unwrap();
        let g = TimeGrid::new(4, &sched).unwrap();
        let ck = Checkpoint::new(Role::Student, &net(), s, Some(&g), "abc".into(), 9).unwrap();
        let a = ck.to_json();
        let back = Checkpoint::from_json(&a).unwrap();
        assert_eq!(back.to_json(), a);
        assert_eq!(back.denoiser_as_stored().unwrap(), net());
        assert_eq!(back.time_grid(&sched).unwrap(), g);
    }

    #[test]
    fn architecture_mismatch_is_loud() {
        let ck = Checkpoint::new(Role::Teacher, &net(), ScheduleSpec::default(), None, "x".into(), 1).unwrap();
        let mut other = net().arch().clone();
        other.hidden = vec![5, 5];
        assert!(matches!(ck.denoiser(&other), Err(Error::Compatibility(_))));
        let mut spec = ScheduleSpec::default();
        spec.beta_end = 0.03;
        assert!(ck.check_schedule(&spec).is_err());
    }

    #[test]
    fn corrupt_input() {
        assert!(Checkpoint::from_json("{").is_err());
        let ck = Checkpoint::new(Role::Teacher, &net(), ScheduleSpec::default(), None, "x".into(), 1).unwrap();
        let text = ck.to_json().replace("\"format_version\": 1", "\"format_version\": 2");
        assert!(matches!(Checkpoint::from_json(&text), Err(Error::Compatibility(_))));
        let mut short = ck.clone();
        short.params.pop();
        assert!(short.denoiser_as_stored().is_err());
    }
}
