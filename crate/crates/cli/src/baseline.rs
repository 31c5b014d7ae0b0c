//! The baseline file: calibrated pipeline quantities and the acceptance
//! thresholds they are judged against.

use std::collections::BTreeMap;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use crate::pipeline::PipelineResult;

pub const FORMAT_VERSION: u32 = 1;

/// Relative tolerance for reproducing a recorded quantity.
pub const REL_TOLERANCE: f64 = 0.05;
/// Floor of the tolerance, for quantities close to zero.
pub const ABS_TOLERANCE: f64 = 5e-3;

/// Acceptance thresholds. Each one is also written into the baseline file,
/// and the acceptance suite checks that the two agree.
pub const THRESHOLDS: &[(&str, f64)] = &[
    ("identity_loss_tolerance", 1e-9),
    ("identity_instances", 100.0),
    ("gradient_fd_step", 1e-4),
    ("gradient_relative_error_max", 1e-4),
    ("gradient_denominator_floor", 1e-6),
    ("gradient_instances", 20.0),
    ("gradient_max_params", 100.0),
    ("gradient_runtime_max_secs", 60.0),
    ("gradient_beta", 1.0),
    ("gradient_convergence_ratio_min", 30.0),
    ("mdp_variance_draws", 1e5),
    ("mdp_variance_relative_tolerance", 0.02),
    ("antisymmetry_instances", 100.0),
    ("antisymmetry_tolerance", 1e-12),
    ("teacher_energy_distance_max", 0.05),
    ("student_energy_distance_max", 0.15),
    ("calibration_slack", 1.25),
    ("pipeline_runtime_max_secs", 1800.0),
    ("reward_gain_min", 0.0),
    ("concept_within_radius_min", 0.5),
    ("self_target_energy_distance_max", 0.05),
];

pub fn threshold(name: &str) -> f64 {
    THRESHOLDS
        .iter()
        .find(|(k, _)| *k == name)
        .map(|(_, v)| *v)
        .unwrap_or_else(|| panic!("no threshold named {name:?}"))
}

pub fn tolerance_for(value: f64) -> f64 {
    (REL_TOLERANCE * value.abs()).max(ABS_TOLERANCE)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineEntry {
    pub value: f64,
    pub tolerance: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaselineFile {
    pub format_version: u32,
    pub entries: BTreeMap<String, BaselineEntry>,
    pub thresholds: BTreeMap<String, f64>,
}

/// One recorded quantity compared with a fresh run.
#[derive(Debug, Clone, PartialEq)]
pub struct EntryCheck {
    pub name: String,
    pub recorded: f64,
    pub observed: f64,
    pub tolerance: f64,
    pub passed: bool,
}

impl BaselineFile {
    pub fn from_pipeline(result: &PipelineResult, config_hash: &str) -> Self {
        let entries = result
            .quantities
            .iter()
            .map(|(k, v)| {
                (
                    k.clone(),
                    BaselineEntry {
                        value: *v,
                        tolerance: tolerance_for(*v),
                        config_hash: config_hash.to_string(),
                    },
                )
            })
            .collect();
        Self {
            format_version: FORMAT_VERSION,
            entries,
            thresholds: THRESHOLDS.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("baseline serializes");
        s.push('\n');
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_json()).with_context(|| format!("writing {}", path.display()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let file: Self = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if file.format_version != FORMAT_VERSION {
            bail!("baseline format {} is not supported", file.format_version);
        }
        Ok(file)
    }

    pub fn entry(&self, name: &str) -> Result<&BaselineEntry> {
        self.entries
            .get(name)
            .with_context(|| format!("baseline has no entry {name:?}"))
    }

    /// Names whose recorded threshold differs from, or is missing for, the
    /// thresholds compiled into this crate.
    pub fn threshold_mismatches(&self) -> Vec<String> {
        THRESHOLDS
            .iter()
            .filter(|(k, v)| self.thresholds.get(*k) != Some(v))
            .map(|(k, _)| k.to_string())
            .collect()
    }

    /// Compare every recorded entry with a fresh run of the same configuration.
    pub fn check(&self, result: &PipelineResult, config_hash: &str) -> Result<Vec<EntryCheck>> {
        let mut out = Vec::new();
        for (name, e) in &self.entries {
            if e.config_hash != config_hash {
                bail!("baseline entry {name:?} was produced by config {}, not {config_hash}", e.config_hash);
            }
            let observed = *result
                .quantities
                .get(name)
                .with_context(|| format!("run did not produce {name:?}"))?;
            out.push(EntryCheck {
                name: name.clone(),
                recorded: e.value,
                observed,
                tolerance: e.tolerance,
                passed: (observed - e.value).abs() <= e.tolerance,
            });
        }
        Ok(out)
    }
}
