//! Sample-set statistics: energy distance, reward moments, mode occupancy.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{contract, Error, Result};
use crate::pso::{nearest, RewardModel};
use crate::{dist, Point};

/// Where a sample set came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SampleProvenance {
    /// Model fingerprint, or `data` for dataset draws.
    pub source: String,
    pub steps: usize,
    pub seed: u64,
}

/// Points of one condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleSet {
    pub condition: usize,
    pub points: Vec<Point>,
    pub provenance: SampleProvenance,
}

impl SampleSet {
    pub fn new(condition: usize, points: Vec<Point>, provenance: SampleProvenance) -> Result<Self> {
        for p in &points {
            for v in p {
                crate::error::check_finite("sample coordinate", *v)?;
            }
        }
        Ok(Self {
            condition,
            points,
            provenance,
        })
    }
}

fn mean_pair_dist(a: &[Point], b: &[Point]) -> f64 {
    // row sums first, then the total, so the result does not depend on blocking
    let total: f64 = a
        .iter()
        .map(|x| b.iter().map(|y| dist(*x, *y)).sum::<f64>())
        .sum();
    total / (a.len() as f64 * b.len() as f64)
}

/// `2 E|X - Y| - E|X - X'| - E|Y - Y'|` with all-pairs means (diagonal
/// included), which is non-negative and exactly zero for identical sets.
pub fn energy_distance_points(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(contract("energy distance needs two non-empty sets"));
    }
    let xy = mean_pair_dist(a, b);
    let yx = mean_pair_dist(b, a);
    let xx = mean_pair_dist(a, a);
    let yy = mean_pair_dist(b, b);
    // grouped so that swapping (a, b) gives bit-identical results
    Ok(((xy + yx) - (xx + yy)).max(0.0))
}

pub fn energy_distance(a: &SampleSet, b: &SampleSet) -> Result<f64> {
    energy_distance_points(&a.points, &b.points)
}

/// Mean and population standard deviation of the reward.
pub fn reward_stats(s: &SampleSet, rm: &RewardModel) -> Result<(f64, f64)> {
    reward_stats_points(&s.points, s.condition, rm)
}

pub fn reward_stats_points(points: &[Point], c: usize, rm: &RewardModel) -> Result<(f64, f64)> {
    if points.is_empty() {
        return Err(contract("reward statistics need a non-empty set"));
    }
    let r = points
        .iter()
        .map(|p| rm.reward(*p, c))
        .collect::<Result<Vec<f64>>>()?;
    let n = r.len() as f64;
    let mean = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Ok((mean, var.sqrt()))
}

/// Fraction of points whose nearest mode center is each declared center.
/// An empty set gives all zeros.
pub fn mode_occupancy(s: &SampleSet, dataset: &SyntheticDataset) -> Result<Vec<f64>> {
    dataset.check_condition(s.condition)?;
    Ok(occupancy(&s.points, &dataset.mode_centers(s.condition)))
}

pub fn occupancy(points: &[Point], centers: &[Point]) -> Vec<f64> {
    let mut h = vec![0.0; centers.len()];
    if points.is_empty() {
        return h;
    }
    for p in points {
        h[nearest(centers, *p)] += 1.0;
    }
    let n = points.len() as f64;
    h.iter_mut().for_each(|v| *v /= n);
    h
}

/// Evaluation summary of one model or sample source, averaged over conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub energy_distance: f64,
    pub reward_mean: f64,
    pub reward_std: f64,
    /// Occupancy per condition, one entry per declared mode center.
    pub occupancy: Vec<Vec<f64>>,
    pub samples: usize,
    /// Fraction of samples within a radius of a target point, when the
    /// evaluation has one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub within_radius: Option<f64>,
    /// Wall time of the evaluation, when recorded. Left out of reports that
    /// must be byte-reproducible.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub runtime_secs: Option<f64>,
}

impl MetricReport {
    /// `key=value` lines; floats use shortest round-trip decimals.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("label={}\n", self.label));
        s.push_str(&format!("energy_distance={}\n", self.energy_distance));
        s.push_str(&format!("reward_mean={}\n", self.reward_mean));
        s.push_str(&format!("reward_std={}\n", self.reward_std));
        for (c, h) in self.occupancy.iter().enumerate() {
            let v: Vec<String> = h.iter().map(|x| x.to_string()).collect();
            s.push_str(&format!("occupancy.{c}={}\n", v.join(",")));
        }
        s.push_str(&format!("samples={}\n", self.samples));
        if let Some(w) = self.within_radius {
            s.push_str(&format!("within_radius={w}\n"));
        }
        if let Some(r) = self.runtime_secs {
            s.push_str(&format!("runtime_secs={r}\n"));
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Parse(e.to_string()))
    }
}

/// Thresholds for [`compare_runs`]: a delta passes when it moves in the
/// improving direction by at least the given amount.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareThresholds {
    pub min_reward_gain: f64,
    pub max_energy_increase: f64,
}

impl Default for CompareThresholds {
    fn default() -> Self {
        Self {
            min_reward_gain: 0.0,
            max_energy_increase: f64::INFINITY,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunDelta {
    pub before: String,
    pub after: String,
    pub deltas: BTreeMap<String, f64>,
    pub reward_improved: bool,
    pub energy_improved: bool,
    pub passed: bool,
    pub warnings: Vec<String>,
}

impl RunDelta {
    pub fn to_text(&self) -> String {
        let mut s = format!("{:<20} {:>24}\n", "metric", "after - before");
        for (k, v) in &self.deltas {
            s.push_str(&format!("{k:<20} {v:>24}\n"));
        }
        s.push_str(&format!("reward_improved={}\n", self.reward_improved));
        s.push_str(&format!("energy_improved={}\n", self.energy_improved));
        s.push_str(&format!("passed={}\n", self.passed));
        for w in &self.warnings {
            s.push_str(&format!("warning={w}\n"));
        }
        s
    }
}

/// Elementwise `after - before` plus improvement flags.
pub fn compare_runs(before: &MetricReport, after: &MetricReport, th: &CompareThresholds) -> RunDelta {
    let mut deltas = BTreeMap::new();
    let d_ed = after.energy_distance - before.energy_distance;
    let d_r = after.reward_mean - before.reward_mean;
    deltas.insert("energy_distance".to_string(), d_ed);
    deltas.insert("reward_mean".to_string(), d_r);
    deltas.insert("reward_std".to_string(), after.reward_std - before.reward_std);
    if let (Some(a), Some(b)) = (after.within_radius, before.within_radius) {
        deltas.insert("within_radius".to_string(), a - b);
    }
    for (c, (a, b)) in after.occupancy.iter().zip(&before.occupancy).enumerate() {
        for (m, (x, y)) in a.iter().zip(b).enumerate() {
            deltas.insert(format!("occupancy.{c}.{m}"), x - y);
        }
    }
    let mut warnings = Vec::new();
    if before.samples != after.samples {
        let w = format!(
            "sample counts differ: {} vs {}",
            before.samples, after.samples
        );
        log::warn!("{w}");
        warnings.push(w);
    }
    RunDelta {
        before: before.label.clone(),
        after: after.label.clone(),
        reward_improved: d_r > 0.0,
        energy_improved: d_ed < 0.0,
        passed: d_r >= th.min_reward_gain && d_ed <= th.max_energy_increase,
        deltas,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    fn prov() -> SampleProvenance {
        SampleProvenance {
            source: "test".into(),
            steps: 0,
            seed: 0,
        }
    }

    #[test]
    fn identical_sets_have_zero_distance() {
        let mut rng = SeededRng::new(1);
        let a: Vec<Point> = (0..50).map(|_| rng.normal_point()).collect();
        assert_eq!(energy_distance_points(&a, &a).unwrap(), 0.0);
        assert!(energy_distance_points(&a, &[]).is_err());
    }

    #[test]
    fn reward_examples() {
        let rm = RewardModel::ModeDistance {
            targets: vec![[0.0, 0.0]],
        };
        let s = SampleSet::new(0, vec![[0.0, 0.0]], prov()).unwrap();
        assert_eq!(reward_stats(&s, &rm).unwrap(), (0.0, 0.0));
        let s = SampleSet::new(0, vec![[1.0, 0.0], [0.0, 2.0]], prov()).unwrap();
        assert_eq!(reward_stats(&s, &rm).unwrap().0, -2.5);
        let e = SampleSet::new(0, vec![], prov()).unwrap();
        assert!(reward_stats(&e, &rm).is_err());
        assert!(SampleSet::new(0, vec![[f64::NAN, 0.0]], prov()).is_err());
    }

    #[test]
    fn occupancy_indicator() {
        let centers = [[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]];
        let h = occupancy(&[[5.0, 0.0]; 7], &centers);
        assert_eq!(h, vec![0.0, 1.0, 0.0]);
        assert_eq!(h.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn compare_identical_reports() {
        let r = MetricReport {
            label: "a".into(),
            energy_distance: 0.1,
            reward_mean: -3.0,
            reward_std: 1.0,
            occupancy: vec![vec![0.5, 0.5]],
            samples: 10,
            within_radius: Some(0.25),
            runtime_secs: None,
        };
        let d = compare_runs(&r, &r, &CompareThresholds::default());
        assert!(d.deltas.values().all(|v| *v == 0.0));
        assert!(!d.reward_improved);
        assert!(d.warnings.is_empty());
        let mut better = r.clone();
        better.reward_mean = -1.0;
        better.samples = 11;
        let d = compare_runs(&r, &better, &CompareThresholds::default());
        assert!(d.reward_improved && d.passed);
        assert_eq!(d.warnings.len(), 1);
        assert_eq!(MetricReport::from_json(&r.to_json()).unwrap(), r);
    }
}
