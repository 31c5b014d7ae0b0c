//! Synthetic conditional 2-D datasets.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{domain, Result};
use crate::rng::SeededRng;
use crate::Point;

/// Analytic density for one condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum Generator {
    /// Isotropic Gaussian mixture.
    GaussianMixture {
        means: Vec<Point>,
        stds: Vec<f64>,
        weights: Vec<f64>,
    },
    /// Uniform angle, Gaussian radial jitter.
    Ring {
        center: Point,
        radius: f64,
        width: f64,
    },
    /// Two interleaved half circles, scaled by `scale` around `center`.
    TwoMoons {
        center: Point,
        scale: f64,
        noise: f64,
    },
}

impl Generator {
    fn validate(&self) -> Result<()> {
        match self {
            Generator::GaussianMixture {
                means,
                stds,
                weights,
            } => {
                if means.is_empty() || means.len() != stds.len() || means.len() != weights.len() {
                    return Err(domain("mixture needs equal, non-zero numbers of means, stds and weights"));
                }
                if weights.iter().any(|w| !(*w >= 0.0)) || weights.iter().sum::<f64>() <= 0.0 {
                    return Err(domain("mixture weights must be non-negative with positive sum"));
                }
                if stds.iter().any(|s| !(*s >= 0.0)) {
                    return Err(domain("mixture stds must be non-negative"));
                }
            }
            Generator::Ring { radius, width, .. } => {
                if !(*radius >= 0.0 && *width >= 0.0) {
                    return Err(domain("ring radius and width must be non-negative"));
                }
            }
            Generator::TwoMoons { scale, noise, .. } => {
                if !(*scale > 0.0 && *noise >= 0.0) {
                    return Err(domain("moons need positive scale and non-negative noise"));
                }
            }
        }
        Ok(())
    }

    pub fn sample(&self, rng: &mut SeededRng) -> Point {
        match self {
            Generator::GaussianMixture {
                means,
                stds,
                weights,
            } => {
                let total: f64 = weights.iter().sum();
                let u = rng.uniform() * total;
                let mut acc = 0.0;
                let mut k = means.len() - 1;
                for (i, w) in weights.iter().enumerate() {
                    acc += w;
                    if u < acc {
                        k = i;
                        break;
                    }
                }
                let z = rng.normal_point();
                [means[k][0] + stds[k] * z[0], means[k][1] + stds[k] * z[1]]
            }
            Generator::Ring {
                center,
                radius,
                width,
            } => {
                let a = 2.0 * PI * rng.uniform();
                let r = radius + width * rng.normal();
                [center[0] + r * a.cos(), center[1] + r * a.sin()]
            }
            Generator::TwoMoons {
                center,
                scale,
                noise,
            } => {
                let upper = rng.uniform() < 0.5;
                let a = PI * rng.uniform();
                let (x, y) = if upper {
                    (a.cos() - 0.5, a.sin() - 0.25)
                } else {
                    (0.5 - a.cos(), 0.25 - a.sin())
                };
                let z = rng.normal_point();
                [
                    center[0] + scale * x + noise * z[0],
                    center[1] + scale * y + noise * z[1],
                ]
            }
        }
    }

    /// Representative centers used for mode-occupancy histograms.
    pub fn mode_centers(&self) -> Vec<Point> {
        match self {
            Generator::GaussianMixture { means, .. } => means.clone(),
            Generator::Ring { center, .. } => vec![*center],
            Generator::TwoMoons { center, scale, .. } => {
                // centroids of the two half circles
                let cy = 2.0 / PI - 0.25;
                vec![
                    [center[0] - 0.5 * scale, center[1] + scale * cy],
                    [center[0] + 0.5 * scale, center[1] - scale * cy],
                ]
            }
        }
    }
}

/// One generator per condition id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub conditions: Vec<Generator>,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        Self::circle(4, 4.0, 0.3)
    }
}

impl DatasetSpec {
    /// `k` conditions; condition `c` is an equal-weight two-mode mixture with
    /// modes at angles `c * pi / k` and `c * pi / k + pi` on a circle of the
    /// given radius. All `2k` modes are distinct.
    pub fn circle(k: usize, radius: f64, std: f64) -> Self {
        let conditions = (0..k)
            .map(|c| {
                let a = c as f64 * PI / k as f64;
                let m = [radius * a.cos(), radius * a.sin()];
                Generator::GaussianMixture {
                    means: vec![m, [-m[0], -m[1]]],
                    stds: vec![std, std],
                    weights: vec![0.5, 0.5],
                }
            })
            .collect();
        Self { conditions }
    }

    pub fn n_conditions(&self) -> usize {
        self.conditions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.conditions.is_empty() {
            return Err(domain("dataset needs at least one condition"));
        }
        self.conditions.iter().try_for_each(Generator::validate)
    }
}

/// A dataset spec plus a cache of i.i.d. draws per condition.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    spec: DatasetSpec,
    samples: Vec<Vec<Point>>,
}

impl SyntheticDataset {
    pub fn new(spec: DatasetSpec) -> Result<Self> {
        spec.validate()?;
        let samples = vec![Vec::new(); spec.n_conditions()];
        Ok(Self { spec, samples })
    }

    /// Fill the cache with `per_condition` draws for every condition.
    /// Condition `c` uses its own child stream of `rng`.
    pub fn generate(spec: DatasetSpec, per_condition: usize, rng: &SeededRng) -> Result<Self> {
        let mut ds = Self::new(spec)?;
        for c in 0..ds.n_conditions() {
            let mut r = rng.child(c as u64);
            ds.samples[c] = (0..per_condition)
                .map(|_| ds.spec.conditions[c].sample(&mut r))
                .collect();
        }
        Ok(ds)
    }

    pub fn spec(&self) -> &DatasetSpec {
        &self.spec
    }

    pub fn n_conditions(&self) -> usize {
        self.spec.n_conditions()
    }

    pub fn check_condition(&self, c: usize) -> Result<()> {
        if c < self.n_conditions() {
            Ok(())
        } else {
            Err(domain(format!(
                "condition {c} outside [0, {})",
                self.n_conditions()
            )))
        }
    }

    /// Fresh draw from the analytic density of condition `c`.
    pub fn sample(&self, c: usize, rng: &mut SeededRng) -> Point {
        self.spec.conditions[c].sample(rng)
    }

    pub fn cached(&self, c: usize) -> &[Point] {
        &self.samples[c]
    }

    pub fn mode_centers(&self, c: usize) -> Vec<Point> {
        self.spec.conditions[c].mode_centers()
    }
}
