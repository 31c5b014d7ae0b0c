//! Variance schedule of the forward noising process.

use serde::{Deserialize, Serialize};

use crate::error::{domain, Error, Result};
use crate::Point;

/// Parameters of a linear beta schedule.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScheduleSpec {
    pub timesteps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
}

impl Default for ScheduleSpec {
    fn default() -> Self {
        Self {
            timesteps: 1000,
            beta_start: 1e-4,
            beta_end: 0.02,
        }
    }
}

/// Per-timestep betas and their cumulative products `alpha_bar[t] = prod_{s<=t} (1 - beta[s])`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
    sqrt_alpha_bar: Vec<f64>,
    sqrt_one_minus: Vec<f64>,
}

impl NoiseSchedule {
    pub fn from_spec(spec: &ScheduleSpec) -> Result<Self> {
        Self::linear(spec.timesteps, spec.beta_start, spec.beta_end)
    }

    pub fn linear(timesteps: usize, beta_start: f64, beta_end: f64) -> Result<Self> {
        if timesteps < 2 {
            return Err(domain(format!("need at least 2 timesteps, got {timesteps}")));
        }
        let last = (timesteps - 1) as f64;
        let betas = (0..timesteps)
            .map(|t| beta_start + (beta_end - beta_start) * t as f64 / last)
            .collect();
        Self::from_betas(betas)
    }

    /// Build from an explicit beta sequence. Betas must lie in `[0, 1]`; the
    /// endpoints are allowed so that degenerate schedules (`alpha_bar = 1` or
    /// `0`) can be expressed.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(domain("empty beta sequence"));
        }
        if let Some(b) = betas.iter().find(|b| !(0.0..=1.0).contains(*b)) {
            return Err(domain(format!("beta {b} outside [0, 1]")));
        }
        let mut alpha_bar = Vec::with_capacity(betas.len());
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        let sqrt_alpha_bar = alpha_bar.iter().map(|a: &f64| a.sqrt()).collect();
        let sqrt_one_minus = alpha_bar.iter().map(|a: &f64| (1.0 - a).sqrt()).collect();
        Ok(Self {
            betas,
            alpha_bar,
            sqrt_alpha_bar,
            sqrt_one_minus,
        })
    }

    pub fn timesteps(&self) -> usize {
        self.betas.len()
    }

    pub fn check(&self, t: usize) -> Result<()> {
        if t < self.timesteps() {
            Ok(())
        } else {
            Err(domain(format!(
                "timestep {t} outside [0, {})",
                self.timesteps()
            )))
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn sqrt_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_alpha_bar[t]
    }

    pub fn sqrt_one_minus_alpha_bar(&self, t: usize) -> f64 {
        self.sqrt_one_minus[t]
    }

    /// `sqrt(ab) * x0 + sqrt(1 - ab) * eps`.
    pub fn noise(&self, x0: Point, t: usize, eps: Point) -> Point {
        let (a, s) = (self.sqrt_alpha_bar[t], self.sqrt_one_minus[t]);
        [a * x0[0] + s * eps[0], a * x0[1] + s * eps[1]]
    }
}

/// Clean point implied by an epsilon prediction: `(x - sqrt(1 - ab) * eps) / sqrt(ab)`.
pub fn x0_from_eps(x: Point, t: usize, eps: Point, sched: &NoiseSchedule) -> Result<Point> {
    sched.check(t)?;
    let a = sched.sqrt_alpha_bar(t);
    if a == 0.0 {
        return Err(Error::SingularConversion { t });
    }
    let s = sched.sqrt_one_minus_alpha_bar(t);
    Ok([(x[0] - s * eps[0]) / a, (x[1] - s * eps[1]) / a])
}
