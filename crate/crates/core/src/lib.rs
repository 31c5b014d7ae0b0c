//! Few-step diffusion students and pairwise sample optimization on 2-D toy data.
//!
//! The crate trains a small conditional epsilon-prediction network on
//! synthetic 2-D mixtures ([`diffusion`]), distills it into an `N`-step
//! sampler whose steps form a Gaussian Markov decision process
//! ([`distill`]), and fine-tunes that sampler with pairwise trajectory
//! likelihood objectives ([`pso`]). [`metrics`] measures the results.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod diffusion;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod pso;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
pub use nn::{Architecture, Denoiser, ParamGradient, Query, Tape};
pub use optim::Adam;
pub use rng::SeededRng;
pub use schedule::{x0_from_eps, NoiseSchedule, ScheduleSpec};

/// A point in the plane.
pub type Point = [f64; 2];

#[inline]
pub fn sq_dist(a: Point, b: Point) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
pub fn dist(a: Point, b: Point) -> f64 {
    sq_dist(a, b).sqrt()
}
