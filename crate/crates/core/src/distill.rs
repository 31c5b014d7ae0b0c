//! Few-step students and their sampling process.
//!
//! An `N`-step student runs on a [`TimeGrid`] `t_N > ... > t_1 > t_0 = 0`.
//! Each transition predicts a clean point and re-noises it to the next grid
//! level:
//!
//! ```text
//! x_{t_{n-1}} = sqrt(ab_{t_{n-1}}) * f(x_{t_n}, t_n, c) + sqrt(1 - ab_{t_{n-1}}) * z
//! ```
//!
//! which makes every step a Gaussian policy with mean
//! `mu = sqrt(ab_{t_{n-1}}) * f` and variance `sigma_n^2 = 1 - ab_{t_{n-1}}`.
//! The last transition (`n = 1`) returns `f(x_{t_1}, t_1, c)` without noise.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::diffusion::{adam_for, ddim_batch, update, TrainConfig, TrainRun};
use crate::error::{contract, domain, Error, Result};
use crate::nn::{Denoiser, Query, Tape};
use crate::rng::{stage_stream, SeededRng};
use crate::schedule::{x0_from_eps, NoiseSchedule};
use crate::Point;

/// Number of student steps. Grid points are evenly spaced with `t_N = T - 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridSpec {
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self { steps: 4 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    /// `times[n] = t_n` for `n = 0..=N`.
    times: Vec<usize>,
    /// `sigma2[n] = 1 - ab_{t_{n-1}}` for `n = 1..=N`; `sigma2[0]` is unused (0).
    sigma2: Vec<f64>,
}

impl TimeGrid {
    pub fn new(steps: usize, sched: &NoiseSchedule) -> Result<Self> {
        let last = sched.timesteps() - 1;
        if steps == 0 || steps > last {
            return Err(domain(format!(
                "grid needs 1 <= N <= {last}, got {steps}"
            )));
        }
        let times: Vec<usize> = (0..=steps)
            .map(|n| (n * last + steps / 2) / steps)
            .collect();
        Self::from_times(times, sched)
    }

    pub fn from_spec(spec: &GridSpec, sched: &NoiseSchedule) -> Result<Self> {
        Self::new(spec.steps, sched)
    }

    /// Grid from explicit ascending times `t_0 = 0 < t_1 < ... < t_N`.
    pub fn from_times(times: Vec<usize>, sched: &NoiseSchedule) -> Result<Self> {
        if times.len() < 2 || times[0] != 0 {
            return Err(domain("grid needs t_0 = 0 and at least one step"));
        }
        if times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(domain("grid times must be strictly increasing in n"));
        }
        sched.check(*times.last().unwrap())?;
        let mut sigma2 = vec![0.0];
        sigma2.extend(times.windows(2).map(|w| 1.0 - sched.alpha_bar(w[0])));
        Ok(Self { times, sigma2 })
    }

    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn t(&self, n: usize) -> usize {
        self.times[n]
    }

    pub fn times(&self) -> &[usize] {
        &self.times
    }

    /// Policy variance of transition `n` (`n >= 1`).
    pub fn sigma2(&self, n: usize) -> f64 {
        self.sigma2[n]
    }

    pub fn sigma(&self, n: usize) -> f64 {
        self.sigma2[n].sqrt()
    }

    /// Only the last transition is deterministic.
    pub fn is_deterministic(&self, n: usize) -> bool {
        n == 1
    }

    /// Grid indices that enter the pairwise losses: `2..=N`.
    pub fn loss_indices(&self) -> std::ops::RangeInclusive<usize> {
        2..=self.steps()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Provenance {
    GeneratedByStudent,
    ForwardFromData,
}

/// One sampled path on a grid.
///
/// For generated paths, `means[n]` and `noises[n]` belong to the transition
/// out of `states[n]`: `states[n-1] = means[n] + sigma_n * noises[n]` for
/// `n >= 2`, and `states[0] = means[1]` with no noise.
///
/// For forward paths, `noises[n]` is the epsilon with
/// `states[n] = sqrt(ab_{t_n}) * states[0] + sqrt(1 - ab_{t_n}) * noises[n]`,
/// for `n >= 1`; `means` is all `None`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub condition: usize,
    pub provenance: Provenance,
    pub states: Vec<Point>,
    pub means: Vec<Option<Point>>,
    pub noises: Vec<Option<Point>>,
}

impl Trajectory {
    pub fn steps(&self) -> usize {
        self.states.len() - 1
    }

    pub fn endpoint(&self) -> Point {
        self.states[0]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MdpStep {
    pub next: Point,
    pub mean: Point,
    pub noise: Point,
}

/// Clean-point predictions `f(x, t, c)` for a batch.
pub fn predict_x0(student: &Denoiser, queries: &[Query], sched: &NoiseSchedule) -> Result<Vec<Point>> {
    let eps = student.forward_batch(queries)?;
    queries
        .iter()
        .zip(eps)
        .map(|(q, e)| x0_from_eps(q.x, q.t, e, sched))
        .collect()
}

fn check_index(n: usize, grid: &TimeGrid) -> Result<()> {
    if n == 1 {
        return Err(contract(
            "transition n = 1 is deterministic; use mdp_final_step",
        ));
    }
    if n == 0 || n > grid.steps() {
        return Err(domain(format!(
            "grid index {n} outside [2, {}]",
            grid.steps()
        )));
    }
    Ok(())
}

fn finite(p: Point, n: usize) -> Result<Point> {
    for v in p {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                what: format!("state at grid index {n}"),
                value: v,
            });
        }
    }
    Ok(p)
}

/// Stochastic transition `n -> n - 1` for `2 <= n <= N`.
pub fn mdp_step(
    student: &Denoiser,
    x: Point,
    n: usize,
    c: usize,
    rng: &mut SeededRng,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<MdpStep> {
    check_index(n, grid)?;
    let f = predict_x0(student, &[Query::new(x, grid.t(n), c)], sched)?[0];
    Ok(step_from_prediction(f, n, rng.normal_point(), grid, sched))
}

fn step_from_prediction(f: Point, n: usize, z: Point, grid: &TimeGrid, sched: &NoiseSchedule) -> MdpStep {
    let a = sched.sqrt_alpha_bar(grid.t(n - 1));
    let s = grid.sigma(n);
    let mean = [a * f[0], a * f[1]];
    MdpStep {
        next: [mean[0] + s * z[0], mean[1] + s * z[1]],
        mean,
        noise: z,
    }
}

/// Policy mean `sqrt(ab_{t_{n-1}}) * f(x, t_n, c)` for a batch of states at grid index `n`.
pub fn policy_means(
    student: &Denoiser,
    states: &[(Point, usize)],
    n: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<Point>> {
    let a = sched.sqrt_alpha_bar(grid.t(n - 1));
    let q: Vec<Query> = states.iter().map(|&(x, c)| Query::new(x, grid.t(n), c)).collect();
    Ok(predict_x0(student, &q, sched)?
        .into_iter()
        .map(|f| [a * f[0], a * f[1]])
        .collect())
}

/// Deterministic last transition: `f(x, t_1, c)`. Consumes no randomness.
pub fn mdp_final_step(
    student: &Denoiser,
    x: Point,
    c: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Point> {
    predict_x0(student, &[Query::new(x, grid.t(1), c)], sched).map(|v| v[0])
}

/// Sample a full trajectory: `x_{t_N} ~ N(0, I)`, then `mdp_step` for
/// `n = N..2` and `mdp_final_step`.
pub fn sample_trajectory(
    student: &Denoiser,
    c: usize,
    rng: &mut SeededRng,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    Ok(sample_trajectories(student, &[c], std::slice::from_mut(rng), grid, sched)?.remove(0))
}

/// Sample one trajectory per entry of `conds`; trajectory `i` consumes only `rngs[i]`.
pub fn sample_trajectories(
    student: &Denoiser,
    conds: &[usize],
    rngs: &mut [SeededRng],
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<Trajectory>> {
    if conds.len() != rngs.len() {
        return Err(contract("one rng per trajectory"));
    }
    let big_n = grid.steps();
    let mut trajs: Vec<Trajectory> = conds
        .iter()
        .zip(rngs.iter_mut())
        .map(|(&c, r)| {
            let mut states = vec![[0.0; 2]; big_n + 1];
            states[big_n] = r.normal_point();
            Trajectory {
                condition: c,
                provenance: Provenance::GeneratedByStudent,
                states,
                means: vec![None; big_n + 1],
                noises: vec![None; big_n + 1],
            }
        })
        .collect();
    for n in (1..=big_n).rev() {
        let q: Vec<Query> = trajs
            .iter()
            .map(|tr| Query::new(tr.states[n], grid.t(n), tr.condition))
            .collect();
        let f = predict_x0(student, &q, sched)?;
        for ((tr, r), f) in trajs.iter_mut().zip(rngs.iter_mut()).zip(f) {
            if n == 1 {
                tr.means[1] = Some(f);
                tr.states[0] = finite(f, 0)?;
            } else {
                let st = step_from_prediction(f, n, r.normal_point(), grid, sched);
                tr.means[n] = Some(st.mean);
                tr.noises[n] = Some(st.noise);
                tr.states[n - 1] = finite(st.next, n - 1)?;
            }
        }
    }
    Ok(trajs)
}

/// Endpoints of many trajectories; sample `i` uses `rng.child(i)`.
pub fn sample_endpoints(
    student: &Denoiser,
    conds: &[usize],
    rng: &SeededRng,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Vec<Point>> {
    let mut out = Vec::with_capacity(conds.len());
    for (k, chunk) in conds.chunks(1024).enumerate() {
        let mut rngs: Vec<SeededRng> = (0..chunk.len())
            .map(|i| rng.child((k * 1024 + i) as u64))
            .collect();
        out.extend(
            sample_trajectories(student, chunk, &mut rngs, grid, sched)?
                .iter()
                .map(Trajectory::endpoint),
        );
    }
    Ok(out)
}

/// Independent forward-marginal draws of `x0` at every grid time `n = 1..=N`.
pub fn forward_trajectory(
    x0: Point,
    c: usize,
    rng: &mut SeededRng,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<Trajectory> {
    finite(x0, 0)?;
    let big_n = grid.steps();
    let mut states = vec![x0; big_n + 1];
    let mut noises = vec![None; big_n + 1];
    for n in 1..=big_n {
        let eps = rng.normal_point();
        states[n] = sched.noise(x0, grid.t(n), eps);
        noises[n] = Some(eps);
    }
    Ok(Trajectory {
        condition: c,
        provenance: Provenance::ForwardFromData,
        states,
        means: vec![None; big_n + 1],
        noises,
    })
}

/// Distillation settings: optimizer loop plus the teacher rollouts that
/// provide regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// DDIM steps of a teacher rollout started at `T - 1`; rollouts from
    /// earlier grid times use proportionally fewer (at least one).
    pub teacher_steps: usize,
    /// Number of precomputed (state, target) examples per grid time.
    pub targets_per_time: usize,
}

/// One regression example: student input and the teacher's rollout endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DistillTarget {
    pub query: Query,
    pub x0_target: Point,
}

/// Noise data to every grid time `t_1..t_N` and roll the teacher out to a clean point.
pub fn teacher_targets(
    teacher: &Denoiser,
    dataset: &SyntheticDataset,
    cfg: &DistillConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    rng: &mut SeededRng,
) -> Result<Vec<DistillTarget>> {
    let top = sched.timesteps() - 1;
    let k = dataset.n_conditions();
    let mut out = Vec::with_capacity(cfg.targets_per_time * grid.steps());
    for n in 1..=grid.steps() {
        let t = grid.t(n);
        let steps = ((cfg.teacher_steps * t + top - 1) / top).max(1);
        let starts: Vec<Query> = (0..cfg.targets_per_time)
            .map(|_| {
                let c = rng.below(k);
                let x0 = dataset.sample(c, rng);
                Query::new(sched.noise(x0, t, rng.normal_point()), t, c)
            })
            .collect();
        for chunk in starts.chunks(2048) {
            let paths = ddim_batch(teacher, chunk, steps, sched)?;
            out.extend(chunk.iter().zip(paths).map(|(q, p)| DistillTarget {
                query: *q,
                x0_target: p.sample(),
            }));
        }
    }
    Ok(out)
}

/// Squared error between the student's clean-point prediction and the targets.
pub fn distill_loss(
    student: &Denoiser,
    batch: &[DistillTarget],
    sched: &NoiseSchedule,
) -> Result<crate::ParamGradient> {
    if batch.is_empty() {
        return Err(contract("distillation loss needs a non-empty batch"));
    }
    let mut tape = Tape::new(student);
    let q: Vec<Query> = batch.iter().map(|b| b.query).collect();
    let (id, eps) = tape.eval(&q)?;
    let scale = 1.0 / batch.len() as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(batch.len());
    for (b, e) in batch.iter().zip(eps) {
        let t = b.query.t;
        let x0 = x0_from_eps(b.query.x, t, e, sched)?;
        let r = [x0[0] - b.x0_target[0], x0[1] - b.x0_target[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        // d x0 / d eps = -sqrt(1 - ab) / sqrt(ab)
        let d = -sched.sqrt_one_minus_alpha_bar(t) / sched.sqrt_alpha_bar(t);
        cot.push([2.0 * scale * r[0] * d, 2.0 * scale * r[1] * d]);
    }
    tape.backward(loss * scale, &[(id, cot)])
}

/// Distill `teacher` into a student for `grid`: the student starts from the
/// teacher's weights and regresses its clean-point prediction at each grid
/// time onto the teacher's DDIM endpoint from the same noisy state.
pub fn distill_student(
    teacher: &Denoiser,
    dataset: &SyntheticDataset,
    cfg: &DistillConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<TrainRun> {
    cfg.train.validate()?;
    let mut student = teacher.clone();
    let mut losses = Vec::with_capacity(cfg.train.steps);
    if cfg.train.steps == 0 {
        return Ok(TrainRun { net: student, losses });
    }
    let mut rng = SeededRng::stream(seed, stage_stream("distill-targets"));
    let pool = teacher_targets(teacher, dataset, cfg, grid, sched, &mut rng)?;
    if pool.is_empty() {
        return Err(contract("distillation needs targets_per_time > 0"));
    }
    let mut rng = SeededRng::stream(seed, stage_stream("distill-train"));
    let mut opt = adam_for(&student, &cfg.train);
    for step in 0..cfg.train.steps {
        let batch: Vec<DistillTarget> = (0..cfg.train.batch_size)
            .map(|_| pool[rng.below(pool.len())])
            .collect();
        let g = distill_loss(&student, &batch, sched)?;
        update(&mut opt, &mut student, &g, &cfg.train, step)?;
        losses.push(g.loss);
    }
    Ok(TrainRun { net: student, losses })
}

/// Noise levels of an Euler-ancestral sampler on the variance-exploding scale
/// `x_sigma = x_t / sqrt(ab_t)`, `sigma = sqrt((1 - ab) / ab)`.
///
/// Each step `n -> n - 1` splits `sigma_{n-1}^2` into a deterministic part
/// `down_n^2` and fresh noise `up_n^2`:
///
/// ```text
/// up_n   = min(sigma_{n-1}, eta * sqrt((sigma_n^2 - sigma_{n-1}^2) * sigma_{n-1}^2 / sigma_n^2))
/// down_n = sqrt(sigma_{n-1}^2 - up_n^2)
/// ```
#[derive(Debug, Clone, PartialEq)]
pub struct EulerGrid {
    sigmas: Vec<f64>,
    times: Vec<usize>,
    up: Vec<f64>,
    down: Vec<f64>,
}

impl EulerGrid {
    /// Levels for the grid times, with `sigma_0 = 0`.
    pub fn from_grid(grid: &TimeGrid, sched: &NoiseSchedule, eta: f64) -> Result<Self> {
        let sigmas = (0..=grid.steps())
            .map(|n| {
                if n == 0 {
                    0.0
                } else {
                    let ab = sched.alpha_bar(grid.t(n));
                    ((1.0 - ab) / ab).sqrt()
                }
            })
            .collect();
        Self::from_levels(sigmas, grid.times().to_vec(), eta)
    }

    /// Explicit levels `sigmas[n]` (ascending in `n`, `sigmas[0]` may be 0)
    /// with the network timestep used at each level.
    pub fn from_levels(sigmas: Vec<f64>, times: Vec<usize>, eta: f64) -> Result<Self> {
        if sigmas.len() < 2 || sigmas.len() != times.len() {
            return Err(contract("euler grid needs matching levels and times, N >= 1"));
        }
        if sigmas.windows(2).any(|w| !(w[0] < w[1])) || sigmas[0] < 0.0 {
            return Err(contract("euler noise levels must descend strictly towards sigma_0 >= 0"));
        }
        if !(eta >= 0.0) {
            return Err(domain("eta must be non-negative"));
        }
        let mut up = vec![0.0];
        let mut down = vec![0.0];
        for n in 1..sigmas.len() {
            let (hi, lo) = (sigmas[n], sigmas[n - 1]);
            let u = (eta * ((hi * hi - lo * lo) * lo * lo / (hi * hi)).sqrt()).min(lo);
            up.push(u);
            down.push((lo * lo - u * u).max(0.0).sqrt());
        }
        Ok(Self {
            sigmas,
            times,
            up,
            down,
        })
    }

    pub fn steps(&self) -> usize {
        self.sigmas.len() - 1
    }

    pub fn sigma(&self, n: usize) -> f64 {
        self.sigmas[n]
    }

    pub fn up(&self, n: usize) -> f64 {
        self.up[n]
    }

    pub fn down(&self, n: usize) -> f64 {
        self.down[n]
    }

    pub fn t(&self, n: usize) -> usize {
        self.times[n]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EulerStep {
    pub next: Point,
    pub mean: Point,
    /// Standard deviation of the injected noise (`up_n`).
    pub scale: f64,
    pub noise: Point,
}

/// Clean-point prediction at level `n` for a state on the sigma scale.
pub fn euler_x0(
    student: &Denoiser,
    x: Point,
    n: usize,
    c: usize,
    egrid: &EulerGrid,
    sched: &NoiseSchedule,
) -> Result<Point> {
    let sigma = egrid.sigma(n);
    let k = 1.0 / (1.0 + sigma * sigma).sqrt();
    let eps = student.forward([k * x[0], k * x[1]], egrid.t(n), c)?;
    let _ = sched;
    Ok([x[0] - sigma * eps[0], x[1] - sigma * eps[1]])
}

/// One ancestral step `n -> n - 1`:
/// `x' = x + s * (down_n - sigma_n) + up_n * z` with `s = (x - f) / sigma_n`.
pub fn euler_ancestral_step(
    student: &Denoiser,
    x: Point,
    n: usize,
    c: usize,
    rng: &mut SeededRng,
    egrid: &EulerGrid,
    sched: &NoiseSchedule,
) -> Result<EulerStep> {
    if n == 1 {
        return Err(contract("euler transition n = 1 is deterministic; use euler_final_step"));
    }
    if n == 0 || n > egrid.steps() {
        return Err(domain(format!("euler index {n} outside [2, {}]", egrid.steps())));
    }
    let sigma = egrid.sigma(n);
    if !(egrid.sigma(n - 1) < sigma) {
        return Err(contract("euler noise levels must descend"));
    }
    let f = euler_x0(student, x, n, c, egrid, sched)?;
    let drift = egrid.down(n) - sigma;
    let mean = [
        x[0] + (x[0] - f[0]) / sigma * drift,
        x[1] + (x[1] - f[1]) / sigma * drift,
    ];
    let z = rng.normal_point();
    let up = egrid.up(n);
    Ok(EulerStep {
        next: [mean[0] + up * z[0], mean[1] + up * z[1]],
        mean,
        scale: up,
        noise: z,
    })
}

/// Deterministic last Euler step: the clean-point prediction at level 1.
pub fn euler_final_step(
    student: &Denoiser,
    x: Point,
    c: usize,
    egrid: &EulerGrid,
    sched: &NoiseSchedule,
) -> Result<Point> {
    euler_x0(student, x, 1, c, egrid, sched)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, Architecture};
    use crate::schedule::ScheduleSpec;

    fn sched() -> NoiseSchedule {
        NoiseSchedule::from_spec(&ScheduleSpec::default()).unwrap()
    }

    fn arch() -> Architecture {
        Architecture {
            timesteps: 1000,
            n_conditions: 2,
            time_frequencies: 2,
            cond_dim: 2,
            hidden: vec![6, 6],
            activation: Activation::Silu,
        }
    }

    #[test]
    fn default_grid() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        assert_eq!(g.times(), &[0, 250, 500, 749, 999]);
        for n in 2..=4 {
            assert!(g.sigma2(n) > 0.0 && g.sigma2(n) <= 1.0);
            assert_eq!(g.sigma2(n), 1.0 - s.alpha_bar(g.t(n - 1)));
        }
        assert!(g.is_deterministic(1));
        assert_eq!(g.loss_indices(), 2..=4);
        assert!(TimeGrid::new(0, &s).is_err());
        assert!(TimeGrid::from_times(vec![0, 5, 5], &s).is_err());
    }

    #[test]
    fn one_step_grid_trajectory() {
        let s = sched();
        let g = TimeGrid::new(1, &s).unwrap();
        assert_eq!(g.times(), &[0, 999]);
        let net = Denoiser::init(arch(), &mut SeededRng::new(1)).unwrap();
        let mut rng = SeededRng::new(2);
        let tr = sample_trajectory(&net, 1, &mut rng.clone(), &g, &s).unwrap();
        let x_t = rng.normal_point();
        assert_eq!(tr.states.len(), 2);
        assert_eq!(tr.states[1], x_t);
        let eps = net.forward(x_t, 999, 1).unwrap();
        assert_eq!(tr.states[0], x0_from_eps(x_t, 999, eps, &s).unwrap());
    }

    #[test]
    fn trajectory_replay_and_rng_budget() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let net = Denoiser::init(arch(), &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(4);
        let tr = sample_trajectory(&net, 0, &mut rng, &g, &s).unwrap();
        assert_eq!(rng.draws(), 2 * 4);
        for n in 2..=4 {
            let mu = tr.means[n].unwrap();
            let z = tr.noises[n].unwrap();
            let sg = g.sigma(n);
            assert_eq!(tr.states[n - 1], [mu[0] + sg * z[0], mu[1] + sg * z[1]]);
            let again = policy_means(&net, &[(tr.states[n], 0)], n, &g, &s).unwrap()[0];
            assert!((again[0] - mu[0]).abs() < 1e-12 && (again[1] - mu[1]).abs() < 1e-12);
        }
        assert_eq!(tr.states[0], tr.means[1].unwrap());
        assert!(tr.noises[1].is_none());
    }

    #[test]
    fn mdp_step_routing_and_zero_noise() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let net = Denoiser::init(arch(), &mut SeededRng::new(3)).unwrap();
        let mut rng = SeededRng::new(1);
        assert!(matches!(
            mdp_step(&net, [0.0, 0.0], 1, 0, &mut rng, &g, &s),
            Err(Error::Contract(_))
        ));
        assert!(mdp_step(&net, [0.0, 0.0], 5, 0, &mut rng, &g, &s).is_err());
        let st = step_from_prediction([1.0, -1.0], 3, [0.0, 0.0], &g, &s);
        assert_eq!(st.next, st.mean);
    }

    #[test]
    fn clean_grid_point_returns_prediction() {
        // alpha_bar = 1 at t = 0 and 1, so the re-noising is the identity
        let mut betas = vec![0.0, 0.0];
        betas.extend(std::iter::repeat(0.01).take(998));
        let s = NoiseSchedule::from_betas(betas).unwrap();
        let g = TimeGrid::from_times(vec![0, 1, 999], &s).unwrap();
        let net = Denoiser::init(arch(), &mut SeededRng::new(5)).unwrap();
        let x = [0.3, -0.2];
        let st = mdp_step(&net, x, 2, 1, &mut SeededRng::new(6), &g, &s).unwrap();
        let f = predict_x0(&net, &[Query::new(x, 999, 1)], &s).unwrap()[0];
        assert_eq!(st.next, f);
    }

    #[test]
    fn final_step_is_deterministic() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let net = Denoiser::zeros(arch()).unwrap();
        let x = [0.5, 1.0];
        let a = mdp_final_step(&net, x, 0, &g, &s).unwrap();
        let b = mdp_final_step(&net, x, 0, &g, &s).unwrap();
        assert_eq!(a, b);
        let k = s.sqrt_alpha_bar(g.t(1));
        assert_eq!(a, [x[0] / k, x[1] / k]);
    }

    #[test]
    fn forward_trajectory_reconstructs() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let x0 = [2.0, -1.0];
        let tr = forward_trajectory(x0, 1, &mut SeededRng::new(9), &g, &s).unwrap();
        assert_eq!(tr.provenance, Provenance::ForwardFromData);
        assert_eq!(tr.states[0], x0);
        for n in 1..=4 {
            let e = tr.noises[n].unwrap();
            let x = s.noise(x0, g.t(n), e);
            assert!((x[0] - tr.states[n][0]).abs() < 1e-12);
        }
        assert!(forward_trajectory([f64::NAN, 0.0], 0, &mut SeededRng::new(1), &g, &s).is_err());
    }

    #[test]
    fn forward_trajectory_equals_x0_at_clean_time() {
        let mut betas = vec![0.0, 0.0];
        betas.extend(std::iter::repeat(0.01).take(998));
        let s = NoiseSchedule::from_betas(betas).unwrap();
        let g = TimeGrid::from_times(vec![0, 1, 999], &s).unwrap();
        let tr = forward_trajectory([1.0, 2.0], 0, &mut SeededRng::new(2), &g, &s).unwrap();
        assert_eq!(tr.states[1], [1.0, 2.0]);
    }

    #[test]
    fn euler_split_identity() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let e = EulerGrid::from_grid(&g, &s, 1.0).unwrap();
        for n in 1..=4 {
            let lo = e.sigma(n - 1);
            assert!((e.up(n).powi(2) + e.down(n).powi(2) - lo * lo).abs() < 1e-12 * lo.max(1.0).powi(2));
            assert!(e.up(n) <= lo);
        }
        assert!(EulerGrid::from_levels(vec![0.0, 2.0, 1.0], vec![0, 1, 2], 1.0).is_err());
    }

    #[test]
    fn euler_deterministic_split_is_plain_euler() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let e = EulerGrid::from_grid(&g, &s, 0.0).unwrap();
        let net = Denoiser::init(arch(), &mut SeededRng::new(2)).unwrap();
        let x = [3.0, -4.0];
        let st = euler_ancestral_step(&net, x, 3, 0, &mut SeededRng::new(1), &e, &s).unwrap();
        assert_eq!(st.scale, 0.0);
        let f = euler_x0(&net, x, 3, 0, &e, &s).unwrap();
        let h = e.sigma(2) - e.sigma(3);
        for k in 0..2 {
            let want = x[k] + (x[k] - f[k]) / e.sigma(3) * h;
            assert!((st.next[k] - want).abs() < 1e-12 * want.abs().max(1.0));
        }
    }

    #[test]
    fn euler_vanishing_level_lands_on_prediction() {
        let s = sched();
        let e = EulerGrid::from_levels(vec![0.0, 1e-12, 2.0], vec![0, 10, 500], 1.0).unwrap();
        let net = Denoiser::init(arch(), &mut SeededRng::new(2)).unwrap();
        let x = [1.0, 1.0];
        let st = euler_ancestral_step(&net, x, 2, 1, &mut SeededRng::new(3), &e, &s).unwrap();
        let f = euler_x0(&net, x, 2, 1, &e, &s).unwrap();
        assert!((st.next[0] - f[0]).abs() < 1e-9 && (st.next[1] - f[1]).abs() < 1e-9);
    }

    #[test]
    fn euler_zero_network_noise_variance() {
        let s = sched();
        let g = TimeGrid::new(4, &s).unwrap();
        let e = EulerGrid::from_grid(&g, &s, 1.0).unwrap();
        // f = x - sigma * eps = x for the zero network... only when eps = 0, which it is
        let net = Denoiser::zeros(arch()).unwrap();
        let mut rng = SeededRng::new(77);
        let n_draws = 100_000;
        let x = [0.5, -0.5];
        let xs: Vec<Point> = (0..n_draws)
            .map(|_| euler_ancestral_step(&net, x, 3, 0, &mut rng, &e, &s).unwrap().next)
            .collect();
        let m = xs.iter().map(|p| p[0]).sum::<f64>() / n_draws as f64;
        let v = xs.iter().map(|p| (p[0] - m).powi(2)).sum::<f64>() / n_draws as f64;
        let want = e.up(3).powi(2);
        assert!((v / want - 1.0).abs() < 0.02, "{v} vs {want}");
    }
}
