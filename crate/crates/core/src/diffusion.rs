//! The multi-step teacher: forward noising, the epsilon-matching loss, and
//! deterministic DDIM sampling.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::error::{contract, domain, Error, Result};
use crate::nn::{Architecture, Denoiser, ParamGradient, Query, Tape};
use crate::optim::{Adam, AdamConfig};
use crate::rng::{stage_stream, SeededRng};
use crate::schedule::{x0_from_eps, NoiseSchedule};
use crate::Point;

/// One draw from the forward marginal `q(x_t | x_0)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardDraw {
    pub x0: Point,
    pub t: usize,
    pub eps: Point,
    pub xt: Point,
}

pub fn forward_diffuse(
    x0: Point,
    t: usize,
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
) -> Result<ForwardDraw> {
    sched.check(t)?;
    let eps = rng.normal_point();
    Ok(ForwardDraw {
        x0,
        t,
        eps,
        xt: sched.noise(x0, t, eps),
    })
}

/// Mean of `||eps - eps_theta(x_t, t, c)||^2` over the given draws, with its gradient.
pub fn ddpm_loss_on_draws(net: &Denoiser, draws: &[(ForwardDraw, usize)]) -> Result<ParamGradient> {
    if draws.is_empty() {
        return Err(contract("ddpm loss needs a non-empty batch"));
    }
    let mut tape = Tape::new(net);
    let queries: Vec<Query> = draws
        .iter()
        .map(|(d, c)| Query::new(d.xt, d.t, *c))
        .collect();
    let (id, pred) = tape.eval(&queries)?;
    let scale = 1.0 / draws.len() as f64;
    let mut loss = 0.0;
    let mut cot = Vec::with_capacity(draws.len());
    for ((d, _), p) in draws.iter().zip(&pred) {
        let r = [d.eps[0] - p[0], d.eps[1] - p[1]];
        loss += r[0] * r[0] + r[1] * r[1];
        cot.push([-2.0 * scale * r[0], -2.0 * scale * r[1]]);
    }
    tape.backward(loss * scale, &[(id, cot)])
}

/// Epsilon-matching loss with `t ~ U[0, T)` and fresh noise per element.
pub fn ddpm_loss(
    net: &Denoiser,
    batch: &[(Point, usize)],
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
) -> Result<ParamGradient> {
    if batch.is_empty() {
        return Err(contract("ddpm loss needs a non-empty batch"));
    }
    let draws = batch
        .iter()
        .map(|&(x0, c)| {
            let t = rng.below(sched.timesteps());
            Ok((forward_diffuse(x0, t, rng, sched)?, c))
        })
        .collect::<Result<Vec<_>>>()?;
    ddpm_loss_on_draws(net, &draws)
}

/// Step count, batch size and optimizer settings of a training loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Cosine-decay the learning rate to `lr * final_lr_fraction` over the run.
    pub final_lr_fraction: f64,
}

impl TrainConfig {
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.steps <= 1 {
            return self.lr;
        }
        let p = step as f64 / (self.steps - 1) as f64;
        let floor = self.lr * self.final_lr_fraction;
        floor + 0.5 * (self.lr - floor) * (1.0 + (std::f64::consts::PI * p).cos())
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(domain("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..=1.0).contains(&self.final_lr_fraction) {
            return Err(domain("lr must be positive and final_lr_fraction in [0, 1]"));
        }
        Ok(())
    }
}

pub(crate) fn adam_for(net: &Denoiser, cfg: &TrainConfig) -> Adam {
    Adam::new(
        net.param_count(),
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    )
}

/// Apply one optimizer step at the scheduled learning rate, checking the loss.
pub(crate) fn update(
    opt: &mut Adam,
    net: &mut Denoiser,
    grad: &ParamGradient,
    cfg: &TrainConfig,
    step: usize,
) -> Result<()> {
    if !grad.loss.is_finite() || grad.grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Diverged {
            step,
            loss: grad.loss,
        });
    }
    opt.set_lr(cfg.lr_at(step));
    opt.step(net, grad)
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub net: Denoiser,
    pub losses: Vec<f64>,
}

/// Train an epsilon-prediction teacher on fresh draws from `dataset`.
pub fn train_teacher(
    dataset: &SyntheticDataset,
    arch: Architecture,
    cfg: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<TrainRun> {
    cfg.validate()?;
    if arch.timesteps != sched.timesteps() {
        return Err(contract("architecture and schedule disagree on T"));
    }
    let mut net = Denoiser::init(arch, &mut SeededRng::stream(seed, stage_stream("teacher-init")))?;
    let mut rng = SeededRng::stream(seed, stage_stream("teacher-train"));
    let mut opt = adam_for(&net, cfg);
    let k = dataset.n_conditions();
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<(Point, usize)> = (0..cfg.batch_size)
            .map(|_| {
                let c = rng.below(k);
                (dataset.sample(c, &mut rng), c)
            })
            .collect();
        let g = ddpm_loss(&net, &batch, &mut rng, sched)?;
        update(&mut opt, &mut net, &g, cfg, step)?;
        losses.push(g.loss);
    }
    Ok(TrainRun { net, losses })
}

/// Descending DDIM timesteps from `t_start` down to 0 in `n_steps` steps.
/// A single step evaluates only at `t_start`.
pub fn ddim_times(t_start: usize, n_steps: usize) -> Result<Vec<usize>> {
    if n_steps == 0 || n_steps > t_start + 1 {
        return Err(domain(format!(
            "ddim needs 1 <= n_steps <= {}, got {n_steps}",
            t_start + 1
        )));
    }
    if n_steps == 1 {
        return Ok(vec![t_start]);
    }
    Ok((0..n_steps)
        .rev()
        .map(|i| i * t_start / (n_steps - 1))
        .collect())
}

/// A deterministic DDIM path: `states[0]` is the start, `states[i + 1]` the
/// state after evaluating at `times[i]`; the last state is the clean sample.
#[derive(Debug, Clone, PartialEq)]
pub struct DdimPath {
    pub times: Vec<usize>,
    pub states: Vec<Point>,
}

impl DdimPath {
    pub fn sample(&self) -> Point {
        *self.states.last().expect("path has a start state")
    }
}

/// Run DDIM for a batch of independent starts `(x, t_start, c)`, each with
/// its own time sequence of `n_steps` (clamped to `t_start + 1`).
pub fn ddim_batch(
    net: &Denoiser,
    starts: &[Query],
    n_steps: usize,
    sched: &NoiseSchedule,
) -> Result<Vec<DdimPath>> {
    let mut paths = starts
        .iter()
        .map(|q| {
            sched.check(q.t)?;
            Ok(DdimPath {
                times: ddim_times(q.t, n_steps.min(q.t + 1))?,
                states: vec![q.x],
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let longest = paths.iter().map(|p| p.times.len()).max().unwrap_or(0);
    for i in 0..longest {
        let active: Vec<usize> = (0..paths.len()).filter(|&j| i < paths[j].times.len()).collect();
        let queries: Vec<Query> = active
            .iter()
            .map(|&j| Query::new(paths[j].sample(), paths[j].times[i], starts[j].c))
            .collect();
        let eps = net.forward_batch(&queries)?;
        for (&j, e) in active.iter().zip(eps) {
            let t = paths[j].times[i];
            let x = paths[j].sample();
            let x0 = x0_from_eps(x, t, e, sched)?;
            let next = match paths[j].times.get(i + 1) {
                Some(&tn) => {
                    let (a, s) = (sched.sqrt_alpha_bar(tn), sched.sqrt_one_minus_alpha_bar(tn));
                    [a * x0[0] + s * e[0], a * x0[1] + s * e[1]]
                }
                None => x0,
            };
            if !(next[0].is_finite() && next[1].is_finite()) {
                return Err(Error::NonFinite {
                    what: format!("ddim state at t = {t}"),
                    value: if next[0].is_finite() { next[1] } else { next[0] },
                });
            }
            paths[j].states.push(next);
        }
    }
    Ok(paths)
}

/// DDIM from `x_T` (drawn from `rng`) at the top timestep down to a clean sample.
pub fn ddim_sample(
    net: &Denoiser,
    c: usize,
    n_steps: usize,
    rng: &mut SeededRng,
    sched: &NoiseSchedule,
) -> Result<DdimPath> {
    if n_steps == 0 || n_steps > sched.timesteps() {
        return Err(domain(format!(
            "n_steps must lie in [1, {}], got {n_steps}",
            sched.timesteps()
        )));
    }
    let x_t = rng.normal_point();
    let top = sched.timesteps() - 1;
    Ok(ddim_batch(net, &[Query::new(x_t, top, c)], n_steps, sched)?.remove(0))
}

/// Many DDIM samples at once: sample `i` draws `x_T` from `rng.child(i)`.
pub fn ddim_sample_many(
    net: &Denoiser,
    conds: &[usize],
    n_steps: usize,
    rng: &SeededRng,
    sched: &NoiseSchedule,
) -> Result<Vec<Point>> {
    let top = sched.timesteps() - 1;
    let starts: Vec<Query> = conds
        .iter()
        .enumerate()
        .map(|(i, &c)| Query::new(rng.child(i as u64).normal_point(), top, c))
        .collect();
    let mut out = Vec::with_capacity(starts.len());
    for chunk in starts.chunks(1024) {
        out.extend(ddim_batch(net, chunk, n_steps, sched)?.iter().map(DdimPath::sample));
    }
    Ok(out)
}
