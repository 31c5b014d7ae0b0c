//! Pairwise sample optimization.
//!
//! Every loss here has the form `L = softplus(-m)` with margin `m = -beta * S`,
//! where `S = B(target) - B(reference)` and a branch score `B` sums, over grid
//! indices `n = 2..=N`, how much worse the current student explains the branch
//! than the frozen reference does:
//!
//! * forward branches (noised data) use epsilon errors
//!   `||eps_n - eps_theta(x_n)||^2 - ||eps_n - eps_pre(x_n)||^2`;
//! * generated branches use policy log-likelihood terms
//!   `(||x_{n-1} - mu_theta(x_n)||^2 - ||x_{n-1} - mu_pre(x_n)||^2) / (2 sigma_n^2)`.
//!
//! A positive margin means the student prefers the target branch more than
//! the reference does. The deterministic last transition never enters.

use serde::{Deserialize, Serialize};

use crate::data::SyntheticDataset;
use crate::diffusion::{adam_for, ddpm_loss, update, TrainConfig};
use crate::distill::{forward_trajectory, sample_trajectories, Provenance, TimeGrid, Trajectory};
use crate::error::{contract, domain, Error, Result};
use crate::nn::{Denoiser, ParamGradient, Query, Tape};
use crate::rng::{stage_stream, SeededRng};
use crate::schedule::{x0_from_eps, NoiseSchedule};
use crate::{sq_dist, Point};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PsoConfig {
    /// Regularization strength; larger values keep the student closer to the reference.
    pub beta: f64,
    /// Weight of the data-branch terms. Only 1 is supported.
    pub omega: f64,
}

impl PsoConfig {
    pub fn offline() -> Self {
        Self { beta: 50.0, omega: 1.0 }
    }

    pub fn online() -> Self {
        Self { beta: 5.0, omega: 1.0 }
    }

    pub fn full() -> Self {
        Self { beta: 5.0, omega: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(domain(format!("beta must be positive, got {}", self.beta)));
        }
        if self.omega != 1.0 {
            return Err(domain(format!("omega is fixed to 1, got {}", self.omega)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PairMode {
    /// Target noised from data, reference generated by the student.
    Full,
    /// Both branches noised from stored endpoints.
    Offline,
    /// Both branches generated by the student and labeled by a reward.
    Online,
}

impl PairMode {
    fn provenance(self) -> (Provenance, Provenance) {
        use Provenance::*;
        match self {
            PairMode::Full => (ForwardFromData, GeneratedByStudent),
            PairMode::Offline => (ForwardFromData, ForwardFromData),
            PairMode::Online => (GeneratedByStudent, GeneratedByStudent),
        }
    }
}

/// Target and reference trajectories that share a condition.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub mode: PairMode,
    pub target: Trajectory,
    pub reference: Trajectory,
}

impl TrajectoryPair {
    pub fn new(mode: PairMode, target: Trajectory, reference: Trajectory) -> Result<Self> {
        if target.condition != reference.condition {
            return Err(contract(format!(
                "pair branches have conditions {} and {}",
                target.condition, reference.condition
            )));
        }
        if target.steps() != reference.steps() {
            return Err(contract("pair branches have different lengths"));
        }
        if (target.provenance, reference.provenance) != mode.provenance() {
            return Err(contract(format!(
                "{mode:?} pair needs {:?} branches, got ({:?}, {:?})",
                mode.provenance(),
                target.provenance,
                reference.provenance
            )));
        }
        Ok(Self {
            mode,
            target,
            reference,
        })
    }

    pub fn condition(&self) -> usize {
        self.target.condition
    }

    /// Exchange the branches. Only valid when both branches share a provenance.
    pub fn swapped(&self) -> Result<Self> {
        Self::new(self.mode, self.reference.clone(), self.target.clone())
    }
}

/// Immutable snapshot of the student at the start of fine-tuning.
#[derive(Debug, Clone, PartialEq)]
pub struct FrozenReference {
    net: Denoiser,
    fingerprint: String,
}

impl FrozenReference {
    pub fn snapshot(student: &Denoiser) -> Self {
        Self {
            net: student.clone(),
            fingerprint: student.fingerprint(),
        }
    }

    pub fn net(&self) -> &Denoiser {
        &self.net
    }

    pub fn fingerprint(&self) -> &str {
        &self.fingerprint
    }
}

/// Loss value, per-pair margins and parameter gradient of a pair batch.
#[derive(Debug, Clone, PartialEq)]
pub struct PairLoss {
    pub margins: Vec<f64>,
    pub gradient: ParamGradient,
}

impl PairLoss {
    pub fn loss(&self) -> f64 {
        self.gradient.loss
    }

    pub fn mean_margin(&self) -> f64 {
        self.margins.iter().sum::<f64>() / self.margins.len() as f64
    }

    /// Fraction of pairs with a strictly positive margin.
    pub fn accuracy(&self) -> f64 {
        self.margins.iter().filter(|m| **m > 0.0).count() as f64 / self.margins.len() as f64
    }
}

/// `-log(sigmoid(m)) = log(1 + exp(-m))`, evaluated without overflow.
pub fn loss_from_margin(m: f64) -> f64 {
    if m > 0.0 {
        (-m).exp().ln_1p()
    } else {
        -m + m.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

enum TermKind {
    /// Epsilon error against the recorded forward noise.
    Eps { eps: Point },
    /// Policy error against the recorded next state.
    Mean {
        next: Point,
        weight: f64,
        a_prev: f64,
    },
}

struct Term {
    pair: usize,
    branch: usize,
    kind: TermKind,
}

fn branch_terms(
    tr: &Trajectory,
    pair: usize,
    branch: usize,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    queries: &mut Vec<Query>,
    terms: &mut Vec<Term>,
) -> Result<()> {
    for n in grid.loss_indices() {
        let kind = match tr.provenance {
            Provenance::ForwardFromData => TermKind::Eps {
                eps: tr.noises[n]
                    .ok_or_else(|| contract(format!("forward branch has no noise at grid index {n}")))?,
            },
            Provenance::GeneratedByStudent => TermKind::Mean {
                next: tr.states[n - 1],
                weight: 0.5 / grid.sigma2(n),
                a_prev: sched.sqrt_alpha_bar(grid.t(n - 1)),
            },
        };
        queries.push(Query::new(tr.states[n], grid.t(n), tr.condition));
        terms.push(Term { pair, branch, kind });
    }
    Ok(())
}

/// Shared evaluation of all three losses over a batch of pairs.
fn pair_loss(
    student: &Denoiser,
    reference: &FrozenReference,
    pairs: &[TrajectoryPair],
    mode: PairMode,
    cfg: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<PairLoss> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(contract("pair loss needs at least one pair"));
    }
    if student.arch() != reference.net().arch() {
        return Err(contract("student and frozen reference differ in architecture"));
    }
    let mut queries = Vec::new();
    let mut terms = Vec::new();
    for (i, p) in pairs.iter().enumerate() {
        if p.mode != mode {
            return Err(contract(format!("expected {mode:?} pairs, got {:?}", p.mode)));
        }
        if p.target.steps() != grid.steps() {
            return Err(contract(format!(
                "trajectory has {} steps, grid has {}",
                p.target.steps(),
                grid.steps()
            )));
        }
        branch_terms(&p.target, i, 0, grid, sched, &mut queries, &mut terms)?;
        branch_terms(&p.reference, i, 1, grid, sched, &mut queries, &mut terms)?;
    }

    let mut tape = Tape::new(student);
    let (id, out) = tape.eval(&queries)?;
    let out_pre = reference.net().forward_batch(&queries)?;

    // error terms, then per-branch sums in a fixed order
    let mut scores = vec![[0.0f64; 2]; pairs.len()];
    let mut partial = Vec::with_capacity(terms.len());
    for ((term, q), (e, e_pre)) in terms.iter().zip(&queries).zip(out.iter().zip(&out_pre)) {
        let (diff, dgrad) = match term.kind {
            TermKind::Eps { eps } => {
                let r = [eps[0] - e[0], eps[1] - e[1]];
                let d = sq_dist(eps, *e) - sq_dist(eps, *e_pre);
                (cfg.omega * d, [-2.0 * cfg.omega * r[0], -2.0 * cfg.omega * r[1]])
            }
            TermKind::Mean {
                next,
                weight,
                a_prev,
            } => {
                let f = x0_from_eps(q.x, q.t, *e, sched)?;
                let f_pre = x0_from_eps(q.x, q.t, *e_pre, sched)?;
                let mu = [a_prev * f[0], a_prev * f[1]];
                let mu_pre = [a_prev * f_pre[0], a_prev * f_pre[1]];
                let d = weight * (sq_dist(next, mu) - sq_dist(next, mu_pre));
                // d mu / d eps
                let k = -a_prev * sched.sqrt_one_minus_alpha_bar(q.t) / sched.sqrt_alpha_bar(q.t);
                let r = [next[0] - mu[0], next[1] - mu[1]];
                (d, [-2.0 * weight * r[0] * k, -2.0 * weight * r[1] * k])
            }
        };
        scores[term.pair][term.branch] += diff;
        partial.push(dgrad);
    }

    let scale = 1.0 / pairs.len() as f64;
    let mut loss = 0.0;
    let mut margins = Vec::with_capacity(pairs.len());
    let mut dl_ds = Vec::with_capacity(pairs.len());
    for s in &scores {
        let m = -cfg.beta * (s[0] - s[1]);
        if !m.is_finite() {
            return Err(Error::NonFinite {
                what: "pair margin".into(),
                value: m,
            });
        }
        loss += loss_from_margin(m);
        margins.push(m);
        dl_ds.push(scale * cfg.beta * sigmoid(-m));
    }
    let cot: Vec<Point> = terms
        .iter()
        .zip(partial)
        .map(|(term, g)| {
            let w = dl_ds[term.pair] * if term.branch == 0 { 1.0 } else { -1.0 };
            [w * g[0], w * g[1]]
        })
        .collect();
    let gradient = tape.backward(loss * scale, &[(id, cot)])?;
    Ok(PairLoss { margins, gradient })
}

/// Full-trajectory loss: forward data target against a generated reference.
pub fn pso_loss(
    student: &Denoiser,
    reference: &FrozenReference,
    pairs: &[TrajectoryPair],
    cfg: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<PairLoss> {
    pair_loss(student, reference, pairs, PairMode::Full, cfg, grid, sched)
}

/// Offline loss: both branches noised from stored endpoints.
pub fn pso_offline_loss(
    student: &Denoiser,
    reference: &FrozenReference,
    pairs: &[TrajectoryPair],
    cfg: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<PairLoss> {
    pair_loss(student, reference, pairs, PairMode::Offline, cfg, grid, sched)
}

/// Online loss: both branches generated by the student and reward-labeled.
pub fn pso_online_loss(
    student: &Denoiser,
    reference: &FrozenReference,
    pairs: &[TrajectoryPair],
    cfg: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
) -> Result<PairLoss> {
    pair_loss(student, reference, pairs, PairMode::Online, cfg, grid, sched)
}

/// Analytic reward on endpoints, per condition.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum RewardModel {
    /// `-||x - target_c||^2`.
    ModeDistance { targets: Vec<Point> },
    /// `normal_c . x - offset_c`.
    HalfPlane { normals: Vec<Point>, offsets: Vec<f64> },
    /// `-(||x - center|| - radius)^2`, shared by all conditions.
    RingRadius { center: Point, radius: f64 },
}

impl RewardModel {
    /// Prefer the first declared mode of every condition.
    pub fn preferred_modes(dataset: &SyntheticDataset) -> Self {
        RewardModel::ModeDistance {
            targets: (0..dataset.n_conditions())
                .map(|c| dataset.mode_centers(c)[0])
                .collect(),
        }
    }

    pub fn validate(&self, n_conditions: usize) -> Result<()> {
        let per_condition = match self {
            RewardModel::ModeDistance { targets } => Some(targets.len()),
            RewardModel::HalfPlane { normals, offsets } => {
                if normals.len() != offsets.len() {
                    return Err(domain("half-plane reward needs one offset per normal"));
                }
                Some(normals.len())
            }
            RewardModel::RingRadius { radius, .. } => {
                if !(*radius >= 0.0) {
                    return Err(domain("ring reward radius must be non-negative"));
                }
                None
            }
        };
        match per_condition {
            Some(k) if k != n_conditions => Err(domain(format!(
                "reward declares {k} conditions, dataset has {n_conditions}"
            ))),
            _ => Ok(()),
        }
    }

    pub fn reward(&self, x: Point, c: usize) -> Result<f64> {
        let r = match self {
            RewardModel::ModeDistance { targets } => -sq_dist(x, *cond(targets, c)?),
            RewardModel::HalfPlane { normals, offsets } => {
                let n = cond(normals, c)?;
                n[0] * x[0] + n[1] * x[1] - offsets[c]
            }
            RewardModel::RingRadius { center, radius } => {
                let d = crate::dist(x, *center) - radius;
                -d * d
            }
        };
        Ok(r)
    }
}

fn cond<T>(v: &[T], c: usize) -> Result<&T> {
    v.get(c)
        .ok_or_else(|| domain(format!("condition {c} outside [0, {})", v.len())))
}

/// Order two generated trajectories by the reward of their endpoints.
/// Exact ties are discarded.
pub fn label_pair(a: Trajectory, b: Trajectory, rm: &RewardModel) -> Result<Option<TrajectoryPair>> {
    if a.condition != b.condition {
        return Err(contract(format!(
            "cannot label trajectories of conditions {} and {}",
            a.condition, b.condition
        )));
    }
    let ra = rm.reward(a.endpoint(), a.condition)?;
    let rb = rm.reward(b.endpoint(), b.condition)?;
    if ra == rb {
        return Ok(None);
    }
    let (t, r) = if ra > rb { (a, b) } else { (b, a) };
    TrajectoryPair::new(PairMode::Online, t, r).map(Some)
}

/// One record of an offline preference dataset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreferencePair {
    pub condition: usize,
    pub target: Point,
    pub reference: Point,
}

impl PreferencePair {
    /// `condition,target_x,target_y,reference_x,reference_y`, shortest round-trip decimals.
    pub fn to_line(&self) -> String {
        format!(
            "{},{},{},{},{}",
            self.condition, self.target[0], self.target[1], self.reference[0], self.reference[1]
        )
    }

    pub fn parse_line(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim().split(',').map(str::trim).collect();
        if f.len() != 5 {
            return Err(Error::Parse(format!("pair record needs 5 fields, got {}: {line:?}", f.len())));
        }
        let num = |s: &str| -> Result<f64> {
            let v: f64 = s.parse().map_err(|_| Error::Parse(format!("bad number {s:?}")))?;
            crate::error::check_finite("pair coordinate", v)
        };
        Ok(Self {
            condition: f[0]
                .parse()
                .map_err(|_| Error::Parse(format!("bad condition id {:?}", f[0])))?,
            target: [num(f[1])?, num(f[2])?],
            reference: [num(f[3])?, num(f[4])?],
        })
    }

    /// Parse a whole file; blank lines and `#` comments are skipped.
    pub fn parse_all(text: &str) -> Result<Vec<Self>> {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .map(|(i, l)| {
                Self::parse_line(l).map_err(|e| Error::Parse(format!("line {}: {e}", i + 1)))
            })
            .collect()
    }
}

/// Draw data pairs for each condition and keep those whose endpoints sit in
/// different modes, with the higher-reward point as target.
pub fn sample_preference_pairs(
    dataset: &SyntheticDataset,
    rm: &RewardModel,
    count: usize,
    rng: &mut SeededRng,
) -> Result<Vec<PreferencePair>> {
    rm.validate(dataset.n_conditions())?;
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > 100 * count.max(1) {
            return Err(domain("could not find enough cross-mode pairs"));
        }
        let c = rng.below(dataset.n_conditions());
        let a = dataset.sample(c, rng);
        let b = dataset.sample(c, rng);
        let centers = dataset.mode_centers(c);
        if nearest(&centers, a) == nearest(&centers, b) {
            continue;
        }
        let (ra, rb) = (rm.reward(a, c)?, rm.reward(b, c)?);
        if ra == rb {
            continue;
        }
        let (t, r) = if ra > rb { (a, b) } else { (b, a) };
        out.push(PreferencePair {
            condition: c,
            target: t,
            reference: r,
        });
    }
    Ok(out)
}

pub(crate) fn nearest(centers: &[Point], x: Point) -> usize {
    let mut best = 0;
    for (i, m) in centers.iter().enumerate() {
        if sq_dist(x, *m) < sq_dist(x, centers[best]) {
            best = i;
        }
    }
    best
}

/// Metrics of one optimizer step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub margin: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub net: Denoiser,
    pub reference_fingerprint: String,
    pub metrics: Vec<StepMetrics>,
    pub warnings: Vec<String>,
}

impl FinetuneRun {
    fn start(student: &Denoiser) -> (FrozenReference, Self) {
        let reference = FrozenReference::snapshot(student);
        let run = Self {
            net: student.clone(),
            reference_fingerprint: reference.fingerprint().to_string(),
            metrics: Vec::new(),
            warnings: Vec::new(),
        };
        (reference, run)
    }

    fn record(&mut self, step: usize, l: &PairLoss) {
        self.metrics.push(StepMetrics {
            step,
            loss: l.loss(),
            margin: l.mean_margin(),
            accuracy: l.accuracy(),
        });
    }
}

/// Offline fine-tuning on stored preference pairs. Every step draws a batch
/// of pairs and noises both endpoints to all grid times.
pub fn finetune_offline(
    student: &Denoiser,
    pairs: &[PreferencePair],
    train: &TrainConfig,
    pso: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FinetuneRun> {
    train.validate()?;
    pso.validate()?;
    let (reference, mut run) = FinetuneRun::start(student);
    if train.steps == 0 {
        return Ok(run);
    }
    if pairs.is_empty() {
        return Err(contract("offline fine-tuning needs at least one pair"));
    }
    let mut rng = SeededRng::stream(seed, stage_stream("finetune-offline"));
    let mut opt = adam_for(&run.net, train);
    for step in 0..train.steps {
        let batch = (0..train.batch_size)
            .map(|_| {
                let p = pairs[rng.below(pairs.len())];
                let t = forward_trajectory(p.target, p.condition, &mut rng, grid, sched)?;
                let r = forward_trajectory(p.reference, p.condition, &mut rng, grid, sched)?;
                TrajectoryPair::new(PairMode::Offline, t, r)
            })
            .collect::<Result<Vec<_>>>()?;
        let l = pso_offline_loss(&run.net, &reference, &batch, pso, grid, sched)?;
        update(&mut opt, &mut run.net, &l.gradient, train, step)?;
        run.record(step, &l);
    }
    Ok(run)
}

/// Settings of the online loop: each round samples fresh pairs from the
/// current student and trains one epoch on the labeled ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OnlineConfig {
    pub rounds: usize,
    pub pairs_per_round: usize,
    pub batch_size: usize,
    pub lr: f64,
}

impl OnlineConfig {
    fn train(&self) -> TrainConfig {
        TrainConfig {
            steps: 0,
            batch_size: self.batch_size,
            lr: self.lr,
            final_lr_fraction: 1.0,
        }
    }
}

/// Online fine-tuning under a reward model. The frozen reference is taken
/// once at entry and kept for every round.
pub fn finetune_online(
    student: &Denoiser,
    n_conditions: usize,
    rm: &RewardModel,
    cfg: &OnlineConfig,
    pso: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FinetuneRun> {
    let train = cfg.train();
    train.validate()?;
    pso.validate()?;
    rm.validate(n_conditions)?;
    if n_conditions == 0 {
        return Err(domain("online fine-tuning needs at least one condition"));
    }
    let (reference, mut run) = FinetuneRun::start(student);
    let base = SeededRng::stream(seed, stage_stream("finetune-online"));
    let mut opt = adam_for(&run.net, &train);
    let mut step = 0;
    for round in 0..cfg.rounds {
        let mut rng = base.child(round as u64);
        let p = cfg.pairs_per_round;
        let conds: Vec<usize> = (0..2 * p).map(|i| (i / 2 + round * p) % n_conditions).collect();
        let mut rngs: Vec<SeededRng> = (0..2 * p).map(|i| rng.child(i as u64)).collect();
        let trajs = sample_trajectories(&run.net, &conds, &mut rngs, grid, sched)?;
        let mut labeled = Vec::with_capacity(p);
        let mut it = trajs.into_iter();
        while let (Some(a), Some(b)) = (it.next(), it.next()) {
            if let Some(pair) = label_pair(a, b, rm)? {
                labeled.push(pair);
            }
        }
        if labeled.is_empty() {
            let msg = format!("round {round}: all {p} pairs tied; skipped");
            log::warn!("{msg}");
            run.warnings.push(msg);
            continue;
        }
        shuffle(&mut labeled, &mut rng);
        for batch in labeled.chunks(cfg.batch_size) {
            let l = pso_online_loss(&run.net, &reference, batch, pso, grid, sched)?;
            update(&mut opt, &mut run.net, &l.gradient, &train, step)?;
            run.record(step, &l);
            step += 1;
        }
    }
    Ok(run)
}

fn shuffle<T>(v: &mut [T], rng: &mut SeededRng) {
    for i in (1..v.len()).rev() {
        v.swap(i, rng.below(i + 1));
    }
}

/// Full-trajectory fine-tuning towards a small target set. References are
/// sampled from the current student at every step.
pub fn finetune_full(
    student: &Denoiser,
    targets: &[(Point, usize)],
    train: &TrainConfig,
    pso: &PsoConfig,
    grid: &TimeGrid,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FinetuneRun> {
    train.validate()?;
    pso.validate()?;
    let (reference, mut run) = FinetuneRun::start(student);
    if train.steps == 0 {
        return Ok(run);
    }
    if targets.is_empty() {
        return Err(contract("full fine-tuning needs at least one target point"));
    }
    let base = SeededRng::stream(seed, stage_stream("finetune-full"));
    let mut opt = adam_for(&run.net, train);
    for step in 0..train.steps {
        let mut rng = base.child(step as u64);
        let picks: Vec<(Point, usize)> = (0..train.batch_size)
            .map(|_| targets[rng.below(targets.len())])
            .collect();
        let forward = picks
            .iter()
            .map(|&(x, c)| forward_trajectory(x, c, &mut rng, grid, sched))
            .collect::<Result<Vec<_>>>()?;
        let conds: Vec<usize> = picks.iter().map(|p| p.1).collect();
        let mut rngs: Vec<SeededRng> = (0..conds.len()).map(|i| rng.child(i as u64)).collect();
        let generated = sample_trajectories(&run.net, &conds, &mut rngs, grid, sched)?;
        let batch = forward
            .into_iter()
            .zip(generated)
            .map(|(t, r)| TrajectoryPair::new(PairMode::Full, t, r))
            .collect::<Result<Vec<_>>>()?;
        let l = pso_loss(&run.net, &reference, &batch, pso, grid, sched)?;
        update(&mut opt, &mut run.net, &l.gradient, train, step)?;
        run.record(step, &l);
    }
    Ok(run)
}

/// Plain epsilon-matching on the target points, applied to the student.
pub fn naive_finetune(
    student: &Denoiser,
    targets: &[(Point, usize)],
    train: &TrainConfig,
    sched: &NoiseSchedule,
    seed: u64,
) -> Result<FinetuneRun> {
    train.validate()?;
    let (_, mut run) = FinetuneRun::start(student);
    if train.steps == 0 {
        return Ok(run);
    }
    if targets.is_empty() {
        return Err(contract("naive fine-tuning needs at least one target point"));
    }
    let mut rng = SeededRng::stream(seed, stage_stream("finetune-naive"));
    let mut opt = adam_for(&run.net, train);
    for step in 0..train.steps {
        let batch: Vec<(Point, usize)> = (0..train.batch_size)
            .map(|_| targets[rng.below(targets.len())])
            .collect();
        let g = ddpm_loss(&run.net, &batch, &mut rng, sched)?;
        update(&mut opt, &mut run.net, &g, train, step)?;
        run.metrics.push(StepMetrics {
            step,
            loss: g.loss,
            margin: 0.0,
            accuracy: 0.0,
        });
    }
    Ok(run)
}
