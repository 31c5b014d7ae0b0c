//! Command implementations and the dispatcher that wraps each one with a manifest.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{anyhow, bail, Context, Result};
use clap::Parser;
use pso_core::checkpoint::{Checkpoint, Role};
use pso_core::config::RunConfig;
use pso_core::data::{Generator, SyntheticDataset};
use pso_core::diffusion::{ddim_sample_many, train_teacher};
use pso_core::distill::{distill_student, sample_endpoints, TimeGrid};
use pso_core::metrics::{
    compare_runs, energy_distance_points, occupancy, reward_stats_points, CompareThresholds,
    MetricReport,
};
use pso_core::pso::{
    finetune_full, finetune_offline, finetune_online, naive_finetune, sample_preference_pairs,
    FinetuneRun, PreferencePair, RewardModel,
};
use pso_core::rng::stage_stream;
use pso_core::{dist, Denoiser, Error, NoiseSchedule, Point, SeededRng};

use crate::cli::{Cli, Command, ConfigArgs, EvalTarget, FinetuneMode};
use crate::io;
use crate::manifest::{file_sha256, Manifest};

pub const OUTPUT_ROOT_ENV: &str = "PSO_OUTPUT_ROOT";

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from("."))
}

/// A parsed configuration plus everything derived from it.
pub struct Ctx {
    pub cfg: RunConfig,
    pub config_text: String,
    pub hash: String,
    pub run_dir: PathBuf,
    pub sched: NoiseSchedule,
    pub grid: TimeGrid,
    pub dataset: SyntheticDataset,
}

impl Ctx {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let sched = NoiseSchedule::from_spec(&cfg.schedule)?;
        let grid = TimeGrid::from_spec(&cfg.grid, &sched)?;
        let dataset = SyntheticDataset::new(cfg.dataset_spec())?;
        Ok(Self {
            config_text: cfg.to_toml(),
            hash: cfg.hash(),
            run_dir: output_root().join(&cfg.output_dir),
            cfg,
            sched,
            grid,
            dataset,
        })
    }

    fn stage_dir(&self, args: &ConfigArgs, stage: &str) -> PathBuf {
        args.out.clone().unwrap_or_else(|| match stage {
            "" => self.run_dir.clone(),
            s => self.run_dir.join(s),
        })
    }
}

/// Apply `key=value` overrides to a TOML document. Only existing scalar
/// fields can be overridden.
pub fn apply_overrides(text: &str, overrides: &[String]) -> Result<RunConfig> {
    let mut doc: toml::Table = toml::from_str(text).map_err(|e| Error::Parse(e.to_string()))?;
    for o in overrides {
        let (key, raw) = o
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("override {o:?} is not KEY=VALUE")))?;
        let parts: Vec<&str> = key.trim().split('.').collect();
        let (last, path) = parts.split_last().expect("split yields one part");
        let mut table = &mut doc;
        for p in path {
            table = table
                .get_mut(*p)
                .and_then(toml::Value::as_table_mut)
                .ok_or_else(|| Error::Parse(format!("override {key:?}: no table {p:?}")))?;
        }
        let slot = table
            .get_mut(*last)
            .ok_or_else(|| Error::Parse(format!("override {key:?}: no such field")))?;
        if slot.is_table() || slot.is_array() {
            return Err(Error::Parse(format!("override {key:?}: only scalar fields can be set")).into());
        }
        let raw = raw.trim();
        *slot = toml::from_str::<toml::Table>(&format!("v = {raw}"))
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    }
    let cfg = RunConfig::from_toml(&toml::to_string(&doc).expect("table serializes"))?;
    Ok(cfg)
}

/// Files written by one command, with their digests.
pub struct Outputs {
    pub dir: PathBuf,
    pub files: BTreeMap<String, String>,
    pub inputs: BTreeMap<String, String>,
    pub warnings: Vec<String>,
    pub stdout: String,
}

impl Outputs {
    fn new(dir: PathBuf) -> Result<Self> {
        std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
        Ok(Self {
            dir,
            files: BTreeMap::new(),
            inputs: BTreeMap::new(),
            warnings: Vec::new(),
            stdout: String::new(),
        })
    }

    fn write(&mut self, name: &str, content: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, content).with_context(|| format!("writing {}", path.display()))?;
        self.files.insert(name.to_string(), file_sha256(&path)?);
        Ok(())
    }

    fn read(&mut self, path: &Path) -> Result<String> {
        let text = io::read_text(path)?;
        self.inputs.insert(path.display().to_string(), file_sha256(path)?);
        Ok(text)
    }
}

/// A loaded model ready for sampling.
pub enum Model {
    Teacher(Denoiser),
    Student { net: Denoiser, grid: TimeGrid, role: Role },
}

impl Model {
    pub fn role(&self) -> Role {
        match self {
            Model::Teacher(_) => Role::Teacher,
            Model::Student { role, .. } => *role,
        }
    }

    pub fn net(&self) -> &Denoiser {
        match self {
            Model::Teacher(n) | Model::Student { net: n, .. } => n,
        }
    }

    pub fn steps(&self, ctx: &Ctx, steps: Option<usize>) -> usize {
        match self {
            Model::Teacher(_) => steps.unwrap_or(ctx.cfg.eval.teacher_steps),
            Model::Student { grid, .. } => steps.unwrap_or(grid.steps()),
        }
    }

    /// Endpoint `i` uses `rng.child(i)`.
    pub fn sample(
        &self,
        ctx: &Ctx,
        conds: &[usize],
        steps: Option<usize>,
        rng: &SeededRng,
    ) -> Result<Vec<Point>> {
        let n = self.steps(ctx, steps);
        Ok(match self {
            Model::Teacher(net) => ddim_sample_many(net, conds, n, rng, &ctx.sched)?,
            Model::Student { net, grid, .. } => {
                let g = if n == grid.steps() {
                    grid.clone()
                } else {
                    TimeGrid::new(n, &ctx.sched)?
                };
                sample_endpoints(net, conds, rng, &g, &ctx.sched)?
            }
        })
    }
}

/// Load a checkpoint and check it against the configured architecture,
/// schedule and grid.
fn load_model(ctx: &Ctx, path: &Path, outs: &mut Outputs) -> Result<(Checkpoint, Model)> {
    let ck = Checkpoint::from_json(&outs.read(path)?)
        .with_context(|| format!("loading checkpoint {}", path.display()))?;
    let net = ck.denoiser(&ctx.cfg.architecture())?;
    ck.check_schedule(&ctx.cfg.schedule)?;
    let model = match ck.role {
        Role::Teacher => Model::Teacher(net),
        role => {
            let grid = ck.time_grid(&ctx.sched)?;
            if grid != ctx.grid {
                return Err(Error::Compatibility(format!(
                    "checkpoint grid {:?} differs from configured grid {:?}",
                    grid.times(),
                    ctx.grid.times()
                ))
                .into());
            }
            Model::Student { net, grid, role }
        }
    };
    Ok((ck, model))
}

fn check_conditions(ctx: &Ctx, points: &[(Point, usize)]) -> Result<()> {
    for (_, c) in points {
        ctx.dataset.check_condition(*c)?;
    }
    Ok(())
}

fn gen_data(ctx: &Ctx, outs: &mut Outputs) -> Result<()> {
    let cfg = &ctx.cfg;
    let preview = SyntheticDataset::generate(
        cfg.dataset_spec(),
        cfg.dataset.preview_per_condition,
        &SeededRng::stream(cfg.seed, stage_stream("gen-data-preview")),
    )?;
    let pts: Vec<(Point, usize)> = (0..preview.n_conditions())
        .flat_map(|c| preview.cached(c).iter().map(move |p| (*p, c)))
        .collect();
    outs.write("dataset.csv", &io::points_csv(&pts))?;

    let rm = cfg.reward.resolve(&ctx.dataset)?;
    let mut rng = SeededRng::stream(cfg.seed, stage_stream("gen-data-pairs"));
    let pairs = sample_preference_pairs(&ctx.dataset, &rm, cfg.offline.pairs, &mut rng)?;
    outs.write("pairs.csv", &io::pairs_file(&pairs))?;

    let cc = &cfg.concept;
    let mut rng = SeededRng::stream(cfg.seed, stage_stream("gen-data-concept"));
    let concept: Vec<(Point, usize)> = (0..cc.points)
        .map(|_| {
            let z = rng.normal_point();
            (
                [cc.centroid[0] + cc.spread * z[0], cc.centroid[1] + cc.spread * z[1]],
                cc.condition,
            )
        })
        .collect();
    outs.write("concept.csv", &io::points_csv(&concept))?;
    Ok(())
}

fn train_teacher_cmd(ctx: &Ctx, outs: &mut Outputs) -> Result<()> {
    let run = train_teacher(&ctx.dataset, ctx.cfg.architecture(), &ctx.cfg.teacher, &ctx.sched, ctx.cfg.seed)?;
    let ck = Checkpoint::new(Role::Teacher, &run.net, ctx.cfg.schedule, None, ctx.hash.clone(), ctx.cfg.seed)?;
    outs.write("teacher.json", &ck.to_json())?;
    outs.write("loss.csv", &io::loss_csv(&run.losses))?;
    Ok(())
}

fn distill_cmd(ctx: &Ctx, teacher: &Path, outs: &mut Outputs) -> Result<()> {
    let (_, model) = load_model(ctx, teacher, outs)?;
    let Model::Teacher(net) = model else {
        bail!(Error::Compatibility(format!("{} is not a teacher checkpoint", teacher.display())));
    };
    let run = distill_student(&net, &ctx.dataset, &ctx.cfg.distill, &ctx.grid, &ctx.sched, ctx.cfg.seed)?;
    let ck = Checkpoint::new(Role::Student, &run.net, ctx.cfg.schedule, Some(&ctx.grid), ctx.hash.clone(), ctx.cfg.seed)?;
    outs.write("student.json", &ck.to_json())?;
    outs.write("loss.csv", &io::loss_csv(&run.losses))?;
    Ok(())
}

fn finetune_cmd(
    ctx: &Ctx,
    mode: FinetuneMode,
    student: &Path,
    data: Option<&Path>,
    outs: &mut Outputs,
) -> Result<()> {
    let cfg = &ctx.cfg;
    let (_, model) = load_model(ctx, student, outs)?;
    let Model::Student { net, grid, .. } = model else {
        bail!(Error::Compatibility(format!("{} is not a student checkpoint", student.display())));
    };
    let mut data_text = || -> Result<String> {
        let path = data.ok_or_else(|| Error::Contract(format!("--data is required for mode {}", mode.name())))?;
        outs.read(path)
    };
    let run: FinetuneRun = match mode {
        FinetuneMode::Offline => {
            let pairs = PreferencePair::parse_all(&data_text()?)?;
            let pts: Vec<(Point, usize)> = pairs.iter().map(|p| (p.target, p.condition)).collect();
            check_conditions(ctx, &pts)?;
            finetune_offline(&net, &pairs, &cfg.offline.train, &cfg.offline.pso, &grid, &ctx.sched, cfg.seed)?
        }
        FinetuneMode::Online => {
            if data.is_some() {
                bail!(Error::Contract("online fine-tuning takes no --data".into()));
            }
            let rm = cfg.reward.resolve(&ctx.dataset)?;
            let k = ctx.dataset.n_conditions();
            finetune_online(&net, k, &rm, &cfg.online.train, &cfg.online.pso, &grid, &ctx.sched, cfg.seed)?
        }
        FinetuneMode::Full => {
            let targets = io::parse_targets(&data_text()?)?;
            check_conditions(ctx, &targets)?;
            finetune_full(&net, &targets, &cfg.concept.train, &cfg.concept.pso, &grid, &ctx.sched, cfg.seed)?
        }
        FinetuneMode::Naive => {
            let targets = io::parse_targets(&data_text()?)?;
            check_conditions(ctx, &targets)?;
            naive_finetune(&net, &targets, &cfg.naive.train, &ctx.sched, cfg.seed)?
        }
    };
    let ck = Checkpoint::new(Role::TunedStudent, &run.net, cfg.schedule, Some(&grid), ctx.hash.clone(), cfg.seed)?;
    outs.write("tuned.json", &ck.to_json())?;
    outs.write("metrics.csv", &io::metrics_csv(&run.metrics))?;
    let summary = serde_json::json!({
        "mode": mode.name(),
        "reference_fingerprint": run.reference_fingerprint,
        "tuned_fingerprint": run.net.fingerprint(),
        "steps": run.metrics.len(),
        "final": run.metrics.last(),
    });
    outs.write("summary.json", &format!("{}\n", serde_json::to_string_pretty(&summary)?))?;
    outs.warnings.extend(run.warnings);
    Ok(())
}

fn sample_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    n: usize,
    steps: Option<usize>,
    seed: u64,
    condition: Option<usize>,
    outs: &mut Outputs,
) -> Result<()> {
    let (_, model) = load_model(ctx, checkpoint, outs)?;
    let k = ctx.dataset.n_conditions();
    let conds: Vec<usize> = match condition {
        Some(c) => {
            ctx.dataset.check_condition(c)?;
            vec![c; n]
        }
        None => (0..n).map(|i| i % k).collect(),
    };
    let pts = model.sample(ctx, &conds, steps, &SeededRng::new(seed))?;
    let rows: Vec<(Point, usize)> = pts.into_iter().zip(conds).collect();
    outs.write("samples.csv", &io::points_csv(&rows))?;
    Ok(())
}

/// Sampler for the reference distribution of an evaluation target.
fn target_generator(ctx: &Ctx, target: EvalTarget, c: usize) -> Result<Generator> {
    let spec = &ctx.dataset.spec().conditions[c];
    Ok(match target {
        EvalTarget::Data => spec.clone(),
        EvalTarget::Preferred => match spec {
            Generator::GaussianMixture { means, stds, .. } => Generator::GaussianMixture {
                means: vec![means[0]],
                stds: vec![stds[0]],
                weights: vec![1.0],
            },
            _ => bail!(Error::Domain(format!(
                "condition {c} has no declared modes; the preferred target needs a mixture"
            ))),
        },
        EvalTarget::Concept => Generator::GaussianMixture {
            means: vec![ctx.cfg.concept.centroid],
            stds: vec![ctx.cfg.concept.spread],
            weights: vec![1.0],
        },
    })
}

/// Evaluate `model` against `target` with the held-out evaluation seed.
/// Returns the report and the evaluated samples.
pub fn evaluate(
    ctx: &Ctx,
    model: &Model,
    target: EvalTarget,
    steps: Option<usize>,
    label: &str,
) -> Result<(MetricReport, Vec<(Point, usize)>)> {
    let cfg = &ctx.cfg;
    let conds: Vec<usize> = match target {
        EvalTarget::Concept => vec![cfg.concept.condition],
        _ => (0..ctx.dataset.n_conditions()).collect(),
    };
    let per = cfg.eval.samples / conds.len();
    let rm = match target {
        EvalTarget::Concept => RewardModel::ModeDistance {
            targets: vec![cfg.concept.centroid; ctx.dataset.n_conditions()],
        },
        _ => cfg.reward.resolve(&ctx.dataset)?,
    };
    let sample_rng = SeededRng::stream(cfg.eval.seed, stage_stream("eval-samples"));
    let reference_rng = SeededRng::stream(cfg.eval.seed, stage_stream("eval-reference"));
    let mut ed = 0.0;
    let mut rewards = Vec::new();
    let mut occ = Vec::new();
    let mut rows = Vec::new();
    for &c in &conds {
        let xs = model.sample(ctx, &vec![c; per], steps, &sample_rng.child(c as u64))?;
        let generator = target_generator(ctx, target, c)?;
        let mut r = reference_rng.child(c as u64);
        let reference: Vec<Point> = (0..per).map(|_| generator.sample(&mut r)).collect();
        ed += energy_distance_points(&xs, &reference)? / conds.len() as f64;
        for x in &xs {
            rewards.push(rm.reward(*x, c)?);
        }
        occ.push(occupancy(&xs, &ctx.dataset.mode_centers(c)));
        rows.extend(xs.into_iter().map(|x| (x, c)));
    }
    // pooled moments over every evaluated sample
    let pooled: Vec<Point> = rewards.iter().map(|r| [*r, 0.0]).collect();
    let (reward_mean, reward_std) = reward_stats_points(
        &pooled,
        0,
        &RewardModel::HalfPlane {
            normals: vec![[1.0, 0.0]],
            offsets: vec![0.0],
        },
    )?;
    let within_radius = (target == EvalTarget::Concept).then(|| {
        rows.iter()
            .filter(|(p, _)| dist(*p, cfg.concept.centroid) < cfg.concept.radius)
            .count() as f64
            / rows.len() as f64
    });
    let report = MetricReport {
        label: label.to_string(),
        energy_distance: ed,
        reward_mean,
        reward_std,
        occupancy: occ,
        samples: rows.len(),
        within_radius,
        runtime_secs: None,
    };
    Ok((report, rows))
}

fn role_name(r: Role) -> &'static str {
    match r {
        Role::Teacher => "teacher",
        Role::Student => "student",
        Role::TunedStudent => "tuned-student",
    }
}

fn eval_cmd(
    ctx: &Ctx,
    checkpoint: &Path,
    target: EvalTarget,
    steps: Option<usize>,
    label: Option<&str>,
    outs: &mut Outputs,
) -> Result<()> {
    let (_, model) = load_model(ctx, checkpoint, outs)?;
    let label = label.map(str::to_string).unwrap_or_else(|| {
        format!("{}-{}-{}", role_name(model.role()), target.name(), model.steps(ctx, steps))
    });
    let (report, rows) = evaluate(ctx, &model, target, steps, &label)?;
    outs.write("report.txt", &report.to_text())?;
    outs.write("report.json", &format!("{}\n", report.to_json()))?;
    outs.write("samples.csv", &io::points_csv(&rows))?;
    outs.stdout = report.to_text();
    Ok(())
}

fn compare_cmd(
    before: &Path,
    after: &Path,
    th: CompareThresholds,
    outs: &mut Outputs,
) -> Result<()> {
    let a = MetricReport::from_json(&outs.read(before)?)?;
    let b = MetricReport::from_json(&outs.read(after)?)?;
    let delta = compare_runs(&a, &b, &th);
    outs.write("delta.txt", &delta.to_text())?;
    outs.write("delta.json", &format!("{}\n", serde_json::to_string_pretty(&delta)?))?;
    outs.warnings.extend(delta.warnings.iter().cloned());
    outs.stdout = delta.to_text();
    Ok(())
}

fn plot_data_cmd(samples: &[PathBuf], bins: usize, extent: f64, outs: &mut Outputs) -> Result<()> {
    let mut seen = std::collections::BTreeSet::new();
    for path in samples {
        let stem = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("cannot name output for {}", path.display()))?;
        // disambiguate same-named files from different directories
        let parent = path
            .parent()
            .and_then(|p| p.file_name())
            .and_then(|s| s.to_str())
            .unwrap_or("");
        let name = if parent.is_empty() { stem.to_string() } else { format!("{parent}-{stem}") };
        if !seen.insert(name.clone()) {
            bail!(Error::Contract(format!("two inputs map to the output name {name:?}")));
        }
        let pts = io::parse_points_csv(&outs.read(path)?)?;
        outs.write(&format!("density-{name}.csv"), &io::density_csv(&pts, bins, extent)?)?;
    }
    Ok(())
}

/// Result of one command: where it wrote and the manifest it left there.
pub struct Outcome {
    pub dir: PathBuf,
    pub manifest: Manifest,
    pub stdout: String,
}

/// Parse `argv` (without the program name) and run it.
pub fn run(argv: &[String]) -> Result<Outcome> {
    let cli = Cli::try_parse_from(std::iter::once("pso".to_string()).chain(argv.iter().cloned()))
        .map_err(|e| Error::Parse(e.to_string().lines().next().unwrap_or("").to_string()))?;
    execute(cli, argv)
}

pub fn execute(cli: Cli, argv: &[String]) -> Result<Outcome> {
    if let Command::Rerun { manifest, out } = &cli.command {
        return rerun(manifest, out);
    }
    dispatch(&cli.command, argv, None, None)
}

/// Re-run a recorded command from the working directory it was recorded in.
fn rerun(path: &Path, out: &Path) -> Result<Outcome> {
    let m = Manifest::load(path)?;
    let out = std::path::absolute(out)?;
    std::env::set_current_dir(&m.cwd).with_context(|| format!("entering recorded directory {}", m.cwd))?;
    m.check_inputs()?;
    let cli = Cli::try_parse_from(std::iter::once("pso".to_string()).chain(m.argv.iter().cloned()))
        .map_err(|e| Error::Parse(format!("manifest argv: {e}")))?;
    if matches!(cli.command, Command::Rerun { .. }) {
        bail!(Error::Contract("a manifest cannot record a rerun".into()));
    }
    dispatch(&cli.command, &m.argv, m.config.as_deref(), Some(&out))
}

fn config_ctx(args: &ConfigArgs, embedded: Option<&str>, inputs: &mut BTreeMap<String, String>) -> Result<Ctx> {
    let text = match embedded {
        Some(t) => t.to_string(),
        None => {
            let t = io::read_text(&args.config)?;
            inputs.insert(args.config.display().to_string(), file_sha256(&args.config)?);
            t
        }
    };
    Ctx::new(apply_overrides(&text, &args.overrides)?)
}

fn dispatch(
    cmd: &Command,
    argv: &[String],
    embedded: Option<&str>,
    out_override: Option<&Path>,
) -> Result<Outcome> {
    let start = Instant::now();
    let mut config_inputs = BTreeMap::new();
    let ctx = match cmd {
        Command::GenData { cfg }
        | Command::TrainTeacher { cfg }
        | Command::Distill { cfg, .. }
        | Command::Finetune { cfg, .. }
        | Command::Sample { cfg, .. }
        | Command::Eval { cfg, .. }
        | Command::Calibrate { cfg, .. } => Some((config_ctx(cfg, embedded, &mut config_inputs)?, cfg)),
        _ => None,
    };
    let dir = |stage: &str| -> PathBuf {
        if let Some(o) = out_override {
            return o.to_path_buf();
        }
        match &ctx {
            Some((c, args)) => c.stage_dir(args, stage),
            None => output_root().join(stage),
        }
    };
    let mut outs = match cmd {
        Command::GenData { .. } => Outputs::new(dir("data"))?,
        Command::TrainTeacher { .. } => Outputs::new(dir("teacher"))?,
        Command::Distill { .. } => Outputs::new(dir("student"))?,
        Command::Finetune { mode, .. } => Outputs::new(dir(&format!("finetune-{}", mode.name())))?,
        Command::Sample { .. } => Outputs::new(dir("samples"))?,
        Command::Eval { .. } => Outputs::new(dir("eval"))?,
        Command::Compare { out, .. } => Outputs::new(out_override.map(Path::to_path_buf).or(out.clone()).unwrap_or_else(|| output_root().join("compare")))?,
        Command::PlotData { out, .. } => Outputs::new(out_override.map(Path::to_path_buf).or(out.clone()).unwrap_or_else(|| output_root().join("plot")))?,
        Command::Calibrate { .. } => Outputs::new(dir(""))?,
        Command::Rerun { .. } => unreachable!("handled by execute"),
    };
    outs.inputs.extend(config_inputs);
    let run_dir = |c: &Ctx| c.run_dir.clone();
    match (cmd, &ctx) {
        (Command::GenData { .. }, Some((c, _))) => gen_data(c, &mut outs)?,
        (Command::TrainTeacher { .. }, Some((c, _))) => train_teacher_cmd(c, &mut outs)?,
        (Command::Distill { teacher, .. }, Some((c, _))) => {
            let t = teacher.clone().unwrap_or_else(|| run_dir(c).join("teacher/teacher.json"));
            distill_cmd(c, &t, &mut outs)?
        }
        (Command::Finetune { mode, student, data, .. }, Some((c, _))) => {
            let s = student.clone().unwrap_or_else(|| run_dir(c).join("student/student.json"));
            finetune_cmd(c, *mode, &s, data.as_deref(), &mut outs)?
        }
        (Command::Sample { checkpoint, n, steps, seed, condition, .. }, Some((c, _))) => {
            sample_cmd(c, checkpoint, *n, *steps, *seed, *condition, &mut outs)?
        }
        (Command::Eval { checkpoint, target, steps, label, .. }, Some((c, _))) => {
            eval_cmd(c, checkpoint, *target, *steps, label.as_deref(), &mut outs)?
        }
        (Command::Compare { before, after, min_reward_gain, max_energy_increase, .. }, None) => {
            let th = CompareThresholds {
                min_reward_gain: *min_reward_gain,
                max_energy_increase: *max_energy_increase,
            };
            compare_cmd(before, after, th, &mut outs)?
        }
        (Command::PlotData { samples, bins, extent, .. }, None) => plot_data_cmd(samples, *bins, *extent, &mut outs)?,
        (Command::Calibrate { baseline, .. }, Some((c, _))) => {
            let result = crate::pipeline::run_pipeline(&c.config_text, &outs.dir)?;
            let file = crate::baseline::BaselineFile::from_pipeline(&result, &c.hash);
            file.save(baseline)?;
            outs.write("baseline.json", &file.to_json())?;
            outs.stdout = result.summary();
        }
        _ => unreachable!("config presence matches the command"),
    }
    let manifest = Manifest {
        command: cmd.name().to_string(),
        argv: argv.to_vec(),
        cwd: std::env::current_dir()?.display().to_string(),
        config: ctx.as_ref().map(|(c, _)| c.config_text.clone()),
        config_hash: ctx.as_ref().map(|(c, _)| c.hash.clone()),
        seed: ctx.as_ref().map(|(c, _)| c.cfg.seed),
        version: env!("PSO_VERSION").to_string(),
        wall_time_secs: start.elapsed().as_secs_f64(),
        inputs: outs.inputs.clone(),
        outputs: outs.files.clone(),
        warnings: outs.warnings.clone(),
    };
    manifest.save(&outs.dir)?;
    Ok(Outcome {
        dir: outs.dir,
        manifest,
        stdout: outs.stdout,
    })
}
