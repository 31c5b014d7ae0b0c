//! Command-line surface.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "pso",
    version = env!("PSO_VERSION"),
    about = "Train, distill, fine-tune and evaluate few-step diffusion students on 2-D toy data",
    after_help = "The output root is the current directory, or $PSO_OUTPUT_ROOT when set. \
                  Errors print one line `error[<kind>]: <message>` to stderr and exit nonzero."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

/// Options shared by every command that reads a run configuration.
#[derive(Debug, Clone, Args)]
pub struct ConfigArgs {
    /// Run configuration (TOML). Every field is required.
    #[arg(long, value_name = "PATH")]
    pub config: PathBuf,
    /// Override one scalar config field, e.g. `--set teacher.steps=200`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory. Defaults to `<root>/<output_dir>/<stage>`.
    #[arg(long, value_name = "DIR")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FinetuneMode {
    /// Stored preference pairs (`--data` is a pair file).
    Offline,
    /// Pairs sampled from the student and labeled by the configured reward.
    Online,
    /// Target points against generated references (`--data` is a point file).
    Full,
    /// Plain epsilon-matching on target points (`--data` is a point or pair file).
    Naive,
}

impl FinetuneMode {
    pub fn name(self) -> &'static str {
        match self {
            FinetuneMode::Offline => "offline",
            FinetuneMode::Online => "online",
            FinetuneMode::Full => "full",
            FinetuneMode::Naive => "naive",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EvalTarget {
    /// The training distribution, all conditions.
    Data,
    /// The first mode of every condition, the reward-preferred distribution.
    Preferred,
    /// The concept target around the configured centroid, concept condition only.
    Concept,
}

impl EvalTarget {
    pub fn name(self) -> &'static str {
        match self {
            EvalTarget::Data => "data",
            EvalTarget::Preferred => "preferred",
            EvalTarget::Concept => "concept",
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a dataset preview, the offline pair file and the concept target points.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the multi-step teacher.
    TrainTeacher {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Distill the teacher into a student on the configured grid.
    Distill {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Teacher checkpoint. Defaults to the run's `teacher/teacher.json`.
        #[arg(long, value_name = "PATH")]
        teacher: Option<PathBuf>,
    },
    /// Fine-tune a student.
    Finetune {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_enum)]
        mode: FinetuneMode,
        /// Student checkpoint. Defaults to the run's `student/student.json`.
        #[arg(long, value_name = "PATH")]
        student: Option<PathBuf>,
        /// Training data; required for every mode except `online`.
        #[arg(long, value_name = "PATH")]
        data: Option<PathBuf>,
    },
    /// Draw samples from a checkpoint into `samples.csv` (x, y, condition).
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        /// Number of samples.
        #[arg(long)]
        n: usize,
        /// Sampling steps. Defaults to the student grid, or `eval.teacher_steps` for teachers.
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        seed: u64,
        /// Sample only this condition; otherwise conditions cycle.
        #[arg(long)]
        condition: Option<usize>,
    },
    /// Evaluate a checkpoint against a target distribution with the held-out eval seed.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, value_name = "PATH")]
        checkpoint: PathBuf,
        #[arg(long, value_enum)]
        target: EvalTarget,
        /// Sampling steps, as for `sample`.
        #[arg(long)]
        steps: Option<usize>,
        /// Report label. Defaults to `<role>-<target>-<steps>`.
        #[arg(long)]
        label: Option<String>,
    },
    /// Delta table between two reports (`after - before`).
    Compare {
        #[arg(long, value_name = "PATH")]
        before: PathBuf,
        #[arg(long, value_name = "PATH")]
        after: PathBuf,
        /// Smallest reward gain that passes.
        #[arg(long, default_value_t = 0.0)]
        min_reward_gain: f64,
        /// Largest energy-distance increase that passes.
        #[arg(long, default_value_t = f64::INFINITY)]
        max_energy_increase: f64,
        /// Output directory. Defaults to `<root>/compare`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Gridded densities of sample files, one `density-<name>.csv` per input.
    PlotData {
        #[arg(long, value_name = "PATH", num_args = 1.., required = true)]
        samples: Vec<PathBuf>,
        /// Cells per axis.
        #[arg(long, default_value_t = 64)]
        bins: usize,
        /// Half-width of the square grid around the origin.
        #[arg(long, default_value_t = 6.0)]
        extent: f64,
        /// Output directory. Defaults to `<root>/plot`.
        #[arg(long, value_name = "DIR")]
        out: Option<PathBuf>,
    },
    /// Run the whole pipeline and write the baseline file.
    Calibrate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Where to write the baseline file.
        #[arg(long, value_name = "PATH")]
        baseline: PathBuf,
    },
    /// Re-run the command recorded in a manifest, with its recorded configuration.
    Rerun {
        #[arg(value_name = "MANIFEST")]
        manifest: PathBuf,
        /// Output directory for the re-run.
        #[arg(long, value_name = "DIR")]
        out: PathBuf,
    },
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::TrainTeacher { .. } => "train-teacher",
            Command::Distill { .. } => "distill",
            Command::Finetune { .. } => "finetune",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::Compare { .. } => "compare",
            Command::PlotData { .. } => "plot-data",
            Command::Calibrate { .. } => "calibrate",
            Command::Rerun { .. } => "rerun",
        }
    }
}
