//! The full calibration run: every stage, executed through the same command
//! dispatcher as the binary, each into its own directory with a manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::Result;
use pso_core::metrics::{energy_distance_points, MetricReport};
use pso_core::Point;

use crate::commands::run;
use crate::io;

/// Evaluations run by the pipeline: label, checkpoint stage, target, steps.
pub const EVALS: &[(&str, &str, &str, usize)] = &[
    ("teacher-data", "teacher/teacher.json", "data", 50),
    ("student-data", "student/student.json", "data", 4),
    ("student-preferred", "student/student.json", "preferred", 4),
    ("student-preferred-1", "student/student.json", "preferred", 1),
    ("offline-preferred", "finetune-offline/tuned.json", "preferred", 4),
    ("offline-preferred-1", "finetune-offline/tuned.json", "preferred", 1),
    ("online-preferred", "finetune-online/tuned.json", "preferred", 4),
    ("online-preferred-1", "finetune-online/tuned.json", "preferred", 1),
    ("naive-preferred", "finetune-naive/tuned.json", "preferred", 4),
    ("student-concept", "student/student.json", "concept", 4),
    ("full-concept", "finetune-full/tuned.json", "concept", 4),
    ("self-data", "finetune-self/tuned.json", "data", 4),
];

/// Number of the student's own samples used as targets in the self-target run.
pub const SELF_TARGETS: usize = 64;

#[derive(Debug, Clone)]
pub struct PipelineResult {
    pub dir: PathBuf,
    pub reports: BTreeMap<String, MetricReport>,
    /// Named scalars derived from the reports.
    pub quantities: BTreeMap<String, f64>,
    pub stage_secs: Vec<(String, f64)>,
    pub total_secs: f64,
}

impl PipelineResult {
    pub fn get(&self, name: &str) -> f64 {
        *self
            .quantities
            .get(name)
            .unwrap_or_else(|| panic!("pipeline quantity {name:?} is not recorded"))
    }

    pub fn summary(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.quantities {
            writeln!(s, "{k} = {v}").unwrap();
        }
        for (k, v) in &self.stage_secs {
            writeln!(s, "time.{k} = {v:.1}s").unwrap();
        }
        writeln!(s, "time.total = {:.1}s", self.total_secs).unwrap();
        s
    }
}

fn by_condition(rows: &[(Point, usize)], c: usize) -> Vec<Point> {
    rows.iter().filter(|r| r.1 == c).map(|r| r.0).collect()
}

/// Mean per-condition energy distance between two evaluated sample files.
fn sample_distance(a: &Path, b: &Path, conds: &[usize]) -> Result<f64> {
    let a = io::parse_points_csv(&io::read_text(a)?)?;
    let b = io::parse_points_csv(&io::read_text(b)?)?;
    let mut ed = 0.0;
    for &c in conds {
        ed += energy_distance_points(&by_condition(&a, c), &by_condition(&b, c))? / conds.len() as f64;
    }
    Ok(ed)
}

fn mean_margin(metrics_csv: &Path) -> Result<f64> {
    let text = io::read_text(metrics_csv)?;
    let margins: Vec<f64> = text
        .lines()
        .skip(1)
        .filter_map(|l| l.split(',').nth(2)?.parse().ok())
        .collect();
    Ok(margins.iter().sum::<f64>() / margins.len().max(1) as f64)
}

/// Run every stage into `dir` using the configuration `config_text`.
pub fn run_pipeline(config_text: &str, dir: &Path) -> Result<PipelineResult> {
    let total = Instant::now();
    std::fs::create_dir_all(dir)?;
    let config = dir.join("config.toml");
    std::fs::write(&config, config_text)?;
    let cfg = pso_core::config::RunConfig::from_toml(config_text)?;
    let p = |s: &str| dir.join(s).display().to_string();
    let mut stage_secs = Vec::new();
    let mut stage = |name: &str, args: &[&str]| -> Result<()> {
        let t = Instant::now();
        let mut argv: Vec<String> = args.iter().map(|s| s.to_string()).collect();
        argv.extend(["--config".into(), config.display().to_string(), "--out".into(), p(name)]);
        log::info!("stage {name}");
        run(&argv)?;
        stage_secs.push((name.to_string(), t.elapsed().as_secs_f64()));
        Ok(())
    };

    stage("data", &["gen-data"])?;
    stage("teacher", &["train-teacher"])?;
    stage("student", &["distill", "--teacher", &p("teacher/teacher.json")])?;
    let student = p("student/student.json");
    stage("finetune-offline", &["finetune", "--mode", "offline", "--student", &student, "--data", &p("data/pairs.csv")])?;
    stage("finetune-online", &["finetune", "--mode", "online", "--student", &student])?;
    stage("finetune-full", &["finetune", "--mode", "full", "--student", &student, "--data", &p("data/concept.csv")])?;
    stage("finetune-naive", &["finetune", "--mode", "naive", "--student", &student, "--data", &p("data/pairs.csv")])?;

    let mut reports = BTreeMap::new();
    for &(label, ck, target, steps) in EVALS {
        if label == "self-data" {
            // the student's own samples become its targets
            let rows = io::parse_points_csv(&io::read_text(&dir.join("eval/student-data/samples.csv"))?)?;
            let own: Vec<(Point, usize)> = rows
                .into_iter()
                .filter(|r| r.1 == cfg.concept.condition)
                .take(SELF_TARGETS)
                .collect();
            std::fs::create_dir_all(dir.join("self-targets"))?;
            std::fs::write(dir.join("self-targets/targets.csv"), io::points_csv(&own))?;
            stage("finetune-self", &["finetune", "--mode", "full", "--student", &student, "--data", &p("self-targets/targets.csv")])?;
        }
        let out = format!("eval/{label}");
        let steps = steps.to_string();
        stage(&out, &["eval", "--checkpoint", &p(ck), "--target", target, "--steps", &steps, "--label", label])?;
        let report = MetricReport::from_json(&io::read_text(&dir.join(&out).join("report.json"))?)?;
        reports.insert(label.to_string(), report);
    }

    let all: Vec<usize> = (0..cfg.dataset_spec().n_conditions()).collect();
    let eval_samples = |label: &str| dir.join("eval").join(label).join("samples.csv");
    let mut q = BTreeMap::new();
    let r = |l: &str| &reports[l];
    q.insert("teacher_energy_distance".into(), r("teacher-data").energy_distance);
    q.insert("student_energy_distance".into(), r("student-data").energy_distance);
    q.insert(
        "student_teacher_energy_distance".into(),
        sample_distance(&eval_samples("student-data"), &eval_samples("teacher-data"), &all)?,
    );
    q.insert("pre_reward".into(), r("student-preferred").reward_mean);
    q.insert("pre_reward_1step".into(), r("student-preferred-1").reward_mean);
    q.insert("offline_reward".into(), r("offline-preferred").reward_mean);
    q.insert("offline_reward_1step".into(), r("offline-preferred-1").reward_mean);
    q.insert("online_reward".into(), r("online-preferred").reward_mean);
    q.insert("online_reward_1step".into(), r("online-preferred-1").reward_mean);
    q.insert("naive_reward".into(), r("naive-preferred").reward_mean);
    q.insert("pre_preferred_energy_distance".into(), r("student-preferred").energy_distance);
    q.insert("offline_preferred_energy_distance".into(), r("offline-preferred").energy_distance);
    q.insert("naive_preferred_energy_distance".into(), r("naive-preferred").energy_distance);
    q.insert("pre_concept_within_radius".into(), r("student-concept").within_radius.unwrap_or(f64::NAN));
    q.insert("full_concept_within_radius".into(), r("full-concept").within_radius.unwrap_or(f64::NAN));
    q.insert(
        "self_target_energy_distance".into(),
        sample_distance(&eval_samples("self-data"), &eval_samples("student-data"), &[cfg.concept.condition])?,
    );
    q.insert("self_target_mean_margin".into(), mean_margin(&dir.join("finetune-self/metrics.csv"))?);
    let d = |a: &str, b: &str, q: &BTreeMap<String, f64>| q[a] - q[b];
    let derived = [
        ("delta.offline_minus_pre_reward", d("offline_reward", "pre_reward", &q)),
        ("delta.online_minus_offline_reward", d("online_reward", "offline_reward", &q)),
        ("delta.online_minus_pre_reward_1step", d("online_reward_1step", "pre_reward_1step", &q)),
        (
            "delta.naive_minus_offline_preferred_energy_distance",
            d("naive_preferred_energy_distance", "offline_preferred_energy_distance", &q),
        ),
        (
            "delta.naive_minus_pre_preferred_energy_distance",
            d("naive_preferred_energy_distance", "pre_preferred_energy_distance", &q),
        ),
    ];
    for (k, v) in derived {
        q.insert(k.into(), v);
    }
    Ok(PipelineResult {
        dir: dir.to_path_buf(),
        reports,
        quantities: q,
        stage_secs,
        total_secs: total.elapsed().as_secs_f64(),
    })
}
