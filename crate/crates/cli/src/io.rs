//! Text formats: point CSVs, per-step tables, density grids.
//!
//! Every float is written with Rust's shortest round-trip formatting, so a
//! value read back is bit-identical to the one written.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, Context, Result};
use pso_core::pso::{PreferencePair, StepMetrics};
use pso_core::Point;

pub const POINTS_HEADER: &str = "x,y,condition";
pub const PAIRS_HEADER: &str = "# condition,target_x,target_y,reference_x,reference_y";

pub fn points_csv(points: &[(Point, usize)]) -> String {
    let mut s = String::from(POINTS_HEADER);
    s.push('\n');
    for (p, c) in points {
        writeln!(s, "{},{},{c}", p[0], p[1]).unwrap();
    }
    s
}

pub fn parse_points_csv(text: &str) -> Result<Vec<(Point, usize)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim() == POINTS_HEADER => {}
        _ => bail!("point file must start with the header {POINTS_HEADER:?}"),
    }
    lines
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').map(str::trim).collect();
            if f.len() != 3 {
                bail!("line {}: expected 3 fields, got {}", i + 1, f.len());
            }
            let num = |s: &str| -> Result<f64> {
                let v: f64 = s.parse().map_err(|_| anyhow!("line {}: bad number {s:?}", i + 1))?;
                if !v.is_finite() {
                    bail!("line {}: non-finite coordinate", i + 1);
                }
                Ok(v)
            };
            let c = f[2]
                .parse()
                .map_err(|_| anyhow!("line {}: bad condition {:?}", i + 1, f[2]))?;
            Ok(([num(f[0])?, num(f[1])?], c))
        })
        .collect()
}

pub fn pairs_file(pairs: &[PreferencePair]) -> String {
    let mut s = String::from(PAIRS_HEADER);
    s.push('\n');
    for p in pairs {
        s.push_str(&p.to_line());
        s.push('\n');
    }
    s
}

/// Target points of a fine-tuning data file: a point CSV, or the target
/// endpoints of a pair file.
pub fn parse_targets(text: &str) -> Result<Vec<(Point, usize)>> {
    if text.starts_with(POINTS_HEADER) {
        return parse_points_csv(text);
    }
    let pairs = PreferencePair::parse_all(text)?;
    Ok(pairs.iter().map(|p| (p.target, p.condition)).collect())
}

pub fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{i},{l}").unwrap();
    }
    s
}

pub fn metrics_csv(metrics: &[StepMetrics]) -> String {
    let mut s = String::from("step,loss,margin,accuracy\n");
    for m in metrics {
        writeln!(s, "{},{},{},{}", m.step, m.loss, m.margin, m.accuracy).unwrap();
    }
    s
}

/// Normalized 2-D histogram on the square `[-extent, extent]^2`, one grid
/// per condition. Each grid integrates to the fraction of that condition's
/// points that fall inside the square.
pub fn density_csv(points: &[(Point, usize)], bins: usize, extent: f64) -> Result<String> {
    if bins == 0 || !(extent > 0.0 && extent.is_finite()) {
        bail!("density grid needs bins > 0 and a positive extent");
    }
    let k = points.iter().map(|p| p.1 + 1).max().unwrap_or(0);
    let width = 2.0 * extent / bins as f64;
    let mut counts = vec![vec![0usize; bins * bins]; k];
    let mut totals = vec![0usize; k];
    for &(p, c) in points {
        totals[c] += 1;
        let ix = ((p[0] + extent) / width).floor();
        let iy = ((p[1] + extent) / width).floor();
        if ix >= 0.0 && iy >= 0.0 && (ix as usize) < bins && (iy as usize) < bins {
            counts[c][iy as usize * bins + ix as usize] += 1;
        }
    }
    let mut s = String::from("condition,x,y,density\n");
    for c in 0..k {
        let norm = (totals[c].max(1) as f64) * width * width;
        for iy in 0..bins {
            for ix in 0..bins {
                let x = -extent + (ix as f64 + 0.5) * width;
                let y = -extent + (iy as f64 + 0.5) * width;
                writeln!(s, "{c},{x},{y},{}", counts[c][iy * bins + ix] as f64 / norm).unwrap();
            }
        }
    }
    Ok(s)
}
