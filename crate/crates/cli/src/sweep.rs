//! `sweep`: one run per axis value, shared seeds.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, SweepAxis, SweepSpec};
use crate::error::CliError;
use crate::run::{divergence_error, simulate, write_outputs, SCHEMA};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSeedRow {
    pub seed: u64,
    pub plateau_count: usize,
    /// Ladder index of each detected plateau (`None` if unmatched).
    pub plateau_levels: Vec<Option<usize>>,
    pub plateau_durations: Vec<f64>,
    pub first_drop: Option<f64>,
    pub final_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub t_end: f64,
    pub dir: String,
    pub seeds: Vec<SweepSeedRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub schema: u32,
    pub name: String,
    pub axis: SweepAxis,
    pub points: Vec<SweepPoint>,
}

fn axis_label(axis: SweepAxis) -> &'static str {
    match axis {
        SweepAxis::WInit => "w_init",
        SweepAxis::Rank => "rank",
        SweepAxis::N => "N",
    }
}

fn point_dir(axis: SweepAxis, value: f64) -> String {
    format!("{}_{value}", axis_label(axis))
}

/// The sweep to run: `axis` from the command line overrides the config's
/// axis, keeping its values only when the axes agree.
pub fn resolve_spec(cfg: &ExperimentConfig, axis: Option<SweepAxis>, values: Option<Vec<f64>>) -> Result<SweepSpec, CliError> {
    let base = cfg.sweep.clone();
    let spec = match (axis, base) {
        (Some(a), Some(b)) if a == b.axis => SweepSpec {
            values: values.unwrap_or(b.values),
            ..b
        },
        (Some(a), _) => SweepSpec {
            axis: a,
            values: values.ok_or_else(|| CliError::Config(format!("sweep over {} needs --values", axis_label(a))))?,
            t_end: None,
        },
        (None, Some(b)) => match values {
            Some(v) => SweepSpec { values: v, t_end: None, ..b },
            None => b,
        },
        (None, None) => return Err(CliError::Config("no sweep axis in config or on the command line".into())),
    };
    if spec.values.is_empty() {
        return Err(CliError::Config("sweep values must be non-empty".into()));
    }
    if let Some(t) = &spec.t_end {
        if t.len() != spec.values.len() {
            return Err(CliError::Config("sweep t_end must have one entry per value".into()));
        }
    }
    Ok(spec)
}

/// Runs every point, writing `<root>/<name>/<axis>_<value>/` and
/// `<root>/<name>/sweep.json`. Divergence is reported after all points ran.
pub fn sweep(
    cfg: &ExperimentConfig,
    spec: &SweepSpec,
    root: &Path,
    threads: Option<usize>,
) -> Result<(PathBuf, SweepSummary), CliError> {
    let base_dir = root.join(&cfg.name);
    let mut points = Vec::new();
    let mut diverged = None;
    for (k, &value) in spec.values.iter().enumerate() {
        let c = cfg.with_axis_value(spec.axis, value, spec.t_end.as_ref().map(|t| t[k]))?;
        let stats = c.stats()?;
        let runs = simulate(&c, threads)?;
        let rel = point_dir(spec.axis, value);
        let summary = write_outputs(&c, &stats, &runs, &base_dir.join(&rel))?;
        if diverged.is_none() {
            diverged = divergence_error(&c, &runs);
        }
        points.push(SweepPoint {
            value,
            t_end: c.t_end,
            dir: rel,
            seeds: summary
                .seeds
                .iter()
                .map(|s| SweepSeedRow {
                    seed: s.seed,
                    plateau_count: s.plateaus.segments.len(),
                    plateau_levels: s.plateaus.segments.iter().map(|p| p.matched).collect(),
                    plateau_durations: s.plateaus.segments.iter().map(|p| p.duration()).collect(),
                    first_drop: s.drop_times.first().copied().flatten(),
                    final_loss: s.final_loss,
                })
                .collect(),
        });
    }
    let summary = SweepSummary {
        schema: SCHEMA,
        name: cfg.name.clone(),
        axis: spec.axis,
        points,
    };
    let path = base_dir.join("sweep.json");
    let mut text = serde_json::to_string_pretty(&summary).map_err(lsa_core::LsaError::from)?;
    text.push('\n');
    std::fs::write(&path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))?;
    match diverged {
        Some(e) => Err(e),
        None => Ok((base_dir, summary)),
    }
}

/// Plain-text table: one line per (value, seed).
pub fn table(s: &SweepSummary) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "{:>10} {:>6} {:>9} {:>12} {:>12}  plateaus (level:duration)", axis_label(s.axis), "seed", "count", "first_drop", "final_loss");
    for p in &s.points {
        for r in &p.seeds {
            let plats: Vec<String> = r
                .plateau_levels
                .iter()
                .zip(&r.plateau_durations)
                .map(|(m, d)| match m {
                    Some(m) => format!("{m}:{d:.4e}"),
                    None => format!("?:{d:.4e}"),
                })
                .collect();
            let drop = r.first_drop.map_or("-".to_string(), |t| format!("{t:.4e}"));
            let _ = writeln!(
                out,
                "{:>10} {:>6} {:>9} {:>12} {:>12.6e}  {}",
                p.value,
                r.seed,
                r.plateau_count,
                drop,
                r.final_loss,
                plats.join(" ")
            );
        }
    }
    out
}
