//! Experiment configuration: one JSON document per experiment, optionally
//! layered over a named preset.

use std::path::{Path, PathBuf};

use lsa_core::flow::{default_dt, FlowConfig, Integrator, PlateauConfig, SnapshotSchedule};
use lsa_core::models::{Layout, ModelKind};
use lsa_core::task::{build_covariance, population_stats, CovarianceSpec, EigenBasis, EigenSpec, LengthLaw, PopulationStats};
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::error::CliError;

/// Environment variable holding the default output root.
pub const OUTPUT_ROOT_ENV: &str = "LSA_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const PRESETS: [&str; 4] = ["fig1", "fig3", "fig4", "next-token"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    WInit,
    Rank,
    N,
}

impl std::str::FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "w_init" => Ok(SweepAxis::WInit),
            "rank" => Ok(SweepAxis::Rank),
            "N" | "n" => Ok(SweepAxis::N),
            other => Err(format!("unknown sweep axis {other:?} (expected w_init, rank or N)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepSpec {
    pub axis: SweepAxis,
    pub values: Vec<f64>,
    /// Optional per-value run length, same order as `values`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t_end: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlateauOverrides {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threshold: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rel_tol: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub min_fraction: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Basis {
    #[default]
    Identity,
    /// Haar-random eigenvectors drawn from the experiment's basis stream.
    Random,
}

/// Fully expanded experiment configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Names the RNG streams and the run directory.
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<String>,
    pub model: ModelKind,
    #[serde(rename = "D")]
    pub dim: usize,
    #[serde(rename = "H")]
    pub heads: usize,
    #[serde(rename = "R", default = "one")]
    pub rank: usize,
    pub length_law: LengthLaw,
    pub eigen: EigenSpec,
    #[serde(default)]
    pub basis: Basis,
    pub w_init: f64,
    pub tau: f64,
    /// Defaults to the largest step with `dt · max a_d / τ ≤ 10⁻²`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dt: Option<f64>,
    pub t_end: f64,
    pub integrator: Integrator,
    #[serde(default)]
    pub schedule: SnapshotSchedule,
    #[serde(default)]
    pub plateau: PlateauOverrides,
    pub seeds: Vec<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sweep: Option<SweepSpec>,
    /// Fixed-task mixtures are not supported; any nonzero value is rejected.
    #[serde(default)]
    pub fixed_task_fraction: f64,
}

fn one() -> usize {
    1
}

/// Built-in preset fragment.
pub fn preset(name: &str) -> Result<Value, CliError> {
    let v = match name {
        "fig1" => json!({
            "name": "fig1",
            "model": "merged",
            "D": 4, "H": 8, "N": 31,
            "eigen": {"rule": "white", "dim": 4, "scale": 1.0},
            "w_init": 1e-3, "tau": 1.0, "t_end": 12.0,
            "integrator": "rk4",
            "schedule": {"log_points": 512, "linear_points": 1200},
            "seeds": [0, 1, 2, 3, 4, 5]
        }),
        "fig3" => json!({
            "name": "fig3",
            "model": "separate",
            "D": 4, "H": 4, "R": 1, "N": 31,
            "eigen": {"rule": "explicit", "values": [0.4, 0.3, 0.2, 0.1]},
            "w_init": 1e-2, "tau": 1.0, "dt": 0.05, "t_end": 90000.0,
            "integrator": "rk4",
            "schedule": {"log_points": 512, "linear_points": 4000},
            "seeds": [0, 1, 2, 3, 4, 5]
        }),
        "fig4" => json!({
            "name": "fig4",
            "model": "separate",
            "D": 8, "H": 9, "R": 1, "N": 31,
            "eigen": {"rule": "harmonic_unit_trace", "dim": 8},
            "w_init": 0.1, "tau": 1.0, "t_end": 120000.0,
            "integrator": "rk4",
            "schedule": {"log_points": 512, "linear_points": 2000},
            "seeds": [0, 1, 2, 3, 4, 5],
            "sweep": {"axis": "rank", "values": [1, 2, 4, 8], "t_end": [120000.0, 25000.0, 15000.0, 2500.0]}
        }),
        "next-token" => json!({
            "name": "next-token",
            "model": "separate",
            "D": 4, "H": 4, "R": 1,
            "length_law": {"kind": "uniform", "max": 31},
            "eigen": {"rule": "explicit", "values": [0.4, 0.3, 0.2, 0.1]},
            "w_init": 1e-2, "tau": 1.0, "dt": 0.04, "t_end": 150000.0,
            "integrator": "rk4",
            "schedule": {"log_points": 512, "linear_points": 4000},
            "seeds": [0, 1, 2, 3, 4, 5]
        }),
        other => {
            return Err(CliError::Config(format!(
                "unknown preset {other:?} (available: {})",
                PRESETS.join(", ")
            )))
        }
    };
    Ok(v)
}

/// Overlays `top` onto `base`, recursing into objects.
fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, t) => *b = t,
    }
}

/// Expands a user document (possibly naming a preset) plus an optional
/// command-line preset into a validated config. Keys in the user document
/// win over the preset.
pub fn resolve(user: Option<Value>, cli_preset: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let user = user.unwrap_or_else(|| Value::Object(Map::new()));
    if !user.is_object() {
        return Err(CliError::Config("config must be a JSON object".into()));
    }
    let named = user.get("preset").and_then(Value::as_str).map(String::from);
    let preset_name = match (cli_preset, named.as_deref()) {
        (Some(a), Some(b)) if a != b => {
            return Err(CliError::Config(format!("--preset {a} conflicts with config preset {b}")));
        }
        (Some(a), _) => Some(a.to_string()),
        (None, b) => b.map(String::from),
    };
    let mut doc = match &preset_name {
        Some(p) => {
            let mut base = preset(p)?;
            base["preset"] = Value::String(p.clone());
            // an explicit length law in the user document replaces the preset's N
            if user.get("length_law").is_some() {
                base.as_object_mut().unwrap().remove("N");
            }
            if user.get("N").is_some() {
                base.as_object_mut().unwrap().remove("length_law");
            }
            base
        }
        None => Value::Object(Map::new()),
    };
    merge(&mut doc, user);
    let obj = doc.as_object_mut().unwrap();
    if let Some(n) = obj.remove("N") {
        if obj.contains_key("length_law") {
            return Err(CliError::Config("give either N or length_law, not both".into()));
        }
        let n = n
            .as_u64()
            .ok_or_else(|| CliError::Config(format!("N must be a positive integer, got {n}")))?;
        obj.insert("length_law".into(), json!({"kind": "fixed", "n": n}));
    }
    if !obj.contains_key("name") {
        obj.insert("name".into(), Value::String("experiment".into()));
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load(path: Option<&Path>, cli_preset: Option<&str>) -> Result<ExperimentConfig, CliError> {
    let user = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Config(format!("cannot read {}: {e}", p.display())))?;
            Some(serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?)
        }
        None => None,
    };
    if user.is_none() && cli_preset.is_none() {
        return Err(CliError::Config("need --config or --preset".into()));
    }
    resolve(user, cli_preset)
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        if self.fixed_task_fraction != 0.0 {
            return bad(format!(
                "fixed_task_fraction = {} is not supported: task vectors are always drawn fresh",
                self.fixed_task_fraction
            ));
        }
        if self.dim == 0 || self.heads == 0 {
            return bad("D and H must be >= 1".into());
        }
        if self.model == ModelKind::Separate && (self.rank == 0 || self.rank > self.dim) {
            return bad(format!("R = {} outside 1..={}", self.rank, self.dim));
        }
        if self.seeds.is_empty() {
            return bad("seeds must be non-empty".into());
        }
        if !(self.w_init >= 0.0 && self.w_init.is_finite()) {
            return bad(format!("w_init must be finite and >= 0, got {}", self.w_init));
        }
        if let Some(s) = &self.sweep {
            if s.values.is_empty() {
                return bad("sweep values must be non-empty".into());
            }
            if let Some(t) = &s.t_end {
                if t.len() != s.values.len() {
                    return bad("sweep t_end must have one entry per value".into());
                }
            }
        }
        let eig = self.eigen.values();
        if eig.len() != self.dim {
            return bad(format!("eigen spec gives {} values for D = {}", eig.len(), self.dim));
        }
        self.length_law.validate().map_err(CliError::from)?;
        self.covariance()?;
        self.flow_config(0)?.validate().map_err(CliError::from)?;
        Ok(())
    }

    pub fn covariance(&self) -> Result<CovarianceSpec, CliError> {
        let basis = match self.basis {
            Basis::Identity => EigenBasis::Identity,
            Basis::Random => EigenBasis::RandomOrthonormal(lsa_core::rng::SeedStream::named(&self.name, 0, "basis")),
        };
        Ok(build_covariance(&self.eigen.values(), basis)?)
    }

    pub fn stats(&self) -> Result<PopulationStats, CliError> {
        Ok(population_stats(&self.covariance()?, &self.length_law)?)
    }

    pub fn layout(&self) -> Layout {
        match self.model {
            ModelKind::Merged => Layout::merged(self.dim, self.heads),
            ModelKind::Separate => Layout::separate(self.dim, self.heads, self.rank),
        }
    }

    pub fn resolved_dt(&self) -> Result<f64, CliError> {
        match self.dt {
            Some(dt) => Ok(dt),
            None => Ok(default_dt(&self.stats()?, self.tau)),
        }
    }

    pub fn flow_config(&self, seed: u64) -> Result<FlowConfig, CliError> {
        Ok(FlowConfig {
            tau: self.tau,
            dt: self.resolved_dt()?,
            t_end: self.t_end,
            integrator: self.integrator,
            schedule: self.schedule,
            w_init: self.w_init,
            seed,
        })
    }

    pub fn plateau_config(&self, stats: &PopulationStats) -> PlateauConfig {
        let mut c = PlateauConfig::for_stats(stats);
        // per unit of t/τ, like the recorded times
        if let Some(t) = self.plateau.threshold {
            c.threshold = t;
        }
        if let Some(r) = self.plateau.rel_tol {
            c.rel_tol = r;
        }
        if let Some(m) = self.plateau.min_fraction {
            c.min_fraction = m;
        }
        c
    }

    /// The config with one sweep value applied.
    pub fn with_axis_value(&self, axis: SweepAxis, value: f64, t_end: Option<f64>) -> Result<Self, CliError> {
        let mut c = self.clone();
        match axis {
            SweepAxis::WInit => c.w_init = value,
            SweepAxis::Rank => c.rank = as_count(value, "rank")?,
            SweepAxis::N => c.length_law = LengthLaw::Fixed { n: as_count(value, "N")? },
        }
        if let Some(t) = t_end {
            c.t_end = t;
        }
        c.sweep = None;
        c.validate()?;
        Ok(c)
    }
}

fn as_count(x: f64, what: &str) -> Result<usize, CliError> {
    if x >= 1.0 && x.fract() == 0.0 {
        Ok(x as usize)
    } else {
        Err(CliError::Config(format!("{what} must be a positive integer, got {x}")))
    }
}
