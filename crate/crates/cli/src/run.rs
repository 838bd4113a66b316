//! `run`: integrate every seed of one config and write the run directory.
//!
//! Layout of `<root>/<name>/`:
//!
//! * `seed_<s>.csv` — trajectory (see `lsa_core::flow::io` for columns)
//! * `seed_<s>.json` — initial and final weights, plateau report, weights
//!   at plateau boundaries, scalar-ODE overlay curves, divergence if any
//! * `summary.json` — config echo, theory ladder and per-seed report

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use lsa_core::flow::{
    detect_plateaus, drop_times, integrate_partial, write_csv, ConservationLaw, PlateauReport, Trajectory,
};
use lsa_core::models::{init_merged, init_separate, ModelKind, ParamSnapshot, Params};
use lsa_core::rng::SeedStream;
use lsa_core::task::PopulationStats;
use lsa_core::theory::{global_min_predictor, loss_ladder};
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::config::{ExperimentConfig, DEFAULT_OUTPUT_ROOT, OUTPUT_ROOT_ENV};
use crate::error::CliError;
use crate::overlay::{entry_curves, OdeCurve};

pub const SCHEMA: u32 = 1;

/// One integrated seed.
#[derive(Debug, Clone)]
pub struct SeedRun {
    pub seed: u64,
    pub init: Params,
    pub trajectory: Trajectory,
    pub plateaus: PlateauReport,
    /// `(t/τ, loss)` where the run stopped early.
    pub divergence: Option<(f64, f64)>,
}

/// Losses the detector matches against: the full ladder for separate
/// heads, only the saddle at zero and the global minimum for merged heads.
pub fn theory_levels(cfg: &ExperimentConfig, stats: &PopulationStats) -> Vec<f64> {
    let ladder = loss_ladder(stats);
    match cfg.model {
        ModelKind::Separate => ladder,
        ModelKind::Merged => vec![ladder[0], *ladder.last().unwrap()],
    }
}

pub fn initial_params(cfg: &ExperimentConfig, seed: u64) -> Result<Params, CliError> {
    let mut s = SeedStream::named(&cfg.name, seed, "init");
    Ok(match cfg.model {
        ModelKind::Merged => Params::Merged(init_merged(cfg.dim, cfg.heads, cfg.w_init, &mut s)?),
        ModelKind::Separate => Params::Separate(init_separate(cfg.dim, cfg.heads, cfg.rank, cfg.w_init, &mut s)?),
    })
}

pub fn simulate_seed(cfg: &ExperimentConfig, stats: &PopulationStats, seed: u64) -> Result<SeedRun, CliError> {
    let init = initial_params(cfg, seed)?;
    let out = integrate_partial(&init, stats, &cfg.flow_config(seed)?)?;
    let plateaus = detect_plateaus(&out.trajectory, &theory_levels(cfg, stats), &cfg.plateau_config(stats));
    Ok(SeedRun {
        seed,
        init,
        trajectory: out.trajectory,
        plateaus,
        divergence: out.divergence,
    })
}

/// Integrates all seeds, `threads` at a time. Results come back in seed
/// order whatever the thread count.
pub fn simulate(cfg: &ExperimentConfig, threads: Option<usize>) -> Result<Vec<SeedRun>, CliError> {
    let stats = cfg.stats()?;
    let job = |&seed: &u64| simulate_seed(cfg, &stats, seed);
    #[cfg(feature = "parallel")]
    {
        use rayon::prelude::*;
        let mut b = rayon::ThreadPoolBuilder::new();
        if let Some(k) = threads {
            b = b.num_threads(k.max(1));
        }
        let pool = b
            .build()
            .map_err(|e| CliError::Config(format!("cannot build thread pool: {e}")))?;
        pool.install(|| cfg.seeds.par_iter().map(job).collect())
    }
    #[cfg(not(feature = "parallel"))]
    {
        let _ = threads;
        cfg.seeds.iter().map(job).collect()
    }
}

/// `--out`, else the config's `output_dir`, else `$LSA_OUTPUT_ROOT`, else `runs`.
pub fn output_root(cli_out: Option<&Path>, cfg: &ExperimentConfig) -> PathBuf {
    cli_out
        .map(Path::to_path_buf)
        .or_else(|| cfg.output_dir.clone())
        .or_else(|| std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoryReport {
    pub loss_ladder: Vec<f64>,
    /// Levels used for plateau matching.
    pub matched_levels: Vec<f64>,
    pub exp_inv_len: f64,
    pub eigenvalues: Vec<f64>,
    pub a_vals: Vec<f64>,
    pub global_min_predictor: Vec<Vec<f64>>,
    pub global_min_loss: f64,
}

impl TheoryReport {
    pub fn new(cfg: &ExperimentConfig, stats: &PopulationStats) -> Self {
        let ladder = loss_ladder(stats);
        Self {
            global_min_loss: *ladder.last().unwrap(),
            matched_levels: theory_levels(cfg, stats),
            loss_ladder: ladder,
            exp_inv_len: stats.exp_inv_len,
            eigenvalues: stats.cov.eigenvalues.clone(),
            a_vals: stats.a_vals.clone(),
            global_min_predictor: rows(&global_min_predictor(stats)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Divergence {
    pub t: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSummary {
    pub seed: u64,
    pub csv: String,
    pub final_loss: f64,
    /// `‖M(t_end) - global_min_predictor‖_F`.
    pub distance_to_global_min: f64,
    pub plateaus: PlateauReport,
    /// First time the loss crosses the midpoint of each consecutive pair of
    /// matched levels.
    pub drop_times: Vec<Option<f64>>,
    pub max_conservation_drift: BTreeMap<String, f64>,
    pub max_loss_increase: f64,
    pub divergence: Option<Divergence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub schema: u32,
    pub config: ExperimentConfig,
    pub theory: TheoryReport,
    pub seeds: Vec<SeedSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundaryWeights {
    pub t: f64,
    pub weights: ParamSnapshot,
}

/// Per-seed sidecar next to the CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedReport {
    pub schema: u32,
    pub name: String,
    pub seed: u64,
    pub initial_weights: ParamSnapshot,
    pub final_weights: ParamSnapshot,
    pub plateaus: PlateauReport,
    /// Weights at each plateau's start and end.
    pub plateau_boundaries: Vec<BoundaryWeights>,
    /// Rank-one separate runs: scalar-ODE value curves per drop, started at
    /// plateau entry. Empty otherwise.
    pub scalar_ode_curves: Vec<OdeCurve>,
    pub divergence: Option<Divergence>,
}

fn law_name(l: ConservationLaw) -> String {
    serde_json::to_value(l)
        .ok()
        .and_then(|v| v.as_str().map(String::from))
        .unwrap_or_else(|| format!("{l:?}"))
}

pub fn summarize(cfg: &ExperimentConfig, stats: &PopulationStats, run: &SeedRun) -> SeedSummary {
    let tr = &run.trajectory;
    let gm = global_min_predictor(stats);
    SeedSummary {
        seed: run.seed,
        csv: csv_name(run.seed),
        final_loss: tr.final_loss().unwrap_or(f64::NAN),
        distance_to_global_min: tr.effective_matrices.last().map_or(f64::NAN, |m| (m - &gm).norm()),
        plateaus: run.plateaus.clone(),
        drop_times: drop_times(tr, &theory_levels(cfg, stats)),
        max_conservation_drift: tr
            .max_drift
            .iter()
            .flat_map(|d| d.per_law.iter().map(|&(l, v)| (law_name(l), v)))
            .collect(),
        max_loss_increase: tr.max_loss_increase,
        divergence: run.divergence.map(|(t, loss)| Divergence { t, loss }),
    }
}

fn csv_name(seed: u64) -> String {
    format!("seed_{seed}.csv")
}

fn seed_report(cfg: &ExperimentConfig, stats: &PopulationStats, run: &SeedRun) -> Result<SeedReport, CliError> {
    let tr = &run.trajectory;
    let mut boundaries = Vec::new();
    for seg in &run.plateaus.segments {
        for t in [seg.t_start, seg.t_end] {
            let k = tr.index_at(t);
            boundaries.push(BoundaryWeights {
                t: tr.times[k],
                weights: ParamSnapshot::from(&tr.params_at(k)?),
            });
        }
    }
    let last = tr.len().saturating_sub(1);
    let curves = if cfg.model == ModelKind::Separate && cfg.rank == 1 && run.divergence.is_none() {
        entry_curves(tr, stats, &loss_ladder(stats))?
    } else {
        Vec::new()
    };
    Ok(SeedReport {
        schema: SCHEMA,
        name: cfg.name.clone(),
        seed: run.seed,
        initial_weights: ParamSnapshot::from(&run.init),
        final_weights: ParamSnapshot::from(&tr.params_at(last)?),
        plateaus: run.plateaus.clone(),
        plateau_boundaries: boundaries,
        scalar_ode_curves: curves,
        divergence: run.divergence.map(|(t, loss)| Divergence { t, loss }),
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(lsa_core::LsaError::from)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

/// Writes the run directory and returns the summary.
pub fn write_outputs(
    cfg: &ExperimentConfig,
    stats: &PopulationStats,
    runs: &[SeedRun],
    dir: &Path,
) -> Result<RunSummary, CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(format!("creating {}", dir.display()), e))?;
    for run in runs {
        let path = dir.join(csv_name(run.seed));
        let file = fs::File::create(&path).map_err(|e| CliError::io(format!("creating {}", path.display()), e))?;
        write_csv(&run.trajectory, std::io::BufWriter::new(file))?;
        write_json(&dir.join(format!("seed_{}.json", run.seed)), &seed_report(cfg, stats, run)?)?;
    }
    let summary = RunSummary {
        schema: SCHEMA,
        config: cfg.clone(),
        theory: TheoryReport::new(cfg, stats),
        seeds: runs.iter().map(|r| summarize(cfg, stats, r)).collect(),
    };
    write_json(&dir.join("summary.json"), &summary)?;
    Ok(summary)
}

/// First divergence among the runs, as an error.
pub fn divergence_error(cfg: &ExperimentConfig, runs: &[SeedRun]) -> Option<CliError> {
    runs.iter().find_map(|r| {
        r.divergence.map(|(t, loss)| CliError::Divergence {
            run: cfg.name.clone(),
            seed: r.seed,
            t,
            loss,
        })
    })
}

/// `run` verb: simulate, write `<root>/<name>/`, then report divergence.
pub fn run(cfg: &ExperimentConfig, root: &Path, threads: Option<usize>) -> Result<(PathBuf, RunSummary), CliError> {
    let stats = cfg.stats()?;
    let runs = simulate(cfg, threads)?;
    let dir = root.join(&cfg.name);
    let summary = write_outputs(cfg, &stats, &runs, &dir)?;
    match divergence_error(cfg, &runs) {
        Some(e) => Err(e),
        None => Ok((dir, summary)),
    }
}
