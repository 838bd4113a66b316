use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use lsa_cli::acceptance::{Suite, VerifyOptions};
use lsa_cli::config::{self, ExperimentConfig, SweepAxis, OUTPUT_ROOT_ENV};
use lsa_cli::run::{output_root, run, TheoryReport};
use lsa_cli::sweep::{resolve_spec, sweep, table};
use lsa_cli::CliError;
use lsa_core::models::ModelKind;
use lsa_core::task::EigenSpec;
use lsa_core::theory::{catalog_json, fixed_point_catalog, pcr_predictor, plateau_duration_merged, SigmoidSolution};
use serde_json::json;

#[derive(Parser)]
#[command(name = "lsa", version, about = "Gradient-flow simulator and theory oracle for multi-head linear self-attention")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in preset: fig1, fig3, fig4, next-token.
    #[arg(long)]
    preset: Option<String>,
    /// Output root; the run directory is <out>/<name>.
    #[arg(long, env = OUTPUT_ROOT_ENV)]
    out: Option<PathBuf>,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Worker threads across seeds.
    #[arg(long)]
    threads: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Integrate every seed and write trajectories and reports.
    Run(Common),
    /// One run per value of an axis, shared seeds.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// w_init, rank or N; defaults to the config's sweep axis.
        #[arg(long)]
        axis: Option<SweepAxis>,
        /// Comma-separated axis values.
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
    },
    /// Print the fixed-point catalog as JSON.
    Catalog(Common),
    /// Print closed-form predictions as JSON.
    Theory {
        #[command(flatten)]
        common: Common,
        /// Samples of the logistic curve (white merged configs only).
        #[arg(long, default_value_t = 200)]
        points: usize,
    },
    /// Run the acceptance suite; exit 4 if any criterion fails.
    Verify {
        /// Comma-separated criterion ids.
        #[arg(long, value_delimiter = ',')]
        only: Option<Vec<String>>,
        #[arg(long, value_delimiter = ',')]
        seeds: Option<Vec<u64>>,
        #[arg(long)]
        threads: Option<usize>,
        /// Write the JSON report here as well as to stdout.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long, hide = true)]
        flip_gradient_sign: bool,
        #[arg(long, hide = true)]
        plateau_rel_tol: Option<f64>,
        #[arg(long, hide = true)]
        oracle_points: Option<usize>,
    },
}

fn load(c: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = config::load(c.config.as_deref(), c.preset.as_deref())?;
    if let Some(s) = &c.seeds {
        cfg.seeds = s.clone();
        cfg.validate()?;
    }
    Ok(cfg)
}

fn print_json(v: &serde_json::Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(v).map_err(lsa_core::LsaError::from)?;
    writeln!(std::io::stdout(), "{text}").map_err(|e| CliError::io("stdout", e))
}

fn theory(cfg: &ExperimentConfig, points: usize) -> Result<serde_json::Value, CliError> {
    let stats = cfg.stats()?;
    let report = TheoryReport::new(cfg, &stats);
    let pcr: Vec<_> = (0..=stats.dim())
        .map(|m| pcr_predictor(&stats, m).map(|p| p.row_iter().map(|r| r.iter().copied().collect::<Vec<f64>>()).collect::<Vec<_>>()))
        .collect::<Result<_, _>>()?;
    let merged_duration = if cfg.w_init > 0.0 && cfg.w_init < 1.0 {
        Some(plateau_duration_merged(&stats, cfg.w_init, cfg.tau)?)
    } else {
        None
    };
    let white = match &cfg.eigen {
        EigenSpec::White { scale, .. } => *scale == 1.0,
        other => other.values().iter().all(|&l| l == 1.0),
    };
    let sigmoid = match (cfg.model, white, &cfg.length_law) {
        (ModelKind::Merged, true, lsa_core::task::LengthLaw::Fixed { n }) if cfg.w_init > 0.0 => {
            let sol = SigmoidSolution::white(cfg.dim, *n as f64, cfg.w_init);
            let t_end = cfg.t_end / cfg.tau;
            let n_pts = points.max(2);
            let t: Vec<f64> = (0..n_pts).map(|k| t_end * k as f64 / (n_pts - 1) as f64).collect();
            let loss: Vec<f64> = t.iter().map(|&x| sol.loss(x)).collect();
            let sigma: Vec<f64> = t.iter().map(|&x| sol.sigma(x)).collect();
            Some(json!({"alpha": sol.alpha, "gamma": sol.gamma, "half_time": sol.half_time(), "t": t, "loss": loss, "sigma": sigma}))
        }
        _ => None,
    };
    Ok(json!({
        "schema": lsa_cli::run::SCHEMA,
        "name": cfg.name,
        "theory": report,
        "pcr_predictors": pcr,
        "merged_plateau_duration": merged_duration,
        "sigmoid": sigmoid,
    }))
}

fn root_for(c: &Common, cfg: &ExperimentConfig) -> PathBuf {
    output_root(c.out.as_deref(), cfg)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(c) => {
            let cfg = load(&c)?;
            let (dir, summary) = run(&cfg, &root_for(&c, &cfg), c.threads)?;
            for s in &summary.seeds {
                eprintln!(
                    "seed {}: final loss {:.6e}, {} plateaus, |M - M*|_F {:.3e}",
                    s.seed,
                    s.final_loss,
                    s.plateaus.segments.len(),
                    s.distance_to_global_min
                );
            }
            println!("{}", dir.display());
            Ok(())
        }
        Command::Sweep { common, axis, values } => {
            let cfg = load(&common)?;
            let spec = resolve_spec(&cfg, axis, values)?;
            let (dir, summary) = sweep(&cfg, &spec, &root_for(&common, &cfg), common.threads)?;
            print!("{}", table(&summary));
            println!("{}", dir.display());
            Ok(())
        }
        Command::Catalog(c) => {
            let cfg = load(&c)?;
            let text = catalog_json(&fixed_point_catalog(&cfg.stats()?)?)?;
            writeln!(std::io::stdout(), "{text}").map_err(|e| CliError::io("stdout", e))
        }
        Command::Theory { common, points } => {
            let cfg = load(&common)?;
            print_json(&theory(&cfg, points)?)
        }
        Command::Verify {
            only,
            seeds,
            threads,
            report,
            flip_gradient_sign,
            plateau_rel_tol,
            oracle_points,
        } => {
            let suite = Suite::new(VerifyOptions {
                seeds,
                threads,
                flip_gradient_sign,
                plateau_rel_tol,
                oracle_points,
            });
            let rep = suite.run_all(only.as_deref())?;
            for c in &rep.criteria {
                eprintln!("{}", c.line());
            }
            let value = serde_json::to_value(&rep).map_err(lsa_core::LsaError::from)?;
            if let Some(path) = report {
                write_report(&path, &value)?;
            }
            print_json(&value)?;
            if rep.passed {
                Ok(())
            } else {
                let failed: Vec<&str> = rep.criteria.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect();
                Err(CliError::Verify(failed.join(", ")))
            }
        }
    }
}

fn write_report(path: &Path, v: &serde_json::Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(lsa_core::LsaError::from)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| CliError::io(format!("writing {}", path.display()), e))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
