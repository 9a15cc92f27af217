//! Command-line orchestration of the suppression pipeline: data
//! generation, classifier and refiner training, map export, pseudo labels,
//! evaluation, ablations and gradient checks.

pub mod colormap;
pub mod config;
pub mod csvlog;
pub mod error;
pub mod grid;
pub mod pipeline;

use std::io::Write;
use std::path::PathBuf;

use clap::{Parser, Subcommand};
use drs_core::networks::MapSource;
use drs_core::tensor::gradcheck::{run_suite, CaseResult, GradCase};

pub use config::ExperimentConfig;
pub use error::{CliError, CliResult};
use pipeline::{Split, Workspace};

/// Seeds and tolerance used by `gradcheck`.
pub const GRADCHECK_SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Debug, Parser)]
#[command(name = "drs", version, about = "Discriminative region suppression on a toy dataset")]
pub struct Cli {
    /// Experiment config (flat key=value); defaults apply without one.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory, overriding the config.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the toy dataset (and the pretraining set).
    GenData,
    /// Train the classifier with suppression.
    TrainCls,
    /// Train the refiner on the classifier's localization maps.
    TrainRefine,
    /// Export localization maps and heatmaps.
    DumpCams {
        #[arg(long, default_value = "drs", value_parser = parse_mode)]
        mode: MapSource,
        #[arg(long, default_value = "train")]
        split: Split,
    },
    /// Build pseudo labels from exported maps.
    GenLabels {
        #[arg(long, default_value = "drs", value_parser = parse_mode)]
        mode: MapSource,
    },
    /// Score pseudo labels against the ground-truth masks.
    Eval {
        #[arg(long, default_value = "drs", value_parser = parse_mode)]
        mode: MapSource,
    },
    /// Run the pipeline once per grid setting; repeat --grid to combine.
    Ablate {
        #[arg(long, required = true)]
        grid: Vec<String>,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck,
}

fn parse_mode(s: &str) -> Result<MapSource, String> {
    s.parse().map_err(|e: drs_core::Error| e.to_string())
}

/// Resolves the effective config from the global flags.
pub fn resolve_config(cli: &Cli) -> CliResult<ExperimentConfig> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.reseed(seed);
    }
    if let Some(out) = &cli.out {
        cfg.out = out.clone();
    }
    Ok(cfg)
}

/// Runs the gradient-check cases and prints one line per case; a failing
/// case is a numerical failure.
pub fn gradcheck(cases: &[GradCase], out: &mut impl Write) -> CliResult<Vec<CaseResult>> {
    let results = run_suite(cases, &GRADCHECK_SEEDS, GRADCHECK_TOLERANCE);
    for r in &results {
        let status = if r.passed { "pass" } else { "FAIL" };
        let detail = r.failure.as_deref().map(|f| format!(" ({f})")).unwrap_or_default();
        let _ = writeln!(out, "{status}\t{}\tmax_rel_error={:.3e}\tseeds={}{detail}", r.name, r.max_rel_error, r.seeds);
    }
    let failed: Vec<&str> = results.iter().filter(|r| !r.passed).map(|r| r.name.as_str()).collect();
    if failed.is_empty() {
        Ok(results)
    } else {
        Err(CliError::Core(drs_core::Error::Numerical(format!("gradient check failed for {}", failed.join(", ")))))
    }
}

/// Executes one parsed command line, writing progress to `out`.
pub fn run(cli: &Cli, out: &mut impl Write) -> CliResult<()> {
    if let Command::Gradcheck = cli.command {
        return gradcheck(&drs_core::gradcheck_suite(), out).map(|_| ());
    }
    let cfg = resolve_config(cli)?;
    cfg.validate()?;
    let ws = Workspace::new(&cfg.out);
    let mut say = |line: String| {
        let _ = writeln!(out, "{line}");
    };
    match &cli.command {
        Command::GenData => {
            pipeline::gen_data(&cfg, &ws)?;
            say(format!("wrote {} samples to {}", cfg.data.count, ws.data().display()));
        }
        Command::TrainCls => {
            let r = pipeline::train_cls(&cfg, &ws)?;
            for e in &r.log {
                say(format!("epoch {}\tlr={:.1e}\tloss={:.6}", e.epoch, e.lr, e.loss));
            }
            say(format!("accuracy={:.4}", r.accuracy));
        }
        Command::TrainRefine => {
            for e in pipeline::train_refine(&cfg, &ws)? {
                say(format!("epoch {}\tlr={:.1e}\tmse={:.6}", e.epoch, e.lr, e.loss));
            }
        }
        Command::DumpCams { mode, split } => {
            let c = pipeline::dump_cams(&cfg, &ws, *mode, *split)?;
            say(format!(
                "coverage={:.4} mean_activation={:.4}",
                c.fraction().unwrap_or(0.0),
                c.mean_activation().unwrap_or(0.0)
            ));
        }
        Command::GenLabels { mode } => {
            let n = pipeline::gen_labels(&cfg, &ws, *mode)?;
            say(format!("wrote {n} pseudo labels to {}", ws.labels(*mode).display()));
        }
        Command::Eval { mode } => {
            say(pipeline::eval(&cfg, &ws, *mode)?.render().trim_end().to_string());
        }
        Command::Ablate { grid } => {
            let settings = grid::parse_grids(grid)?;
            for r in pipeline::ablate(&cfg, &cfg.out, &settings)? {
                say(format!("{}\tmiou={:.4}\taccuracy={:.4}\tcoverage={:.4}", r.setting, r.miou, r.accuracy, r.coverage));
            }
        }
        Command::Gradcheck => unreachable!(),
    }
    Ok(())
}
