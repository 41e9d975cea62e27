mod layout;
mod plot;
mod stages;

use clap::{Parser, Subcommand};
use pseudoseg::evalkit::reports_to_csv;
use pseudoseg::{Error, ErrorKind, ExperimentConfig, Result};
use stages::Ctx;
use std::path::PathBuf;
use std::process::ExitCode;

/// Sparse-annotation 3D segmentation experiments on synthetic phantoms.
#[derive(Parser)]
#[command(name = "pseudoseg", version)]
struct Cli {
    /// Experiment config (TOML). Defaults to the built-in full-size preset.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Use the built-in 16³ preset instead of a config file.
    #[arg(long, global = true, conflicts_with = "config")]
    smoke: bool,
    /// Output directory; overrides the config's `output_dir`.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Conditions trained concurrently by `sweep`.
    #[arg(long, global = true, value_name = "N")]
    jobs: Option<usize>,
    /// Only log warnings and errors.
    #[arg(long, short, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args, Clone, Copy)]
struct Condition {
    /// Number of annotated slices per training volume (default: first in config).
    #[arg(long, value_name = "N")]
    slices: Option<usize>,
    /// Run seed (default: first in config).
    #[arg(long, value_name = "N")]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the phantom volumes and their dense labels.
    Generate,
    /// Train the 2D pseudo-labeler on the annotated slices.
    Train2d {
        #[command(flatten)]
        cond: Condition,
    },
    /// Predict pseudo-label probabilities on the training volumes.
    Pseudolabel {
        #[command(flatten)]
        cond: Condition,
    },
    /// Fuse targets and train the 3D network; `--alpha 0` is the sparse baseline.
    Train3d {
        #[command(flatten)]
        cond: Condition,
        /// Pseudo-label weight (default: first positive value in config).
        #[arg(long, value_name = "F")]
        alpha: Option<f64>,
    },
    /// Score the trained models of one condition on the test volume.
    Eval {
        #[command(flatten)]
        cond: Condition,
        /// Score only this 3D run.
        #[arg(long, value_name = "F")]
        alpha: Option<f64>,
    },
    /// Run the whole sparsity grid and write CSV, summary and plots.
    Sweep {
        /// Replace the config's slice counts.
        #[arg(long, value_name = "N")]
        slices: Vec<usize>,
        /// Replace the config's seeds.
        #[arg(long, value_name = "N")]
        seed: Vec<u64>,
        /// Replace the config's pseudo-label weights.
        #[arg(long, value_name = "F")]
        alpha: Vec<f64>,
    },
    /// Rebuild summary and plots from a results CSV.
    Report {
        /// Defaults to `<out>/results.csv`.
        #[arg(long, value_name = "PATH")]
        csv: Option<PathBuf>,
    },
}

fn exit_code(kind: ErrorKind) -> u8 {
    match kind {
        ErrorKind::Config | ErrorKind::Invalid => 2,
        ErrorKind::Artifact | ErrorKind::Io => 3,
        ErrorKind::Numerical => 4,
    }
}

fn base_config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut cfg = match (&cli.config, cli.smoke) {
        (Some(path), _) => ExperimentConfig::load(path)?,
        (None, true) => ExperimentConfig::smoke(),
        (None, false) => ExperimentConfig::desk(),
    };
    if let Some(out) = &cli.out {
        cfg.output_dir = out.clone();
    }
    if let Some(j) = cli.jobs {
        cfg.sweep.jobs = j;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn resolve(cfg: &ExperimentConfig, c: Condition) -> Result<(usize, u64)> {
    let slices = c.slices.unwrap_or(cfg.sweep.slice_counts[0]);
    if slices == 0 || slices > cfg.depth() {
        return Err(Error::Config(format!("--slices must be in 1..={}, got {slices}", cfg.depth())));
    }
    Ok((slices, c.seed.unwrap_or(cfg.sweep.seeds[0])))
}

fn default_alpha(cfg: &ExperimentConfig) -> f64 {
    cfg.sweep.alphas.iter().copied().find(|&a| a > 0.0).unwrap_or(0.0)
}

fn print_paths(paths: &[PathBuf]) {
    for p in paths {
        println!("{}", p.display());
    }
}

fn run(cli: Cli) -> Result<u8> {
    let mut cfg = base_config(&cli)?;
    if let Command::Sweep { slices, seed, alpha } = &cli.command {
        if !slices.is_empty() {
            cfg.sweep.slice_counts = slices.clone();
        }
        if !seed.is_empty() {
            cfg.sweep.seeds = seed.clone();
        }
        if !alpha.is_empty() {
            cfg.sweep.alphas = alpha.clone();
        }
        cfg.validate()?;
    }
    let ctx = Ctx::new(cfg);
    log::info!("config hash {}", ctx.hash);
    match cli.command {
        Command::Generate => print_paths(&stages::generate(&ctx)?),
        Command::Train2d { cond } => {
            let (n, s) = resolve(&ctx.cfg, cond)?;
            print_paths(&[stages::train2d(&ctx, n, s)?]);
        }
        Command::Pseudolabel { cond } => {
            let (n, s) = resolve(&ctx.cfg, cond)?;
            print_paths(&stages::pseudolabel(&ctx, n, s)?);
        }
        Command::Train3d { cond, alpha } => {
            let (n, s) = resolve(&ctx.cfg, cond)?;
            print_paths(&[stages::train3d(&ctx, n, s, alpha.unwrap_or_else(|| default_alpha(&ctx.cfg)))?]);
        }
        Command::Eval { cond, alpha } => {
            let (n, s) = resolve(&ctx.cfg, cond)?;
            let (_, reports) = stages::eval(&ctx, n, s, alpha)?;
            print!("{}", reports_to_csv(&reports)?);
        }
        Command::Sweep { .. } => {
            let r = stages::sweep(&ctx)?;
            print_paths(&r.written);
            if let Some(kind) = r.worst {
                log::warn!("{} condition stage(s) failed; see failures.json", r.failures);
                return Ok(exit_code(kind));
            }
        }
        Command::Report { csv } => {
            let (written, reports) = stages::report(&ctx, csv.as_deref())?;
            for row in pseudoseg::evalkit::summarize(&reports) {
                println!(
                    "{:<13} alpha={:<5} fraction={:<8} seeds={} dice={:.4} precision={:.4} recall={:.4}",
                    row.scheme.as_str(),
                    row.alpha.map(|a| a.to_string()).unwrap_or_else(|| "-".into()),
                    row.labeled_fraction,
                    row.seeds,
                    row.dice,
                    row.precision,
                    row.recall
                );
            }
            print_paths(&written);
        }
    }
    Ok(0)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(e.kind()))
        }
    }
}
