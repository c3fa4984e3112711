//! `cmadet`: dataset generation, boosted training, ensemble selection, fused
//! inference and evaluation.
//!
//! Exit codes: 0 on success, 1 for user errors (bad flags, invalid config,
//! missing or malformed inputs), 2 for internal failures.

mod commands;
mod logger;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(name = "cmadet", version, about = "Noise-robust boosted detectors on synthetic scenes")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset (images, annotations, manifest).
    Gen {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run both boosting stages and write one directory per iteration.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Dataset directory written by `gen`.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Continue from the last completed iteration in `--out`.
        #[arg(long)]
        resume: bool,
    },
    /// Select the ensemble from a training run.
    Select {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        /// Manifest path; defaults to `<run>/ensemble.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fused ensemble inference over a directory of PGM images.
    Infer {
        #[arg(long)]
        ensemble: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score detections against annotations and write reports.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        detections: PathBuf,
        #[arg(long)]
        annotations: PathBuf,
        /// Report directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate, train, select and score in one process; writes `report.json`.
    Experiment {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("CMADET_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| cmadet::Error::config(format!("CMADET_THREADS must be a positive integer, got {v:?}")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    init_threads()?;
    match cli.command {
        Command::Gen { cfg, out } => commands::gen(&commands::load_config(cfg.config.as_deref(), cfg.seed)?, &out),
        Command::Train { cfg, data, out, resume } => commands::train(cfg.config.as_deref(), cfg.seed, &data, &out, resume),
        Command::Select { run, out } => commands::select(&run, out.as_deref()),
        Command::Infer { ensemble, images, out } => commands::infer(&ensemble, &images, &out),
        Command::Eval {
            cfg,
            detections,
            annotations,
            out,
        } => commands::eval(
            &commands::load_config(cfg.config.as_deref(), cfg.seed)?,
            &detections,
            &annotations,
            &out,
        ),
        Command::Experiment { cfg, out } => {
            commands::experiment(&commands::load_config(cfg.config.as_deref(), cfg.seed)?, &out)
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<cmadet::Error>() {
        Some(e) if e.is_user_error() => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    logger::init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
