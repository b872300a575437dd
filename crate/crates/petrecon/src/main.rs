//! Command line entry point.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use petrecon::config::{load_config, RunConfig};
use petrecon::pipeline::{
    cmd_all, cmd_build_train_set, cmd_evaluate, cmd_phantom, cmd_plot, cmd_reconstruct,
    cmd_simulate, cmd_train, Method,
};
use petrecon::Result;

#[derive(Debug, Parser)]
#[command(
    name = "petrecon",
    about = "Desk-scale emission tomography simulation, reconstruction, and evaluation",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Path to the TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the master seed from the configuration.
    #[arg(long)]
    seed: Option<u64>,
    /// Cap worker threads (0 = all cores); never changes results.
    #[arg(long)]
    threads: Option<usize>,
    /// Print the full default configuration and exit.
    #[arg(long)]
    print_defaults: bool,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Rasterize the test phantom and its lesion-free twin.
    Phantom(Common),
    /// Simulate the test scan (counts, background means, scaled truth).
    Simulate(Common),
    /// Build (noisy, clean) reconstruction pairs from training phantoms.
    BuildTrainSet(Common),
    /// Fit the denoising network on the stored pairs.
    Train(Common),
    /// Reconstruct the test scan with one method.
    Reconstruct {
        #[command(flatten)]
        common: Common,
        /// mlem, mapem, gauss, cnn-denoise, or cnn-admm.
        #[arg(long)]
        method: String,
        /// Post-filter width in mm (gauss only); defaults to the config value.
        #[arg(long)]
        fwhm: Option<f64>,
    },
    /// Sweep all methods over noise realizations and write curves.
    Evaluate(Common),
    /// Render the stored curves as an SVG plot.
    Plot(Common),
    /// Run the whole pipeline in order.
    All(Common),
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::Phantom(c)
            | Command::Simulate(c)
            | Command::BuildTrainSet(c)
            | Command::Train(c)
            | Command::Evaluate(c)
            | Command::Plot(c)
            | Command::All(c) => c,
            Command::Reconstruct { common, .. } => common,
        }
    }
}

fn load(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => load_config(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(threads) = common.threads {
        cfg.threads = threads;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let common = cli.command.common();
    if common.print_defaults {
        print!("{}", RunConfig::default().canonical_toml());
        return Ok(());
    }
    let cfg = load(common)?;
    if cfg.threads > 0 {
        // Ignore failure when a global pool already exists (e.g. tests).
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.threads)
            .build_global();
    }
    match &cli.command {
        Command::Phantom(_) => cmd_phantom(&cfg),
        Command::Simulate(_) => cmd_simulate(&cfg),
        Command::BuildTrainSet(_) => cmd_build_train_set(&cfg),
        Command::Train(_) => cmd_train(&cfg),
        Command::Reconstruct { method, fwhm, .. } => {
            cmd_reconstruct(&cfg, Method::parse(method)?, *fwhm)
        }
        Command::Evaluate(_) => cmd_evaluate(&cfg),
        Command::Plot(_) => cmd_plot(&cfg),
        Command::All(_) => cmd_all(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
