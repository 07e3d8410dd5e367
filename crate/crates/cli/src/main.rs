//! Command-line runner for the Bayesian probabilistic numerics experiments.
//!
//! Exit status: 0 on success, 2 for configuration errors, 3 when a sampler
//! fails, 4 for numerical breakdowns such as an ill-conditioned Gram matrix.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use pnm_core::error::Error;
use pnm_core::experiments::{self, ExperimentConfig, RunOptions};

#[derive(Parser)]
#[command(name = "pnm", version, about = "Bayesian probabilistic numerical methods")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a config file.
    Run(RunArgs),
    /// Check a config file without running it.
    Validate {
        #[arg(long)]
        config: PathBuf,
        /// Validate with the `paper_scale` overrides applied.
        #[arg(long)]
        paper_scale: bool,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, default_value = "output")]
    output_dir: PathBuf,
    /// Worker threads; results do not depend on this.
    #[arg(long)]
    workers: Option<usize>,
    /// Use the full-size sampler settings from the config's `paper_scale` block.
    #[arg(long)]
    paper_scale: bool,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Validate { config, paper_scale } => validate(&config, paper_scale),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn load(path: &std::path::Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::from_path(path).map_err(|e| match e {
        Error::Io(msg) => Error::Config {
            line: 0,
            column: 0,
            message: format!("cannot read {}: {msg}", path.display()),
        },
        other => other,
    })
}

fn validate(path: &std::path::Path, paper_scale: bool) -> Result<(), Error> {
    let mut config = load(path)?;
    if paper_scale {
        config = config.with_paper_scale();
    }
    config.validate()?;
    println!("{}: valid", path.display());
    Ok(())
}

fn run(args: RunArgs) -> Result<(), Error> {
    let config = load(&args.config)?;
    let opts = RunOptions {
        seed: args.seed,
        output_dir: args.output_dir,
        paper_scale: args.paper_scale,
    };
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(w) = args.workers {
        if w == 0 {
            return Err(Error::InvalidParameter {
                field: "--workers".into(),
                reason: "must be positive".into(),
            });
        }
        builder = builder.num_threads(w);
    }
    let pool = builder.build().map_err(|e| Error::Io(e.to_string()))?;
    let report = pool.install(|| experiments::run(&config, &opts))?;
    for line in &report.console {
        println!("{line}");
    }
    for f in &report.files {
        println!("wrote {}", f.display());
    }
    Ok(())
}
