use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use qmrisr::cli::{cmd_evaluate, cmd_phantom, cmd_rank, cmd_superres, exit_code, ranking_table, PipelineConfig};
use qmrisr::{Error, Result};

/// Guided super-resolution of quantitative MRI maps on a synthetic phantom.
#[derive(Parser)]
#[command(name = "qmrisr", version)]
struct Args {
    /// Pipeline config file (`[section]` headers with key=value lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory; also the input directory unless `[paths]` says otherwise.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Overrides the phantom seed (the noise uses seed + 1).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Suppress everything but errors.
    #[arg(long, global = true)]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the phantom, its LR contrasts, guides and the Q_l fit.
    Phantom,
    /// Solve for super-resolved maps.
    Superres,
    /// Score SR and baseline maps against the ground truth.
    Evaluate,
    /// Rank models from their report files.
    Rank {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
    },
}

fn run(args: &Args) -> Result<String> {
    let mut config = match &args.config {
        Some(path) => PipelineConfig::load(path)?,
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config = config.with_seed(seed);
    }
    Ok(match &args.command {
        Command::Phantom => cmd_phantom(&config, &args.out)?
            .iter()
            .map(|p| format!("{}\n", p.display()))
            .collect(),
        Command::Superres => {
            let outcome = cmd_superres(&config, &args.out)?;
            let last = outcome.history.last().expect("history starts with the initial point");
            format!(
                "status={} iterations={} data_loss={} guide_loss={} total={}\n",
                outcome.status,
                last.iter,
                last.data_loss,
                last.guide_loss,
                last.total
            )
        }
        Command::Evaluate => cmd_evaluate(&config, &args.out)?.to_tsv(),
        Command::Rank { reports } => ranking_table(&cmd_rank(reports)?),
    })
}

fn main() -> ExitCode {
    let args = Args::parse();
    match run(&args) {
        Ok(text) => {
            if !args.quiet {
                print!("{text}");
            }
            ExitCode::SUCCESS
        }
        Err(err) => {
            eprintln!("qmrisr: {err}");
            if let Error::Io { source, .. } = &err {
                eprintln!("  caused by: {source}");
            }
            ExitCode::from(exit_code(&err) as u8)
        }
    }
}
