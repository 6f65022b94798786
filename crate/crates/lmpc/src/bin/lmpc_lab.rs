use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use lmpc::cli;

/// Learning-MPC experiment runner.
#[derive(Parser)]
#[command(name = "lmpc-lab", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a campaign to convergence and write its outputs.
    Run {
        /// JSON experiment configuration.
        #[arg(long)]
        config: PathBuf,
        /// Output directory (defaults to the config's out_dir, then
        /// campaign_<instance>).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Solve the reference optimum and compare a stored campaign against it.
    Oracle {
        #[arg(long)]
        config: PathBuf,
        /// Directory of a completed campaign.
        #[arg(long)]
        campaign: PathBuf,
        /// Reference horizon (saturation is verified at twice this value).
        #[arg(long, default_value_t = 150)]
        horizon: usize,
    },
    /// Emit plot-ready CSV series from a stored campaign.
    ExportPlots {
        #[arg(long)]
        campaign: PathBuf,
    },
}

fn init_threads() {
    // LMPC_THREADS caps worker parallelism; 0 or unset means automatic.
    if let Ok(v) = std::env::var("LMPC_THREADS") {
        if let Ok(n) = v.trim().parse::<usize>() {
            if n > 0 {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
        }
    }
}

fn main() -> ExitCode {
    init_threads();
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Run { config, out } => cli::cmd_run(&config, out.as_deref()),
        Command::Oracle { config, campaign, horizon } => {
            cli::cmd_oracle(&config, &campaign, horizon)
        }
        Command::ExportPlots { campaign } => cli::cmd_export_plots(&campaign),
    };
    ExitCode::from(code as u8)
}
