use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use msreid_cli::{emit_report, run_pipeline, run_sweep, CliResult, Profile, RunConfig, StageSet};

#[derive(Parser)]
#[command(name = "msreid", version, about = "Unsupervised multi-scenario person re-identification on synthetic data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the pipeline, or every sweep combination if the config has one.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = Profile::Desk)]
        profile: Profile,
        /// Comma-separated subset of s1,s2,s3,eval.
        #[arg(long, default_value = "s1,s2,s3,eval")]
        stages: StageSet,
        #[arg(long)]
        seed: Option<u64>,
        /// Overrides run.output_dir.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Summarize finished or partial run directories.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    if let Some(n) = std::env::var("MSREID_THREADS").ok().and_then(|v| v.parse().ok()) {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("MSREID_THREADS ignored: {e}");
        }
    }
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::FAILURE
        }
    }
}

fn dispatch(command: Command) -> CliResult<()> {
    match command {
        Command::Run { config, profile, stages, seed, out } => {
            let mut cfg = RunConfig::load(&config, profile)?;
            if let Some(s) = seed {
                cfg.run.seed = s;
            }
            if let Some(o) = out {
                cfg.run.output_dir = o;
            }
            let dir = cfg.run.output_dir.clone();
            if cfg.sweep.is_some() {
                let dirs = run_sweep(&cfg, &dir)?;
                print!("{}", emit_report(&dirs, Some(&dir.join("sweep_report.csv")))?);
            } else {
                run_pipeline(&cfg, &dir, stages)?;
            }
            Ok(())
        }
        Command::Report { runs, csv } => {
            print!("{}", emit_report(&runs, csv.as_deref())?);
            Ok(())
        }
    }
}
