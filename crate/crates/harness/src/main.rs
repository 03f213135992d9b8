use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mpdlab_core::diagnostics::dump_mid_estimates;
use mpdlab_harness::bench::conflict_benchmark;
use mpdlab_harness::config::ExperimentConfig;
use mpdlab_harness::runner::{load_trace, run_experiment};
use mpdlab_harness::Result;

#[derive(Parser)]
#[command(
    name = "mpdlab",
    version,
    about = "Keyframe-interpolation sampler experiments on synthetic worlds"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every configured mode and seed at the configured knobs.
    Run(ConfigArgs),
    /// Run the cartesian product of the [sweep] grids.
    Sweep(ConfigArgs),
    /// Compare the MPD modes against their baselines on a motion world.
    BenchConflict(ConfigArgs),
    /// Write the estimates recorded at a fraction of the schedule.
    DumpMid {
        run_dir: PathBuf,
        #[arg(long, default_value_t = 0.5)]
        at: f64,
        /// Destination directory, `<run-dir>/mid` by default.
        #[arg(long)]
        dest: Option<PathBuf>,
    },
}

#[derive(Args)]
struct ConfigArgs {
    config: PathBuf,
    /// Run this single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output root, overriding the config. Without either, `$MPDLAB_OUT`
    /// or `./mpdlab-out` is used.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Concurrent runs.
    #[arg(long)]
    jobs: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut config = ExperimentConfig::load(&self.config)?;
        if let Some(seed) = self.seed {
            config.seeds = vec![seed];
        }
        if let Some(out) = &self.out {
            config.out = Some(out.clone());
        }
        if let Some(jobs) = self.jobs {
            config.jobs = Some(jobs);
        }
        config.validate()?;
        Ok(config)
    }
}

fn warn(warnings: &[String]) {
    for w in warnings {
        eprintln!("warning: {w}");
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Run(args) => {
            let config = args.load()?;
            let report = run_experiment(&config, false)?;
            warn(&report.warnings);
            println!("{} runs, report in {}", report.rows.len(), config.out_dir().display());
        }
        Command::Sweep(args) => {
            let config = args.load()?;
            let report = run_experiment(&config, true)?;
            warn(&report.warnings);
            println!(
                "{} runs in {} cells, report in {}",
                report.rows.len(),
                report.cells.len(),
                config.out_dir().display()
            );
        }
        Command::BenchConflict(args) => {
            let config = args.load()?;
            let report = conflict_benchmark(&config, true)?;
            warn(&report.warnings);
            print!("{}", report.table());
        }
        Command::DumpMid { run_dir, at, dest } => {
            let trace = load_trace(&run_dir)?;
            let dest = dest.unwrap_or_else(|| run_dir.join("mid"));
            for path in dump_mid_estimates(&trace, trace.len(), at, &dest)? {
                println!("{}", path.display());
            }
        }
    }
    Ok(())
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
