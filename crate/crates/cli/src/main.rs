use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use radiot::pipeline::{PipelineError, Run};

#[derive(Parser)]
#[command(name = "radiot", version, about = "Radio-spectrum intrusion detection for IoT deployments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the simulated datasets as waterfall files and ground-truth CSVs.
    Simulate(Common),
    /// Convert a hackrf_sweep capture into waterfall records.
    Ingest {
        #[command(flatten)]
        common: Common,
        /// Capture to read; defaults to the config's ingest.csv.
        #[arg(long)]
        input: Option<PathBuf>,
    },
    /// Train, calibrate, detect and evaluate in one go.
    Pipeline {
        #[command(flatten)]
        common: Common,
        /// Load models saved by an earlier run instead of retraining.
        #[arg(long)]
        reuse_models: bool,
    },
    /// Score the evaluation datasets with already trained slices.
    Detect(Common),
    /// Rebuild the reports from detection output.
    Evaluate(Common),
}

#[derive(Args)]
struct Common {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl Common {
    fn run(&self) -> Result<Run, PipelineError> {
        Run::load(&self.config, &self.out, self.seed)
    }
}

fn execute(command: Command) -> Result<(), PipelineError> {
    match command {
        Command::Simulate(c) => {
            for d in c.run()?.simulate()? {
                println!("{}: {} waterfalls, {} attacks", d.name, d.waterfalls, d.attacks);
            }
        }
        Command::Ingest { common, input } => {
            let n = common.run()?.ingest(input.as_deref())?;
            println!("{n} waterfalls");
        }
        Command::Pipeline { common, reuse_models } => {
            for (name, report) in common.run()?.pipeline(reuse_models)? {
                println!("== {name}\n{}", report.to_table());
            }
        }
        Command::Detect(c) => c.run()?.detect()?,
        Command::Evaluate(c) => {
            for (name, report) in c.run()?.evaluate()? {
                println!("== {name}\n{}", report.to_table());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            let mut msg = e.to_string();
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let text = s.to_string();
                if !msg.contains(&text) {
                    msg.push_str(": ");
                    msg.push_str(&text);
                }
                source = s.source();
            }
            eprintln!("error[{}]: {msg}", category.name());
            ExitCode::from(category.exit_code() as u8)
        }
    }
}
