use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use duality_cli::{run, validate, RunOptions};

#[derive(Parser)]
#[command(name = "duality-lab", version, about = "Conditional duality experiments on finite markets")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the checks listed in CONFIG and write report.json / report.csv.
    Run {
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Multiplies every tolerance.
        #[arg(long)]
        tol_scale: Option<f64>,
        /// Worker threads; affects scheduling only.
        #[arg(long)]
        jobs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Parse CONFIG and check its invariants without solving.
    Validate { config: PathBuf },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            out,
            tol_scale,
            jobs,
            seed,
        } => {
            let opts = RunOptions {
                out,
                tol_scale,
                jobs,
                seed,
            };
            match run(&config, &opts) {
                Ok((outcome, dir)) => {
                    for c in &outcome.report.checks {
                        println!("{:?}: {}", c.check, if c.pass { "pass" } else { "FAIL" });
                        for r in c.rows.iter().filter(|r| !r.pass) {
                            println!("  {} = {} (tol {})", r.name, r.value, r.tol);
                        }
                    }
                    println!("reports written to {}", dir.display());
                    ExitCode::from(if outcome.report.pass { 0 } else { 1 })
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(e.exit_code() as u8)
                }
            }
        }
        Command::Validate { config } => match validate(&config) {
            Ok(()) => {
                println!("ok");
                ExitCode::SUCCESS
            }
            Err(errs) => {
                for e in errs {
                    eprintln!("error: {e}");
                }
                ExitCode::from(2)
            }
        },
    }
}
