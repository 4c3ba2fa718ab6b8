mod converge;
mod error;
mod filter;
mod gain;
mod manifest;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::error::{CliError, EXIT_CONFIG};

/// Gain approximation and feedback particle filter experiments.
#[derive(Debug, Parser)]
#[command(name = "fpfgain", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Exact, Galerkin and kernel gains on the bimodal density.
    Gain(gain::GainArgs),
    /// Error trend of the Galerkin and kernel gains as N grows.
    Converge(converge::ConvergeArgs),
    /// Run the filtering experiment over several seeds.
    Filter(filter::FilterArgs),
}

fn dispatch(command: &Command) -> Result<(), CliError> {
    match command {
        Command::Gain(args) => {
            let files = gain::run(args)?;
            println!("wrote {} files to {}", files.len() + 1, args.out.display());
        }
        Command::Converge(args) => {
            for row in converge::run(args)? {
                println!("{:<9} N={:<6} median={:.4e} iqr=[{:.4e}, {:.4e}]", row.method, row.n, row.median, row.q25, row.q75);
            }
            println!("wrote {}", args.out.join("converge.csv").display());
        }
        Command::Filter(args) => {
            let summary = filter::run(args)?;
            if let Some(agg) = summary["aggregate"].as_object() {
                for entry in agg.values() {
                    println!(
                        "{:<13} completed {}/{} prob>0.5 in {}",
                        entry["method"].as_str().unwrap_or("?"),
                        entry["completed"],
                        entry["runs"],
                        entry["prob_gt_half_above_half"],
                    );
                }
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            let code = if err.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = err.print();
            return ExitCode::from(code as u8);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
