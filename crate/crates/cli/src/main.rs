//! `dpmld`: generate data, train, allocate budgets, audit and report.
//!
//! Exit codes: 0 success, 1 other failure, 2 invalid configuration,
//! 3 missing or unwritable data, 4 audit violation.

mod commands;
mod settings;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{AllocateArgs, AuditArgs, BenchmarkArgs, GenDataArgs, ReportArgs};
use train::TrainArgs;

#[derive(Parser, Debug)]
#[command(
    name = "dpmld",
    version,
    about = "Element-wise Laplacian dropout with learned per-feature budgets",
    after_help = "Options left unset fall back to the --config file, then to the listed \
                  defaults. Seeds also honor DPMLD_SEED. Exit codes: 0 ok, 1 failure, \
                  2 config error, 3 data error, 4 audit violation."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic two-modality dataset
    GenData(GenDataArgs),
    /// Train one model and write a run directory
    Train(TrainArgs),
    /// Print the noise budget and scale for given drop rates
    Allocate(AllocateArgs),
    /// Measure the worst-case privacy loss of the release mechanism
    Audit(AuditArgs),
    /// Compare schemes over budgets and seeds
    Benchmark(BenchmarkArgs),
    /// Summarize the per-block allocation of a run
    Report(ReportArgs),
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::cmd_gen_data(a),
        Command::Train(a) => train::cmd_train(a),
        Command::Allocate(a) => commands::cmd_allocate(a),
        Command::Audit(a) => commands::cmd_audit(a),
        Command::Benchmark(a) => commands::cmd_benchmark(a),
        Command::Report(a) => commands::cmd_report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("dpmld: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
