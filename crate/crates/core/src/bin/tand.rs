use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use tand_core::config::RunConfig;
use tand_core::pipeline::{self, Command, Flags};

#[derive(Parser)]
#[command(name = "tand", version, about = "Anderson localization in the time domain")]
struct Cli {
    #[command(subcommand)]
    command: Cmd,
}

#[derive(clap::Args)]
struct Common {
    /// INI run configuration; defaults apply when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (overrides TAND_WORKERS and the config).
    #[arg(long)]
    workers: Option<usize>,
    /// Skip jobs the manifest already lists as done.
    #[arg(long)]
    resume: bool,
}

#[derive(Subcommand)]
enum Cmd {
    /// Disorder realizations, correlation and moment checks.
    Gen(Common),
    /// Transfer-matrix scan over energies, widths and realizations.
    Tmm(Common),
    /// Finite-size scaling fit of a finished scan.
    Fss(Common),
    /// Interior eigenstates of the effective Hamiltonian.
    Eig(Common),
    /// Lab-frame time traces of stored eigenstates.
    Trace(Common),
    /// Driven 1D propagation against the effective model.
    Drive1d(Common),
    /// Second-order secular term scan.
    CheckSecular(Common),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Cmd::Gen(c) => (Command::Gen, c),
        Cmd::Tmm(c) => (Command::Tmm, c),
        Cmd::Fss(c) => (Command::Fss, c),
        Cmd::Eig(c) => (Command::Eig, c),
        Cmd::Trace(c) => (Command::Trace, c),
        Cmd::Drive1d(c) => (Command::Drive1d, c),
        Cmd::CheckSecular(c) => (Command::CheckSecular, c),
    };
    let mut config = match &common.config {
        Some(p) => match RunConfig::load(p) {
            Ok(c) => c,
            Err(e) => {
                eprintln!("tand: {e}");
                return ExitCode::from(1);
            }
        },
        None => RunConfig::default(),
    };
    let flags = Flags { seed: common.seed, out: common.out, workers: common.workers, resume: common.resume };
    flags.apply(&mut config);
    match pipeline::run(command, &config, flags.resume) {
        Ok(outcome) => {
            println!(
                "{}: {} new jobs, {} skipped, {} files in {}",
                command.name(),
                outcome.new_jobs,
                outcome.skipped_jobs,
                outcome.files.len(),
                config.run.output_dir.display()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("tand {}: {e}", command.name());
            ExitCode::from(pipeline::exit_code(&e) as u8)
        }
    }
}
