//! Command-line front end for the distillation laboratory.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use mitkd::mtl::VariantKind;
use mitkd::pipeline::Experiment;
use mitkd::Error;

#[derive(Parser)]
#[command(
    name = "mitkd",
    about = "Compare vanilla, single-task and multi-task teacher preparation \
             under one task-agnostic relation-distillation recipe"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain the base (and, when configured, larger) teacher on the corpus.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
    },
    /// Produce one teacher variant from the pretrained checkpoint.
    PrepareTeacher {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
    },
    /// Distill the student for one teacher variant.
    Distill {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        variant: String,
    },
    /// Run the in-domain / out-domain / low-resource protocol.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Worker threads for independent protocol cells.
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
    /// Render the comparison report from persisted results.
    Report {
        #[arg(long)]
        config: PathBuf,
    },
    /// All stages in order.
    RunAll {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value_t = 1)]
        threads: usize,
    },
}

fn run(cli: Cli) -> mitkd::Result<()> {
    match cli.command {
        Command::Pretrain { config } => {
            Experiment::from_file(&config)?.stage_pretrain()?;
        }
        Command::PrepareTeacher { config, variant } => {
            let kind = VariantKind::from_label(&variant)?;
            Experiment::from_file(&config)?.stage_prepare_teacher(kind)?;
        }
        Command::Distill { config, variant } => {
            let kind = VariantKind::from_label(&variant)?;
            Experiment::from_file(&config)?.stage_distill(kind)?;
        }
        Command::Evaluate { config, threads } => {
            Experiment::from_file(&config)?.stage_evaluate(threads)?;
        }
        Command::Report { config } => {
            let exp = Experiment::from_file(&config)?;
            exp.stage_report()?;
            println!("report written to {}", exp.report_txt_path().display());
        }
        Command::RunAll { config, threads } => {
            let exp = Experiment::from_file(&config)?;
            exp.run_all(threads)?;
            println!("experiment complete under {}", exp.dir.display());
            println!("report: {}", exp.report_txt_path().display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            match err {
                Error::Config(_) => ExitCode::from(2),
                Error::MissingPrerequisite { .. } => ExitCode::from(3),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
