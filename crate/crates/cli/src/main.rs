mod commands;
mod config;
mod repl;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use crate::config::ConfigError;

#[derive(Parser)]
#[command(name = "bicap", version, about = "Bidirectional captioning pretraining, probing and report generation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic paired image/report corpus with split tags.
    GenData(commands::GenDataArgs),
    /// Pretrain encoder and decoders with the captioning objective.
    Pretrain(commands::PretrainArgs),
    /// Train a linear probe on frozen encoder features.
    Probe(commands::ProbeArgs),
    /// Generate reports for a corpus split or a single image.
    Caption(commands::CaptionArgs),
    /// Score an existing reports file against a corpus.
    Eval(commands::EvalArgs),
    /// Interactive prompting against one image.
    Repl(repl::ReplArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Probe(a) => commands::probe(a),
        Command::Caption(a) => commands::caption(a),
        Command::Eval(a) => commands::eval(a),
        Command::Repl(a) => repl::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.chain().any(|c| c.is::<ConfigError>()) {
                ExitCode::from(2)
            } else {
                ExitCode::from(3)
            }
        }
    }
}
