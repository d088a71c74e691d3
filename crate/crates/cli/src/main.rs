mod cli;
mod commands;
mod config;
mod output;

use std::process;

use clap::Parser;
use serde_json::json;

use crate::cli::{Cli, Command, PckgCommand};

/// Exit status for a library error class: 1 bad input, 2 runtime/numeric,
/// 3 transport or model answers.
fn exit_code(err: &anyhow::Error) -> (i32, &'static str) {
    let Some(e) = err.chain().find_map(|c| c.downcast_ref::<physprior::Error>()) else {
        let io = err.chain().any(|c| c.is::<std::io::Error>());
        return (if io { 1 } else { 2 }, if io { "io" } else { "runtime" });
    };
    let code = match e {
        physprior::Error::Numeric(_) | physprior::Error::Diverged { .. } => 2,
        physprior::Error::Transport(_) | physprior::Error::Extraction { .. } | physprior::Error::EmptyGraph { .. } => 3,
        _ => 1,
    };
    (code, e.class())
}

fn stage(cmd: &Command) -> &'static str {
    match cmd {
        Command::Pckg(PckgCommand::Validate { .. }) => "pckg validate",
        Command::Pckg(PckgCommand::Extract(_)) => "pckg extract",
        Command::Synth(_) => "synth",
        Command::Train(_) => "train",
        Command::Refine(_) => "refine",
        Command::Eval(_) => "eval",
        Command::Ablate(_) => "ablate",
    }
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            eprintln!("{}", json!({"error": {"stage": "arguments", "class": "input", "message": e.to_string().trim()}}));
            process::exit(1);
        }
    };
    let result = match &cli.command {
        Command::Pckg(PckgCommand::Validate { pckg, common }) => commands::pckg_validate(pckg, common),
        Command::Pckg(PckgCommand::Extract(args)) => commands::pckg_extract(args),
        Command::Synth(args) => commands::synth(args),
        Command::Train(args) => commands::train_cmd(args),
        Command::Refine(args) => commands::refine_cmd(args),
        Command::Eval(args) => commands::eval_cmd(args),
        Command::Ablate(args) => commands::ablate(args),
    };
    if let Err(err) = result {
        let (code, class) = exit_code(&err);
        let message = format!("{err:#}");
        eprintln!("{}", json!({"error": {"stage": stage(&cli.command), "class": class, "message": message}}));
        process::exit(code);
    }
}
