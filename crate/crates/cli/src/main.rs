//! `fairscreen`: subgroup audits, mitigation and synthetic experiments from
//! the command line.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.

mod commands;
mod manifest;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use serde::Serialize;

use commands::audit::AuditArgs;
use commands::augment::AugmentArgs;
use commands::mitigate::MitigateCommand;
use commands::pair::PairArgs;
use commands::report::ReportArgs;
use commands::simulate::SimulateArgs;
use commands::UsageError;
use manifest::Run;

#[derive(Debug, Parser)]
#[command(name = "fairscreen", version, about = "Subgroup fairness audits and bias mitigation for speech-based cognitive screening")]
#[command(arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for all outputs, including manifest.json.
    #[arg(long, global = true, default_value = "fairscreen-out")]
    out_dir: PathBuf,
    /// Omit wall-clock timestamps so repeated runs are byte-identical.
    #[arg(long, global = true)]
    deterministic: bool,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(rename_all = "snake_case")]
enum Command {
    /// Per-subgroup TPR/FPR tables and equal-opportunity gaps.
    Audit(AuditArgs),
    /// Pre- and post-processing mitigations.
    Mitigate {
        #[command(subcommand)]
        which: MitigateCommand,
    },
    /// Oversample subgroups with time shifts and spectrogram masks.
    Augment(AugmentArgs),
    /// Pair acoustically dissimilar speakers for voice conversion.
    Pair(PairArgs),
    /// Train baseline and mitigated models on a synthetic biased scenario.
    Simulate(SimulateArgs),
    /// Render audit bundles as Markdown and SVG.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Audit(_) => "audit",
            Command::Mitigate {
                which: MitigateCommand::Reweight(_),
            } => "mitigate reweight",
            Command::Mitigate {
                which: MitigateCommand::Ceo(_),
            } => "mitigate ceo",
            Command::Augment(_) => "augment",
            Command::Pair(_) => "pair",
            Command::Simulate(_) => "simulate",
            Command::Report(_) => "report",
        }
    }

    fn execute(&self, run: &mut Run) -> anyhow::Result<()> {
        match self {
            Command::Audit(a) => commands::audit::run(a, run),
            Command::Mitigate { which } => commands::mitigate::run(which, run),
            Command::Augment(a) => commands::augment::run(a, run),
            Command::Pair(a) => commands::pair::run(a, run),
            Command::Simulate(a) => commands::simulate::run(a, run),
            Command::Report(a) => commands::report::run(a, run),
        }
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.chain().any(|e| e.is::<UsageError>()) {
        return 1;
    }
    let numerical = err
        .chain()
        .filter_map(|e| e.downcast_ref::<fairscreen::Error>())
        .any(fairscreen::Error::is_numerical);
    if numerical {
        3
    } else {
        2
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();

    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };

    let config = serde_json::to_value(&cli.command).unwrap_or(serde_json::Value::Null);
    let mut run = Run::new(cli.command.name(), config, cli.out_dir.clone(), cli.deterministic);
    let result = cli.command.execute(&mut run);
    let (code, outcome) = match &result {
        Ok(()) => (0, Ok(())),
        Err(e) => {
            let code = exit_code(e);
            (code, Err((code, format!("{e:#}"))))
        }
    };
    if let Err(e) = &result {
        if code == 1 {
            eprintln!("error: {e:#}\n\nRun `fairscreen {} --help` for usage.", cli.command.name());
        } else {
            eprintln!("error: {e:#}");
        }
    }
    if let Err(e) = run.finish(outcome) {
        eprintln!("error: could not write the run manifest: {e:#}");
        return ExitCode::from(code.max(2));
    }
    ExitCode::from(code)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cli_definition_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_code_classes() {
        let usage: anyhow::Error = UsageError("x".into()).into();
        assert_eq!(exit_code(&usage), 1);
        let num: anyhow::Error = fairscreen::Error::Numerical("nan".into()).into();
        assert_eq!(exit_code(&num.context("training")), 3);
        let data: anyhow::Error = fairscreen::Error::DuplicateSubject("s".into()).into();
        assert_eq!(exit_code(&data), 2);
        assert_eq!(exit_code(&anyhow::anyhow!("io")), 2);
    }
}
