//! The `stainseg` command line: dataset generation, CK labeling, training,
//! prediction, scoring and evaluation.

pub mod args;
pub mod checkpoint;
pub mod commands;
pub mod error;
pub mod io;

use std::ffi::OsString;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::Parser;

use args::{Cli, Command, OUT_ROOT_ENV};
use error::{CliError, CliResult};

/// Output directory of a subcommand: `--out`, else `$STAINSEG_OUT_ROOT/<name>`.
pub fn output_dir(command: &Command, env_root: Option<OsString>) -> CliResult<PathBuf> {
    match (command.out(), env_root) {
        (Some(out), _) => Ok(out.clone()),
        (None, Some(root)) if !root.is_empty() => Ok(PathBuf::from(root).join(command.name())),
        _ => Err(CliError::Usage(format!("{} needs --out or {OUT_ROOT_ENV}", command.name()))),
    }
}

pub fn dispatch(command: &Command) -> CliResult<()> {
    let out = output_dir(command, std::env::var_os(OUT_ROOT_ENV))?;
    io::create_dir(&out)?;
    match command {
        Command::Synth(a) => commands::synth(a, &out),
        Command::CkSegment(a) => commands::ck_segment(a, &out),
        Command::Train(a) => commands::train(a, &out),
        Command::Predict(a) => commands::predict(a, &out),
        Command::Score(a) => commands::score(a, &out),
        Command::Evaluate(a) => commands::evaluate(a, &out),
    }
}

/// Parse `argv` and run; failures print one `error: <kind>: <message>` line.
pub fn run<I, S>(argv: I) -> ExitCode
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments").trim_start_matches("error: ");
            eprintln!("{}", CliError::Usage(first.to_string()).report());
            return ExitCode::from(2);
        }
    };
    match dispatch(&cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.report());
            ExitCode::from(e.exit_code())
        }
    }
}
