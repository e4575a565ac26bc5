//! Command-line front end: dataset generation, racing lines, training,
//! evaluation, ablations and the live cue server.

pub mod commands;
pub mod protocol;
pub mod server;

use std::ffi::OsString;
use std::path::Path;

use clap::{CommandFactory, Parser};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

pub use commands::{Cli, Command};

/// Process exit code for an error chain.
pub fn exit_code(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<drivecoach::Error>() {
            return match e {
                drivecoach::Error::Config(_) => 2,
                drivecoach::Error::Data(_) | drivecoach::Error::Io { .. } | drivecoach::Error::Json(_) => 3,
                drivecoach::Error::Numeric(_) => 4,
                drivecoach::Error::Contract(_) | drivecoach::Error::Generation(_) => 1,
            };
        }
    }
    1
}

/// Overlays command-line values on the JSON object in `config`. Keys are the
/// long flag names of `subcommand`; any other key is a config error.
pub fn merge_config<T: Serialize + DeserializeOwned>(
    cli: &T,
    config: Option<&Path>,
    subcommand: &str,
) -> drivecoach::Result<T> {
    let Some(path) = config else {
        return Ok(serde_json::from_value(serde_json::to_value(cli)?)?);
    };
    let text = std::fs::read_to_string(path).map_err(|e| drivecoach::Error::io(path, e))?;
    let file: Value = serde_json::from_str(&text)
        .map_err(|e| drivecoach::Error::config(format!("{}: {e}", path.display())))?;
    let Value::Object(mut merged) = file else {
        return Err(drivecoach::Error::config(format!("{}: expected a JSON object", path.display())));
    };
    let cmd = Cli::command();
    let sub = cmd
        .find_subcommand(subcommand)
        .ok_or_else(|| drivecoach::Error::contract(format!("no subcommand {subcommand}")))?;
    let known: Vec<&str> = sub.get_arguments().filter_map(|a| a.get_long()).collect();
    if let Some(bad) = merged.keys().find(|k| !known.contains(&k.as_str()) || k.as_str() == "config") {
        return Err(drivecoach::Error::config(format!(
            "{}: unknown key {bad:?} for {subcommand}",
            path.display()
        )));
    }
    if let Value::Object(flags) = serde_json::to_value(cli)? {
        for (k, v) in flags {
            if !v.is_null() {
                merged.insert(k, v);
            }
        }
    }
    serde_json::from_value(Value::Object(merged))
        .map_err(|e| drivecoach::Error::config(format!("{}: {e}", path.display())))
}

/// Parses `argv`, runs the subcommand and returns the exit code.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
        }
    };
    match commands::dispatch(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e:#}");
            exit_code(&e)
        }
    }
}
