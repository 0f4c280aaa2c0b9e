//! Command-line front end: reads markets, operators and scenarios from JSON,
//! runs the pricing routines and the studies, and writes CSV or JSON.
//!
//! Exit codes: 0 on success, 1 for invalid input, 2 when a solver fails. A
//! failed solve still writes its residual report next to `--out`.

pub mod args;
pub mod commands;
pub mod config;
pub mod output;
pub mod studies;

use std::ffi::OsString;
use std::io::Write;

use clap::Parser;
use serde_json::{json, Value};

use crate::args::Cli;
use crate::output::{pretty, sidecar_path, write_file, Format, Table};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    /// Invalid input with a structured report, emitted like a result.
    #[error("{message}")]
    Invalid { message: String, report: Value },
    #[error("{message}")]
    Solver { message: String, report: Value },
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Validation(_) | CliError::Invalid { .. } | CliError::Io(_) => 1,
            CliError::Solver { .. } => 2,
        }
    }
}

impl From<entropic::Error> for CliError {
    fn from(e: entropic::Error) -> Self {
        if e.is_validation() {
            return CliError::Validation(e.to_string());
        }
        let mut report = json!({ "error": e.to_string() });
        if let entropic::Error::NonConvergence { iterations, residual } = e {
            report["iterations"] = json!(iterations);
            report["residual"] = output::number(residual);
        }
        CliError::Solver { message: e.to_string(), report }
    }
}

/// Result of a command: a primary table (with a JSON sidecar) or a JSON
/// document.
#[derive(Debug, Clone)]
pub enum Outcome {
    Table { table: Table, meta: Value },
    Json(Value),
}

fn emit(outcome: &Outcome, out: Option<&std::path::Path>, format: Format, stdout: &mut dyn Write) -> Result<(), CliError> {
    let io = |e: std::io::Error| CliError::Io(e.to_string());
    match (outcome, out) {
        (Outcome::Table { table, meta }, Some(path)) => {
            let body = match format {
                Format::Csv => table.to_csv(),
                Format::Json => pretty(&table.to_json()),
            };
            write_file(path, &body)?;
            write_file(&sidecar_path(path), &pretty(meta))
        }
        (Outcome::Table { table, meta }, None) => {
            let body = match format {
                Format::Csv => table.to_csv(),
                Format::Json => pretty(&json!({ "table": table.to_json(), "meta": meta })),
            };
            stdout.write_all(body.as_bytes()).map_err(io)
        }
        (Outcome::Json(v), Some(path)) => write_file(path, &pretty(v)),
        (Outcome::Json(v), None) => stdout.write_all(pretty(v).as_bytes()).map_err(io),
    }
}

/// Runs the command line with explicit output streams and returns the exit
/// code.
pub fn run_with<I, T>(argv: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let text = e.render().to_string();
            let _ = if code == 0 { stdout.write_all(text.as_bytes()) } else { stderr.write_all(text.as_bytes()) };
            return code;
        }
    };
    let out = commands::default_out(&cli);
    let result = commands::execute(&cli).and_then(|o| emit(&o, out.as_deref(), cli.common.format, stdout));
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if let CliError::Invalid { report, .. } = &e {
                if let Err(w) = emit(&Outcome::Json(report.clone()), out.as_deref(), cli.common.format, stdout) {
                    let _ = writeln!(stderr, "error: {w}");
                }
            }
            if let (CliError::Solver { report, .. }, Some(path)) = (&e, out.as_deref()) {
                if let Err(w) = write_file(&sidecar_path(path), &pretty(report)) {
                    let _ = writeln!(stderr, "error: {w}");
                }
            }
            e.exit_code()
        }
    }
}

pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let (mut out, mut err) = (std::io::stdout().lock(), std::io::stderr().lock());
    let code = run_with(argv, &mut out, &mut err);
    let _ = out.flush();
    code
}
