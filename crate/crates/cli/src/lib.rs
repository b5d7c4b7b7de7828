//! Command-line driver: `surgidepth <command> [flags]`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error
//! (missing or malformed inputs), 3 numerical error (non-finite loss or
//! gradient, degenerate predictions).

mod commands;
pub mod config;
pub mod render;
pub mod report;

use std::ffi::OsString;

use clap::Parser;
use surgidepth::metrics::MetricError;
use surgidepth::semisup::SemisupError;
use surgidepth::train::TrainError;

pub use config::{Cli, Command, RESOLVED_CONFIG_FILE, SEED_ENV};
pub use render::{colormap, render_colormap, RenderError};
pub use report::{emit_report, ReportDocument, ReportError, ReportRecord};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{stage}: {message}")]
    Data { stage: &'static str, message: String },
    #[error("{stage}: {message}")]
    Numeric { stage: &'static str, message: String },
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        CliError::Usage(message.into())
    }

    pub fn data(stage: &'static str, message: impl ToString) -> Self {
        CliError::Data { stage, message: message.to_string() }
    }

    pub fn numeric(stage: &'static str, message: impl ToString) -> Self {
        CliError::Numeric { stage, message: message.to_string() }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Data { .. } => EXIT_DATA,
            CliError::Numeric { .. } => EXIT_NUMERIC,
        }
    }

    pub(crate) fn train(stage: &'static str, err: TrainError) -> Self {
        fn numeric(e: &TrainError) -> bool {
            match e {
                TrainError::NonFiniteGradient | TrainError::NonFiniteLoss => true,
                TrainError::Step { source, .. } => numeric(source),
                _ => false,
            }
        }
        match err {
            TrainError::InvalidConfig(m) => CliError::Usage(m),
            e if numeric(&e) => CliError::numeric(stage, e),
            e => CliError::data(stage, e),
        }
    }

    pub(crate) fn semisup(stage: &'static str, err: SemisupError) -> Self {
        match err {
            SemisupError::Train(e) => CliError::train(stage, e),
            SemisupError::InvalidSpec(m) => CliError::Usage(m),
            e => CliError::data(stage, e),
        }
    }

    pub(crate) fn metric(stage: &'static str, err: MetricError) -> Self {
        fn numeric(e: &MetricError) -> bool {
            match e {
                MetricError::NonPositiveMedian(_) => true,
                MetricError::Frame { source, .. } => numeric(source),
                _ => false,
            }
        }
        if numeric(&err) {
            CliError::numeric(stage, err)
        } else {
            CliError::data(stage, err)
        }
    }
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    let name = cli.command.name();
    match commands::dispatch(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("surgidepth {name}: {e}");
            e.exit_code()
        }
    }
}
