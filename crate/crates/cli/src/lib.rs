//! `latent-atlas` command-line pipeline: one subcommand per toolkit
//! operation, a JSON summary on stdout, and fixed exit codes.

pub mod commands;
pub mod config;
pub mod pipeline;

use std::ffi::OsString;
use std::fmt;
use std::io::Write;
use std::path::Path;

use clap::Parser;

pub use commands::Cli;

/// Exit code for success.
pub const EXIT_OK: i32 = 0;
/// Bad flags, bad config, or a missing input named on the command line.
pub const EXIT_USAGE: i32 = 1;
/// I/O, format or data errors while running.
pub const EXIT_RUNTIME: i32 = 2;
/// Training diverged or collapsed.
pub const EXIT_DIVERGENCE: i32 = 3;

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
    Divergence(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => EXIT_USAGE,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::Divergence(_) => EXIT_DIVERGENCE,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(m) => write!(f, "error: {m}"),
            CliError::Divergence(m) => write!(f, "training failed: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<latent_atlas::Error> for CliError {
    fn from(e: latent_atlas::Error) -> Self {
        match e {
            latent_atlas::Error::Divergence { .. } | latent_atlas::Error::ModeCollapse { .. } => {
                CliError::Divergence(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

/// Prefixes a toolkit error with the file it concerns.
pub fn at<T>(r: latent_atlas::Result<T>, path: &Path) -> Result<T, CliError> {
    r.map_err(|e| match CliError::from(e) {
        CliError::Runtime(m) => CliError::Runtime(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Thread count from the flag, else `LATENT_ATLAS_THREADS`, else rayon's default.
pub fn thread_count(flag: Option<usize>) -> Result<Option<usize>, CliError> {
    if flag.is_some() {
        return Ok(flag);
    }
    match std::env::var("LATENT_ATLAS_THREADS") {
        Ok(v) if !v.trim().is_empty() => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|n| *n > 0)
            .map(Some)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "LATENT_ATLAS_THREADS must be a positive integer, got {v:?}"
                ))
            }),
        _ => Ok(None),
    }
}

/// Parses `args` (program name first), runs the subcommand and returns the
/// exit code. Help and version requests exit 0.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(cli) {
        Ok(summary) => {
            // A closed stdout is not worth a panic once the work is done.
            let body = serde_json::to_string_pretty(&summary).expect("summary serializes");
            let _ = writeln!(std::io::stdout().lock(), "{body}");
            EXIT_OK
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn execute(cli: Cli) -> Result<serde_json::Value, CliError> {
    if let Some(n) = thread_count(cli.threads)? {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| CliError::Runtime(e.to_string()))?;
        return pool.install(|| commands::dispatch(cli.command));
    }
    commands::dispatch(cli.command)
}
