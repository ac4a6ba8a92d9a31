//! Command-line front end. [`run`] parses arguments, sizes the worker pool,
//! dispatches to a subcommand and maps the outcome to an exit code:
//! 0 on success, 2 for usage errors, 1 for runtime errors.

mod args;
mod commands;
mod report;

use std::ffi::OsString;
use std::fmt;

use clap::Parser;

pub use args::{Cli, Command, ReportFormat};
pub use report::{Report, REPORT_SCHEMA};

/// Exit code for usage errors.
pub const EXIT_USAGE: i32 = 2;
/// Exit code for runtime errors.
pub const EXIT_RUNTIME: i32 = 1;

/// Bad arguments detected after parsing: missing inputs, out-of-range frame
/// indices and the like.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn init_logging(level: args::LogLevel) {
    use args::LogLevel as L;
    let filter = match level {
        L::Off => log::LevelFilter::Off,
        L::Error => log::LevelFilter::Error,
        L::Warn => log::LevelFilter::Warn,
        L::Info => log::LevelFilter::Info,
        L::Debug => log::LevelFilter::Debug,
        L::Trace => log::LevelFilter::Trace,
    };
    let _ = env_logger::Builder::new()
        .filter_level(filter)
        .format_timestamp(None)
        .try_init();
}

#[cfg(feature = "parallel")]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> anyhow::Result<T> + Send) -> anyhow::Result<T> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(threads).build()?;
    pool.install(f)
}

#[cfg(not(feature = "parallel"))]
fn with_threads<T: Send>(threads: usize, f: impl FnOnce() -> anyhow::Result<T> + Send) -> anyhow::Result<T> {
    if threads > 1 {
        log::warn!("built without the `parallel` feature; --threads {threads} ignored");
    }
    f()
}

fn classify(err: &anyhow::Error) -> (i32, &'static str) {
    if err.downcast_ref::<UsageError>().is_some() {
        return (EXIT_USAGE, "UsageError");
    }
    match err.downcast_ref::<lidarsplat::Error>() {
        Some(e) => (EXIT_RUNTIME, e.kind()),
        None => (EXIT_RUNTIME, "Runtime"),
    }
}

/// Runs the CLI on `argv` (including the program name) and returns the
/// process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    init_logging(cli.global.log_level);
    let name = commands::name(&cli.command);
    let global = &cli.global;
    let outcome = with_threads(global.threads, || commands::dispatch(&cli.command, global));
    let (report, code) = match outcome {
        Ok(result) => (Report::success(name, result), 0),
        Err(err) => {
            let (code, kind) = classify(&err);
            (Report::failure(name, kind, &format!("{err:#}"), code), code)
        }
    };
    if let Some(path) = &global.report_file {
        if let Err(e) = report.write_json(path) {
            eprintln!("error: cannot write report to {}: {e}", path.display());
            return EXIT_RUNTIME;
        }
    }
    report.emit(global.report);
    code
}
