//! Command-line front end for `deepcut-core`.
//!
//! Data artifacts go to stdout (or `--out-dir`); logs, errors and, absent an
//! output directory, the run manifest go to stderr. Exit codes: 0 success,
//! 1 domain error, 2 usage error.

use std::ffi::OsString;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::time::Instant;

use clap::Parser;

pub mod args;
pub mod commands;
pub mod error;
pub mod manifest;

use args::{Cli, Request};
use commands::{Artifacts, Context};
pub use error::CliError;
use manifest::{ReplayReport, RunManifest};

fn write_file(path: &PathBuf, bytes: &[u8]) -> Result<(), CliError> {
    let io_err = |source| CliError::Io {
        path: path.display().to_string(),
        source,
    };
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(io_err)?;
    }
    std::fs::write(path, bytes).map_err(io_err)
}

fn persist(art: &Artifacts, stdout: &mut dyn Write) -> Result<(), CliError> {
    for (path, bytes) in &art.files {
        write_file(path, bytes)?;
    }
    let io_err = |source| CliError::Io {
        path: "<stdout>".into(),
        source,
    };
    stdout.write_all(&art.stdout).map_err(io_err)?;
    stdout.flush().map_err(io_err)
}

fn execute(cli: Cli, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> Result<i32, CliError> {
    let manifest_out = cli.manifest_out;
    match args::resolve(cli.command)? {
        Request::Run(invocation) => {
            let start = Instant::now();
            let mut ctx = Context::new(stdin);
            let art = commands::execute(&invocation, &mut ctx)?;
            persist(&art, stdout)?;
            let manifest = RunManifest {
                tool: "deepcut".into(),
                version: env!("CARGO_PKG_VERSION").into(),
                seed: invocation.seed(),
                outputs: art.digests(),
                inputs: ctx.inputs,
                wall_time_ms: start.elapsed().as_millis() as u64,
                invocation,
            };
            let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
            match manifest_out.or_else(|| manifest.invocation.out_dir().map(|d| d.join("manifest.json"))) {
                Some(path) => write_file(&path, text.as_bytes())?,
                None => writeln!(stderr, "{}", serde_json::to_string(&manifest).expect("manifest serializes"))
                    .map_err(|source| CliError::Io {
                        path: "<stderr>".into(),
                        source,
                    })?,
            }
            Ok(0)
        }
        Request::Replay(path) => {
            let name = path.display().to_string();
            let bytes = std::fs::read(&path).map_err(|source| CliError::Io {
                path: name.clone(),
                source,
            })?;
            let recorded: RunManifest =
                serde_json::from_slice(&bytes).map_err(|source| CliError::Json { path: name, source })?;
            let mut ctx = Context::new(stdin);
            let art = commands::execute(&recorded.invocation, &mut ctx)?;
            let report = ReplayReport::compare(&recorded, &ctx.inputs, &art.digests());
            let mut line = serde_json::to_vec(&report).expect("report serializes");
            line.push(b'\n');
            stdout.write_all(&line).map_err(|source| CliError::Io {
                path: "<stdout>".into(),
                source,
            })?;
            Ok(if report.ok { 0 } else { 1 })
        }
    }
}

/// Parses `argv` (including the program name) and runs the command.
pub fn run<I, T>(argv: I, stdin: &mut dyn Read, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                stderr.write_all(text.as_bytes())
            } else {
                stdout.write_all(text.as_bytes())
            };
            return e.exit_code();
        }
    };
    match execute(cli, stdin, stdout, stderr) {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            e.exit_code()
        }
    }
}
