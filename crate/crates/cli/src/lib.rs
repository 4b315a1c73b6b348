//! The `crg` command line and HTTP service over the laboratory's core.

pub mod cli;
pub mod commands;
pub mod config;
pub mod ops;
pub mod server;
pub mod workspace;

use std::ffi::OsString;
use std::path::PathBuf;

use clap::error::ErrorKind;
use clap::Parser;

use crate::cli::Cli;
use crate::workspace::{sha256_hex, unix_time, ProvenanceRecord, Workspace};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const WORKSPACE_ENV: &str = "CRG_WORKSPACE";
pub const DEFAULT_WORKSPACE: &str = "crg-workspace";

fn parse(argv: &[OsString]) -> Result<Cli, i32> {
    Cli::try_parse_from(argv).map_err(|e| {
        let _ = e.print();
        match e.kind() {
            ErrorKind::DisplayHelp | ErrorKind::DisplayVersion | ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                EXIT_OK
            }
            _ => EXIT_USAGE,
        }
    })
}

/// Parse, apply `--config` (its keys override flags given on the command line), run,
/// and log provenance. Returns the process exit code.
pub fn run<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString>,
{
    let mut argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let mut cli = match parse(&argv) {
        Ok(c) => c,
        Err(code) => return code,
    };
    if let Some(path) = cli.config.clone() {
        match config::load_flat(&path) {
            Ok(entries) => argv.extend(config::to_flags(&entries)),
            Err(e) => {
                eprintln!("error: {e:#}");
                return EXIT_USAGE;
            }
        }
        cli = match parse(&argv) {
            Ok(c) => c,
            Err(code) => return code,
        };
    }

    let root = std::env::var_os(WORKSPACE_ENV)
        .map(PathBuf::from)
        .or_else(|| cli.workspace.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_WORKSPACE));
    let ws = match Workspace::open(&root) {
        Ok(ws) => ws,
        Err(e) => {
            eprintln!("error: {e:#}");
            return EXIT_RUNTIME;
        }
    };
    let config_digest = serde_json::to_string(&cli.command).map(|s| sha256_hex(s.as_bytes())).unwrap_or_default();
    let started = unix_time();
    let outcome = commands::execute(&cli.command, &ws, cli.seed.unwrap_or(0));
    let (exit_code, artifacts, error) = match outcome {
        Ok(a) => (EXIT_OK, a, None),
        Err(e) => {
            eprintln!("error: {e:#}");
            (EXIT_RUNTIME, Vec::new(), Some(format!("{e:#}")))
        }
    };
    let record = ProvenanceRecord {
        unix_time: started,
        command: cli.command.name().to_string(),
        argv: argv.iter().map(|a| a.to_string_lossy().into_owned()).collect(),
        config_digest,
        artifacts,
        exit_code,
        error,
    };
    if let Err(e) = ws.append_provenance(&record) {
        eprintln!("warning: could not append provenance: {e:#}");
    }
    exit_code
}
