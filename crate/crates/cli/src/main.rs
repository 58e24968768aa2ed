//! Command-line driver for the shapeuq pipelines.
//!
//! Exit status: 0 when every embedded check passes, 1 on a failed check,
//! 2 on a configuration error and 3 on a numerical or I/O failure. Failures
//! also leave `error.json` in the output directory.

mod artifacts;
mod commands;
mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::Parser;
use serde::Serialize;

use artifacts::Artifacts;
use commands::Command;
use config::{ConfigError, RunConfig, OUTPUT_DIR_ENV};

#[derive(Debug, Parser)]
#[command(name = "shapeuq", version, about = "Shape sensitivity and random-domain moments for the heat equation")]
struct Cli {
    /// Pipeline to run.
    #[arg(value_enum)]
    command: Option<Command>,

    /// TOML run configuration; defaults reproduce the disk benchmark.
    #[arg(short, long)]
    config: Option<PathBuf>,

    /// Override a config key, e.g. `--set time.steps=32`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,

    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    /// More log output (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Debug, Serialize)]
struct ErrorRecord<'a> {
    kind: &'a str,
    exit_code: u8,
    command: &'a str,
    message: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    path: Option<String>,
    causes: Vec<String>,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    failed_checks: Vec<String>,
}

fn write_error(dir: &Path, record: &ErrorRecord<'_>) {
    let json = serde_json::to_string_pretty(record).unwrap_or_default();
    eprintln!("{json}");
    if std::fs::create_dir_all(dir).is_ok() {
        let _ = std::fs::write(dir.join("error.json"), json);
    }
}

fn failure(err: &anyhow::Error, command: &str, dir: &Path) -> ExitCode {
    let config = err.downcast_ref::<ConfigError>();
    let (kind, code) = if config.is_some() { ("config", 2) } else { ("numerical", 3) };
    let record = ErrorRecord {
        kind,
        exit_code: code,
        command,
        message: err.to_string(),
        path: config.map(|c| c.path.clone()).filter(|p| !p.is_empty()),
        causes: err.chain().skip(1).map(|c| c.to_string()).collect(),
        failed_checks: Vec::new(),
    };
    write_error(dir, &record);
    ExitCode::from(code)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    let fallback_dir = std::env::var_os(OUTPUT_DIR_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| RunConfig::default().run.output_dir);
    let command_name = cli.command.map_or("none", Command::name);
    let cfg = match RunConfig::load(cli.config.as_deref(), &cli.overrides) {
        Ok(c) => c,
        Err(e) => return failure(&e.into(), command_name, &fallback_dir),
    };
    if cli.print_defaults {
        print!("{}", toml::to_string(&RunConfig::default()).expect("defaults serialise"));
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        let err = anyhow::Error::new(ConfigError::new("", "no command given; see --help"));
        return failure(&err, command_name, &fallback_dir);
    };
    if cfg.run.threads > 0 {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(cfg.run.threads).build_global() {
            log::warn!("could not size the worker pool: {e}");
        }
    }
    let dir = cfg.output_dir();
    let mut out = match Artifacts::create(&dir) {
        Ok(o) => o,
        Err(e) => return failure(&e, command_name, &dir),
    };
    let _ = std::fs::remove_file(dir.join("error.json"));
    let outcome = match commands::run(command, &cfg, &mut out) {
        Ok(o) => o,
        Err(e) => return failure(&e, command_name, &dir),
    };
    let passed = outcome.report.passed();
    if let Err(e) = out.finish(command_name, passed, &outcome.seeds, &cfg) {
        return failure(&e, command_name, &dir);
    }
    let mut summary = Vec::new();
    let _ = outcome.report.write_text(&mut summary);
    print!("{}", String::from_utf8_lossy(&summary));
    if passed {
        return ExitCode::SUCCESS;
    }
    let failed: Vec<String> = outcome
        .report
        .studies
        .iter()
        .filter(|s| !s.passed())
        .map(|s| s.name.clone())
        .chain(outcome.report.checks.iter().filter(|c| !c.passed).map(|c| c.name.clone()))
        .collect();
    write_error(
        out.dir(),
        &ErrorRecord {
            kind: "check",
            exit_code: 1,
            command: command_name,
            message: format!("{} check(s) failed", failed.len()),
            path: None,
            causes: Vec::new(),
            failed_checks: failed,
        },
    );
    ExitCode::from(1)
}
