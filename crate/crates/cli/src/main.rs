//! `echoclr` command-line front end.
//!
//! Exit codes: 0 on success, 1 on a runtime failure (one JSON line on stderr),
//! 2 on a usage error.

mod commands;
mod config;
mod plot;

use std::collections::BTreeMap;
use std::path::Path;
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{Arg, ArgAction, ArgMatches, Command};

use config::{Kind, Opt, Settings};

#[derive(Debug)]
pub enum CliError {
    /// Bad invocation or configuration; exit 2.
    Usage(String),
    /// The pipeline failed; exit 1.
    Run(echoclr::Error),
}

impl From<echoclr::Error> for CliError {
    fn from(e: echoclr::Error) -> Self {
        CliError::Run(e)
    }
}

/// Variant name of a core error, used as the machine-readable `kind`.
fn error_kind(e: &echoclr::Error) -> String {
    let debug = format!("{e:?}");
    debug
        .split(|c: char| !c.is_ascii_alphanumeric())
        .next()
        .unwrap_or("Error")
        .to_string()
}

pub const COMMANDS: [&str; 8] = [
    "synth-gen",
    "preprocess",
    "pretrain",
    "finetune",
    "titrate",
    "evaluate",
    "explain",
    "plot",
];

fn global_opts() -> Vec<Opt> {
    vec![
        Opt::new("seed", Kind::Int, "Seed for every random stream").default(0),
        Opt::new("out-dir", Kind::Path, "Directory receiving all outputs").required(),
        Opt::new("config", Kind::Path, "Flat `key = value` config file; flags win"),
        Opt::new("log-level", Kind::Text, "info (progress on stderr) or quiet").default("info"),
    ]
}

fn build_cli() -> Command {
    let mut cli = Command::new("echoclr")
        .about("Contrastive pretraining, fine-tuning and evaluation for echo-like videos")
        .subcommand_required(true)
        .arg_required_else_help(true);
    for name in COMMANDS {
        let mut sub = Command::new(name).about(commands::about(name));
        for o in global_opts().into_iter().chain(commands::options(name)) {
            let mut help = o.help.to_string();
            if let Some(d) = &o.default {
                help.push_str(&format!(" [default: {d}]"));
            }
            if o.required {
                help.push_str(" [required]");
            }
            sub = sub.arg(
                Arg::new(o.key)
                    .long(o.key)
                    .value_name(o.kind.metavar())
                    .action(ArgAction::Set)
                    .help(help),
            );
        }
        cli = cli.subcommand(sub);
    }
    cli
}

fn settings_for(name: &str, m: &ArgMatches) -> Result<Settings, CliError> {
    let opts: Vec<Opt> = global_opts().into_iter().chain(commands::options(name)).collect();
    let mut flags = BTreeMap::new();
    for o in &opts {
        if m.value_source(o.key) == Some(ValueSource::CommandLine) {
            if let Some(v) = m.get_one::<String>(o.key) {
                flags.insert(o.key.to_string(), v.clone());
            }
        }
    }
    let file = match flags.get("config") {
        Some(p) => {
            let path = Path::new(p);
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            config::parse_file(&text, path)?
        }
        None => BTreeMap::new(),
    };
    Settings::resolve(name, &opts, file, flags)
}

fn run() -> Result<(), CliError> {
    let matches = build_cli().try_get_matches().map_err(|e| {
        use clap::error::ErrorKind;
        if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
            e.exit();
        }
        CliError::Usage(e.render().to_string())
    })?;
    let (name, sub) = matches
        .subcommand()
        .ok_or_else(|| CliError::Usage(build_cli().render_usage().to_string()))?;
    let settings = settings_for(name, sub)?;
    commands::dispatch(&settings)
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            let msg = msg.trim_end();
            if msg.contains('\n') {
                eprintln!("{msg}");
            } else {
                eprintln!("error: {msg}\n\n{}", build_cli().render_usage());
            }
            ExitCode::from(2)
        }
        Err(CliError::Run(e)) => {
            let line = serde_json::json!({"error": error_kind(&e), "message": e.to_string()});
            eprintln!("{line}");
            ExitCode::from(1)
        }
    }
}
