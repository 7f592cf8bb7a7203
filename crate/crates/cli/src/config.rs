//! Flat `key = value` run configuration.
//!
//! Keys are the long flag names of a command (`out-dir`, `batch-pairs`, ...);
//! underscores are accepted and normalized to dashes. Values from a config
//! file are overridden by flags given on the command line. Every run writes
//! the resolved settings to `resolved_config.txt` in its output directory, in
//! the same format, so the file alone reproduces the run.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::CliError;

pub const RESOLVED_CONFIG: &str = "resolved_config.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Bool,
    Int,
    Float,
    FloatList,
    Text,
    Path,
}

impl Kind {
    fn check(self, key: &str, value: &str) -> Result<(), CliError> {
        let ok = match self {
            Kind::Bool => matches!(value, "true" | "false"),
            Kind::Int => value.parse::<u64>().is_ok(),
            Kind::Float => value.parse::<f64>().is_ok(),
            Kind::FloatList => value.split(',').all(|v| v.trim().parse::<f64>().is_ok()),
            Kind::Text | Kind::Path => true,
        };
        if ok {
            Ok(())
        } else {
            Err(CliError::Usage(format!(
                "invalid value {value:?} for {key} (expected {self})"
            )))
        }
    }
}

impl Kind {
    pub fn metavar(self) -> &'static str {
        match self {
            Kind::Bool => "BOOL",
            Kind::Int => "INT",
            Kind::Float => "NUM",
            Kind::FloatList => "NUM,...",
            Kind::Text => "TEXT",
            Kind::Path => "PATH",
        }
    }
}

impl fmt::Display for Kind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Kind::Bool => "true or false",
            Kind::Int => "a non-negative integer",
            Kind::Float => "a number",
            Kind::FloatList => "comma-separated numbers",
            Kind::Text => "text",
            Kind::Path => "a path",
        })
    }
}

/// One setting a command accepts, as both a flag and a config key.
#[derive(Clone, Debug)]
pub struct Opt {
    pub key: &'static str,
    pub kind: Kind,
    pub default: Option<String>,
    pub required: bool,
    pub help: &'static str,
}

impl Opt {
    pub fn new(key: &'static str, kind: Kind, help: &'static str) -> Self {
        Self {
            key,
            kind,
            default: None,
            required: false,
            help,
        }
    }

    pub fn default(mut self, value: impl ToString) -> Self {
        self.default = Some(value.to_string());
        self
    }

    pub fn required(mut self) -> Self {
        self.required = true;
        self
    }
}

pub fn normalize_key(key: &str) -> String {
    key.trim().replace('_', "-")
}

/// Parse a config file body. Blank lines and `#` comments are skipped.
pub fn parse_file(text: &str, path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("{}:{}: expected `key = value`", path.display(), i + 1)))?;
        let key = normalize_key(k);
        if key.is_empty() {
            return Err(CliError::Usage(format!("{}:{}: empty key", path.display(), i + 1)));
        }
        if out.insert(key.clone(), v.trim().to_string()).is_some() {
            return Err(CliError::Usage(format!(
                "{}:{}: duplicate key {key}",
                path.display(),
                i + 1
            )));
        }
    }
    Ok(out)
}

/// Resolved settings for one command invocation.
#[derive(Clone, Debug)]
pub struct Settings {
    pub command: String,
    values: BTreeMap<String, String>,
}

impl Settings {
    /// Layer defaults, then `file`, then `flags`; reject keys the command does
    /// not know and report the first missing required key by flag name.
    pub fn resolve(
        command: &str,
        opts: &[Opt],
        file: BTreeMap<String, String>,
        flags: BTreeMap<String, String>,
    ) -> Result<Self, CliError> {
        let known: BTreeMap<&str, &Opt> = opts.iter().map(|o| (o.key, o)).collect();
        let mut values = BTreeMap::new();
        for o in opts {
            if let Some(d) = &o.default {
                values.insert(o.key.to_string(), d.clone());
            }
        }
        for (k, v) in file.into_iter().chain(flags) {
            let opt = known
                .get(k.as_str())
                .ok_or_else(|| CliError::Usage(format!("unknown key {k:?} for command {command}")))?;
            opt.kind.check(&k, &v)?;
            values.insert(k, v);
        }
        for o in opts {
            if o.required && !values.contains_key(o.key) {
                return Err(CliError::Usage(format!("missing required flag --{}", o.key)));
            }
        }
        Ok(Self {
            command: command.to_string(),
            values,
        })
    }

    pub fn raw(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn str(&self, key: &str) -> Result<&str, CliError> {
        self.raw(key)
            .ok_or_else(|| CliError::Usage(format!("missing required flag --{key}")))
    }

    pub fn path(&self, key: &str) -> Result<PathBuf, CliError> {
        self.str(key).map(PathBuf::from)
    }

    pub fn opt_path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).filter(|s| !s.is_empty()).map(PathBuf::from)
    }

    pub fn parse<T: FromStr>(&self, key: &str) -> Result<T, CliError>
    where
        T::Err: fmt::Display,
    {
        let raw = self.str(key)?;
        raw.parse()
            .map_err(|e| CliError::Usage(format!("invalid value {raw:?} for --{key}: {e}")))
    }

    pub fn flag(&self, key: &str) -> Result<bool, CliError> {
        self.parse(key)
    }

    /// Comma-separated numbers; an empty value is an empty list.
    pub fn floats(&self, key: &str) -> Result<Vec<f64>, CliError> {
        match self.raw(key) {
            None | Some("") => Ok(Vec::new()),
            Some(s) => s
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse()
                        .map_err(|_| CliError::Usage(format!("invalid number {v:?} in --{key}")))
                })
                .collect(),
        }
    }

    /// The settings in config-file syntax, keys sorted, `config` omitted.
    pub fn to_file_string(&self) -> String {
        let mut out = format!("# echoclr {}\n", self.command);
        for (k, v) in &self.values {
            if k != "config" {
                out.push_str(&format!("{k} = {v}\n"));
            }
        }
        out
    }
}
