//! Flat `key=value` run configuration.
//!
//! Values come from command-line flags, then the `--config` file, then built-in defaults.
//! Every value a command reads is recorded so the effective configuration can be echoed
//! into output headers.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use triphash::data::Provenance;

use crate::CliError;

#[derive(Debug, Default)]
pub struct RunConfig {
    file: BTreeMap<String, String>,
    effective: Vec<(String, String)>,
}

fn parse_file(text: &str) -> Result<BTreeMap<String, String>, CliError> {
    let mut map = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| CliError::Validation(format!("config line {}: expected key=value", n + 1)))?;
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let file = match path {
            Some(p) => parse_file(&fs::read_to_string(p).map_err(|e| {
                CliError::Validation(format!("cannot read config {}: {e}", p.display()))
            })?)?,
            None => BTreeMap::new(),
        };
        Ok(RunConfig {
            file,
            effective: Vec::new(),
        })
    }

    #[cfg(test)]
    fn from_text(text: &str) -> Result<Self, CliError> {
        Ok(RunConfig {
            file: parse_file(text)?,
            effective: Vec::new(),
        })
    }

    fn lookup<T: FromStr>(&self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        if flag.is_some() {
            return Ok(flag);
        }
        self.file
            .get(key)
            .map(|raw| {
                raw.parse()
                    .map_err(|e| CliError::Validation(format!("config value {key}={raw}: {e}")))
            })
            .transpose()
    }

    fn record(&mut self, key: &str, value: String) {
        self.effective.push((key.to_string(), value));
    }

    pub fn value<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>, default: T) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?.unwrap_or(default);
        self.record(key, v.to_string());
        Ok(v)
    }

    pub fn optional<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<Option<T>, CliError>
    where
        T::Err: Display,
    {
        let v = self.lookup(key, flag)?;
        if let Some(v) = &v {
            self.record(key, v.to_string());
        }
        Ok(v)
    }

    pub fn required<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> Result<T, CliError>
    where
        T::Err: Display,
    {
        self.optional(key, flag)?
            .ok_or_else(|| CliError::Validation(format!("missing required setting `{key}`")))
    }

    pub fn path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<PathBuf, CliError> {
        let raw = self.required(key, flag.map(|p| p.display().to_string()))?;
        Ok(PathBuf::from(raw))
    }

    pub fn optional_path(&mut self, key: &str, flag: Option<PathBuf>) -> Result<Option<PathBuf>, CliError> {
        Ok(self
            .optional(key, flag.map(|p| p.display().to_string()))?
            .map(PathBuf::from))
    }

    pub fn provenance(&self, command: &str) -> Provenance {
        let mut p = Provenance::new()
            .with("tool", concat!("triphash ", env!("CARGO_PKG_VERSION")))
            .with("command", command);
        p.0.extend(self.effective.iter().cloned());
        p
    }
}
