//! `key = value` run configuration with command-line overrides.
//!
//! Values resolve as flag, then config file, then default. Every value read
//! through [`Settings`] lands in the effective configuration that reports
//! echo back.

use std::collections::BTreeMap;
use std::fmt::Display;
use std::path::Path;
use std::str::FromStr;

use crate::error::{Result, ZdpError};

pub const SEED_ENV: &str = "ZDP_SEED";

#[derive(Debug, Clone, Default)]
pub struct Settings {
    file: BTreeMap<String, String>,
    flags: BTreeMap<String, String>,
    effective: BTreeMap<String, String>,
}

/// Parses `key = value` lines; `#` starts a comment, blank lines are
/// skipped, keys use `-` or `_` interchangeably.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            ZdpError::Format(format!("config line {}: expected key = value", i + 1))
        })?;
        let key = normalize_key(key.trim());
        if key.is_empty() {
            return Err(ZdpError::Format(format!(
                "config line {}: empty key",
                i + 1
            )));
        }
        out.insert(key, value.trim().to_string());
    }
    Ok(out)
}

fn normalize_key(key: &str) -> String {
    key.replace('_', "-")
}

impl Settings {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let file = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| ZdpError::Format(format!("{}: {e}", p.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        Ok(Self {
            file,
            ..Self::default()
        })
    }

    pub fn from_map(file: BTreeMap<String, String>) -> Self {
        Self {
            file,
            ..Self::default()
        }
    }

    /// Records a command-line value, which wins over the config file.
    pub fn flag<T: Display>(&mut self, key: &str, value: Option<T>) -> &mut Self {
        if let Some(v) = value {
            self.flags.insert(normalize_key(key), v.to_string());
        }
        self
    }

    fn lookup(&self, key: &str) -> Option<&String> {
        self.flags.get(key).or_else(|| self.file.get(key))
    }

    pub fn get_str(&mut self, key: &str, default: Option<&str>) -> Result<String> {
        let value = self
            .lookup(key)
            .cloned()
            .or_else(|| default.map(str::to_string))
            .ok_or_else(|| {
                ZdpError::InvalidArgument(format!("missing required setting `{key}`"))
            })?;
        self.effective.insert(key.to_string(), value.clone());
        Ok(value)
    }

    pub fn get_opt_str(&mut self, key: &str) -> Option<String> {
        let value = self.lookup(key).cloned()?;
        self.effective.insert(key.to_string(), value.clone());
        Some(value)
    }

    pub fn get<T: FromStr + Display>(&mut self, key: &str, default: Option<T>) -> Result<T> {
        match self.lookup(key).cloned() {
            Some(raw) => {
                let v = raw.parse::<T>().map_err(|_| {
                    ZdpError::InvalidArgument(format!("setting `{key}`: cannot parse {raw:?}"))
                })?;
                self.effective.insert(key.to_string(), raw);
                Ok(v)
            }
            None => {
                let v = default.ok_or_else(|| {
                    ZdpError::InvalidArgument(format!("missing required setting `{key}`"))
                })?;
                self.effective.insert(key.to_string(), v.to_string());
                Ok(v)
            }
        }
    }

    pub fn get_bool(&mut self, key: &str, default: bool) -> Result<bool> {
        let raw = self.get_str(key, Some(if default { "true" } else { "false" }))?;
        match raw.as_str() {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            _ => Err(ZdpError::InvalidArgument(format!(
                "setting `{key}`: expected true/false, got {raw:?}"
            ))),
        }
    }

    /// Comma-separated list of numbers.
    pub fn get_list(&mut self, key: &str, default: &[f64]) -> Result<Vec<f64>> {
        match self.lookup(key).cloned() {
            Some(raw) => {
                let vals = raw
                    .split(',')
                    .map(|s| s.trim().parse::<f64>())
                    .collect::<std::result::Result<Vec<_>, _>>()
                    .map_err(|_| {
                        ZdpError::InvalidArgument(format!(
                            "setting `{key}`: cannot parse list {raw:?}"
                        ))
                    })?;
                self.effective.insert(key.to_string(), raw);
                Ok(vals)
            }
            None => {
                let joined = default
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                self.effective.insert(key.to_string(), joined);
                Ok(default.to_vec())
            }
        }
    }

    /// Seed from the flag or config file, then `ZDP_SEED`, then 0.
    pub fn seed(&mut self) -> Result<u64> {
        if self.lookup("seed").is_none() {
            if let Ok(env) = std::env::var(SEED_ENV) {
                self.file.insert("seed".into(), env);
            }
        }
        self.get("seed", Some(0u64))
    }

    pub fn effective(&self) -> &BTreeMap<String, String> {
        &self.effective
    }
}
