//! Flag / config-file resolution.
//!
//! A value is taken from the command line if given there, else from the
//! flat TOML config file (keys mirror the flag names; `-` and `_` are
//! interchangeable), else from the built-in default.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use anyhow::{anyhow, bail, Context, Result};
use clap::parser::ValueSource;
use clap::ArgMatches;

#[derive(Debug, Clone, Default)]
pub struct Settings {
    flags: BTreeMap<String, String>,
    file: BTreeMap<String, String>,
}

fn normalize(key: &str) -> String {
    key.replace('-', "_")
}

fn toml_to_string(v: &toml::Value) -> Result<String> {
    Ok(match v {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items.iter().map(toml_to_string).collect::<Result<Vec<_>>>()?.join(","),
        other => bail!("config values must be scalars or arrays, got {other}"),
    })
}

impl Settings {
    /// Collects the flags given on the command line and, when `--config`
    /// is among them, the config file.
    /// `known` lists every flag id; config files may set any of them.
    pub fn from_matches(matches: &ArgMatches, known: &[String]) -> Result<Self> {
        let mut flags = BTreeMap::new();
        for id in matches.ids().map(|id| id.as_str()) {
            if matches.value_source(id) != Some(ValueSource::CommandLine) {
                continue;
            }
            if let Some(mut raw) = matches.get_raw(id) {
                let values: Vec<String> = raw.by_ref().map(|v| v.to_string_lossy().into_owned()).collect();
                flags.insert(normalize(id), values.join(","));
            }
        }
        let mut settings = Settings {
            flags,
            file: BTreeMap::new(),
        };
        if let Some(path) = settings.flags.get("config").cloned() {
            settings.file = read_config(Path::new(&path), known)?;
        }
        Ok(settings)
    }

    #[cfg(test)]
    pub fn from_parts(flags: &[(&str, &str)], file: &[(&str, &str)]) -> Self {
        let conv = |v: &[(&str, &str)]| v.iter().map(|(k, v)| (normalize(k), v.to_string())).collect();
        Settings {
            flags: conv(flags),
            file: conv(file),
        }
    }

    fn raw(&self, key: &str) -> Option<&String> {
        let key = normalize(key);
        self.flags.get(&key).or_else(|| self.file.get(&key))
    }

    pub fn get<T: FromStr>(&self, key: &str) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        self.raw(key)
            .map(|v| v.parse::<T>().map_err(|e| anyhow!("invalid value `{v}` for `{key}`: {e}")))
            .transpose()
    }

    pub fn get_or<T: FromStr>(&self, key: &str, default: T) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.get(key)?.unwrap_or(default))
    }

    pub fn path(&self, key: &str) -> Option<PathBuf> {
        self.raw(key).map(PathBuf::from)
    }

    pub fn require_path(&self, key: &str) -> Result<PathBuf> {
        self.path(key)
            .ok_or_else(|| anyhow!("missing required setting `--{}`", key.replace('_', "-")))
    }

    pub fn list(&self, key: &str) -> Option<Vec<String>> {
        self.raw(key).map(|v| {
            v.split(',')
                .map(str::trim)
                .filter(|s| !s.is_empty())
                .map(String::from)
                .collect()
        })
    }

    /// On/off switch.
    pub fn switch(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key).map(|s| s.as_str()) {
            None => Ok(default),
            Some("on" | "true" | "yes") => Ok(true),
            Some("off" | "false" | "no") => Ok(false),
            Some(other) => bail!("`{key}` must be on or off, got `{other}`"),
        }
    }

    /// Resolved settings (flags over file), for provenance.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mut out = self.file.clone();
        out.extend(self.flags.clone());
        out.remove("config");
        out
    }
}

fn read_config(path: &Path, known: &[String]) -> Result<BTreeMap<String, String>> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
    let table: toml::Table = text.parse().with_context(|| format!("parsing config {}", path.display()))?;
    let mut out = BTreeMap::new();
    for (k, v) in table {
        let key = normalize(&k);
        if !known.iter().any(|id| normalize(id) == key) || key == "config" {
            bail!("unknown config key `{k}` in {}", path.display());
        }
        out.insert(key, toml_to_string(&v)?);
    }
    Ok(out)
}
