//! Flat `key = value` configuration files; command-line flags take precedence.

use std::collections::HashMap;
use std::path::Path;
use std::str::FromStr;

use crate::error::{CliError, CliResult};

#[derive(Debug, Default, Clone)]
pub struct Config {
    origin: String,
    entries: HashMap<String, (String, usize)>,
}

fn normalize(key: &str) -> String {
    key.trim().replace('_', "-").to_ascii_lowercase()
}

impl Config {
    pub fn parse(text: &str, origin: &str, allowed: &[&str]) -> CliResult<Self> {
        let mut entries = HashMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let err = |message: String| CliError::Line { path: origin.to_string(), line: i + 1, message };
            let (k, v) = line.split_once('=').ok_or_else(|| err(format!("expected key=value, got {line:?}")))?;
            let key = normalize(k);
            if !allowed.contains(&key.as_str()) {
                return Err(err(format!("unknown key {key:?}")));
            }
            if entries.insert(key.clone(), (v.trim().to_string(), i + 1)).is_some() {
                return Err(err(format!("duplicate key {key:?}")));
            }
        }
        Ok(Self { origin: origin.to_string(), entries })
    }

    pub fn load(path: Option<&Path>, allowed: &[&str]) -> CliResult<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| CliError::io(p, e))?;
                Self::parse(&text, &p.display().to_string(), allowed)
            }
        }
    }

    pub fn get<T: FromStr>(&self, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        match self.entries.get(key) {
            None => Ok(None),
            Some((v, line)) => v.parse().map(Some).map_err(|e| CliError::Line {
                path: self.origin.clone(),
                line: *line,
                message: format!("{key}: invalid value {v:?}: {e}"),
            }),
        }
    }

    /// Flag value, else config value, else `default`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> CliResult<T>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => v,
            None => self.get(key)?.unwrap_or(default),
        })
    }

    pub fn pick_opt<T: FromStr>(&self, flag: Option<T>, key: &str) -> CliResult<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        Ok(match flag {
            Some(v) => Some(v),
            None => self.get(key)?,
        })
    }
}
