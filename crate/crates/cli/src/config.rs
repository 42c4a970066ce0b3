//! Plain-text experiment configs: `key: value` lines, UTF-8.
//!
//! Flags override config keys, config keys override built-in defaults.
//! Unknown keys are a hard (usage) error, and every run writes the fully
//! resolved configuration next to its outputs.

use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::{AppError, AppResult};

pub struct Resolver {
    entries: Vec<(String, String)>,
    consumed: Vec<bool>,
    resolved: Vec<(String, String)>,
}

impl Resolver {
    /// Start from an optional config file.
    pub fn new(config: Option<&PathBuf>) -> AppResult<Self> {
        let mut entries = Vec::new();
        if let Some(path) = config {
            let text = std::fs::read_to_string(path).map_err(|e| {
                AppError::Runtime(format!("cannot read config {}: {e}", path.display()))
            })?;
            for line in text.lines() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let Some((k, v)) = line.split_once(':') else {
                    return Err(AppError::Usage(format!(
                        "config line without ':': {line:?}"
                    )));
                };
                entries.push((k.trim().to_string(), v.trim().to_string()));
            }
        }
        let consumed = vec![false; entries.len()];
        Ok(Resolver {
            entries,
            consumed,
            resolved: Vec::new(),
        })
    }

    fn lookup(&mut self, key: &str) -> Option<String> {
        let mut found = None;
        for (i, (k, v)) in self.entries.iter().enumerate() {
            if k == key {
                self.consumed[i] = true;
                found = Some(v.clone());
            }
        }
        found
    }

    fn parse<T: FromStr>(key: &str, raw: &str) -> AppResult<T> {
        raw.parse().map_err(|_| {
            AppError::Usage(format!("invalid value {raw:?} for config key {key:?}"))
        })
    }

    /// Flag > config > default.
    pub fn get<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
        default: T,
    ) -> AppResult<T> {
        let from_config = self.lookup(key);
        let value = match flag {
            Some(v) => v,
            None => match from_config {
                Some(raw) => Self::parse(key, &raw)?,
                None => default,
            },
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Flag > config; error when neither is present.
    pub fn require<T: FromStr + Display>(&mut self, key: &str, flag: Option<T>) -> AppResult<T> {
        let from_config = self.lookup(key);
        let value = match flag {
            Some(v) => v,
            None => match from_config {
                Some(raw) => Self::parse(key, &raw)?,
                None => {
                    return Err(AppError::Usage(format!(
                        "missing required option --{key} (or config key {key:?})"
                    )))
                }
            },
        };
        self.resolved.push((key.to_string(), value.to_string()));
        Ok(value)
    }

    /// Flag > config; absent is fine.
    pub fn optional<T: FromStr + Display>(
        &mut self,
        key: &str,
        flag: Option<T>,
    ) -> AppResult<Option<T>> {
        let from_config = self.lookup(key);
        let value = match flag {
            Some(v) => Some(v),
            None => match from_config {
                Some(raw) => Some(Self::parse(key, &raw)?),
                None => None,
            },
        };
        if let Some(v) = &value {
            self.resolved.push((key.to_string(), v.to_string()));
        }
        Ok(value)
    }

    /// Reject unconsumed config keys and write the resolved copy.
    pub fn finish(self, out_dir: &Path, command: &str) -> AppResult<()> {
        for (i, (k, _)) in self.entries.iter().enumerate() {
            if !self.consumed[i] {
                return Err(AppError::Usage(format!(
                    "unknown config key {k:?} for command {command}"
                )));
            }
        }
        let mut text = String::new();
        for (k, v) in &self.resolved {
            text.push_str(&format!("{k}: {v}\n"));
        }
        std::fs::write(out_dir.join(format!("{command}.resolved.cfg")), text)?;
        Ok(())
    }
}

/// Create the output directory if needed.
pub fn ensure_out_dir(path: &Path) -> AppResult<()> {
    std::fs::create_dir_all(path)
        .map_err(|e| AppError::Runtime(format!("cannot create {}: {e}", path.display())))
}
