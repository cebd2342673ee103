//! Configuration files.
//!
//! A TOML file whose top-level keys apply to every subcommand and whose
//! tables (`[simulate]`, `[cv]`, …) override them for one subcommand.
//! Keys use the long flag names with dashes replaced by underscores.
//! Command-line flags take precedence over the file, which takes
//! precedence over built-in defaults.

use std::path::Path;

use serde::de::DeserializeOwned;
use toml::{Table, Value};

use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, Default)]
pub struct Config {
    table: Table,
    section: String,
}

impl Config {
    pub fn load(path: Option<&Path>, section: &str) -> CliResult<Self> {
        let table = match path {
            None => Table::new(),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?;
                text.parse::<Table>()
                    .map_err(|e| CliError::Usage(format!("{}: {e}", p.display())))?
            }
        };
        Ok(Config {
            table,
            section: section.into(),
        })
    }

    pub fn from_str(text: &str, section: &str) -> CliResult<Self> {
        let table = text
            .parse::<Table>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Config {
            table,
            section: section.into(),
        })
    }

    fn lookup(&self, key: &str) -> Option<&Value> {
        self.table
            .get(&self.section)
            .and_then(Value::as_table)
            .and_then(|t| t.get(key))
            .or_else(|| self.table.get(key).filter(|v| !v.is_table()))
    }

    /// The configured value of `key`, if any.
    pub fn get<T: DeserializeOwned>(&self, key: &str) -> CliResult<Option<T>> {
        match self.lookup(key) {
            None => Ok(None),
            Some(v) => v
                .clone()
                .try_into()
                .map(Some)
                .map_err(|e| CliError::Usage(format!("config key {key}: {e}"))),
        }
    }

    /// Flag, then file, then `default`.
    pub fn pick<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
        default: T,
    ) -> CliResult<T> {
        Ok(self.pick_opt(flag, key)?.unwrap_or(default))
    }

    pub fn pick_opt<T: DeserializeOwned>(
        &self,
        flag: Option<T>,
        key: &str,
    ) -> CliResult<Option<T>> {
        match flag {
            Some(v) => Ok(Some(v)),
            None => self.get(key),
        }
    }

    /// Flag, then file; missing everywhere is a usage error.
    pub fn require<T: DeserializeOwned>(&self, flag: Option<T>, key: &str) -> CliResult<T> {
        self.pick_opt(flag, key)?
            .ok_or_else(|| CliError::Usage(format!("--{} is required", key.replace('_', "-"))))
    }
}
