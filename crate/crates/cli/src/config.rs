//! Config files with `key=value` overrides and key listings for `--help`.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use toml::{Table, Value};

use crate::CliError;

/// Reads `path` (or an empty table), then applies `overrides` in order.
pub fn load_table(path: Option<&Path>, overrides: &[String]) -> Result<Table, CliError> {
    let mut table = match path {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", p.display())))?;
            text.parse::<Table>()
                .map_err(|e| CliError::Usage(format!("invalid config {}: {e}", p.display())))?
        }
        None => Table::new(),
    };
    for item in overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| CliError::Usage(format!("override {item:?} is not key=value")))?;
        set_key(&mut table, key.trim(), parse_value(raw.trim()))?;
    }
    Ok(table)
}

/// TOML literal if it parses as one, otherwise a bare string.
fn parse_value(raw: &str) -> Value {
    format!("v = {raw}")
        .parse::<Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| Value::String(raw.to_string()))
}

/// Sets a dotted key, creating intermediate tables.
pub fn set_key(table: &mut Table, key: &str, value: Value) -> Result<(), CliError> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| CliError::Usage(format!("empty key in {key:?}")))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| Value::Table(Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| CliError::Usage(format!("key {part:?} in {key:?} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

pub fn set_path(table: &mut Table, key: &str, path: &Option<PathBuf>) -> Result<(), CliError> {
    if let Some(p) = path {
        set_key(table, key, Value::String(p.display().to_string()))?;
    }
    Ok(())
}

/// Typed view of the table; unknown keys are usage errors.
pub fn parse<T: DeserializeOwned>(table: Table) -> Result<T, CliError> {
    Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("invalid configuration: {}", e.message())))
}

/// Dotted names of every leaf key in a fully populated example config.
pub fn keys_of<T: Serialize>(example: &T) -> Vec<String> {
    fn walk(prefix: &str, value: &Value, out: &mut Vec<String>) {
        match value {
            Value::Table(t) => {
                for (k, v) in t {
                    let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                    walk(&key, v, out);
                }
            }
            _ => out.push(prefix.to_string()),
        }
    }
    let value = Value::try_from(example).expect("config examples serialize to TOML");
    let mut out = Vec::new();
    walk("", &value, &mut out);
    out
}

pub fn keys_help(keys: &[String]) -> String {
    let mut text = String::from("Config keys (set in --config or with --set key=value):\n");
    for k in keys {
        text.push_str("  ");
        text.push_str(k);
        text.push('\n');
    }
    text
}

/// Value of a required key, or a usage error naming it and its flag.
pub fn require<T>(value: Option<T>, key: &str, flag: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Usage(format!("missing required key {key} (pass {flag} or set it in the config)")))
}
