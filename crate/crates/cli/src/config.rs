//! Config files (TOML or JSON) merged with command-line flags.
//!
//! A file is read into a JSON object; every flag the user actually passed
//! then overwrites the key of the same name. The merged object is both the
//! input to deserialization and the canonical form that gets hashed.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

pub type Object = Map<String, Value>;

/// Parses `path` as JSON when it ends in `.json` and as TOML otherwise.
pub fn load(path: Option<&Path>) -> Result<Object> {
    let Some(path) = path else {
        return Ok(Object::new());
    };
    let text = std::fs::read_to_string(path)
        .with_context(|| format!("cannot read config file {}", path.display()))?;
    let value: Value = if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text)
            .with_context(|| format!("invalid JSON in {}", path.display()))?
    } else {
        let table: toml::Table =
            toml::from_str(&text).with_context(|| format!("invalid TOML in {}", path.display()))?;
        serde_json::to_value(table)?
    };
    match value {
        Value::Object(map) => Ok(map),
        _ => bail!("config file {} must contain a table", path.display()),
    }
}

/// Writes `value` under `key` when the flag was given.
pub fn overlay<T: Serialize>(map: &mut Object, key: &str, value: Option<T>) -> Result<()> {
    if let Some(v) = value {
        map.insert(key.to_string(), serde_json::to_value(v)?);
    }
    Ok(())
}

pub fn parse<T: DeserializeOwned>(map: &Object, what: &str) -> Result<T> {
    serde_json::from_value(Value::Object(map.clone()))
        .with_context(|| format!("invalid {what} config"))
}

/// Sorted-key JSON rendering of any serializable value.
pub fn canonical<T: Serialize>(value: &T) -> Result<String> {
    // serde_json's default map is ordered by key, so a round trip through
    // `Value` sorts every nested object.
    Ok(serde_json::to_string(&serde_json::to_value(value)?)?)
}

/// Resolves a path from a config file relative to that file's directory.
pub fn relative_to(config: Option<&Path>, path: &Path) -> PathBuf {
    match config.and_then(Path::parent) {
        Some(dir) if path.is_relative() => dir.join(path),
        _ => path.to_path_buf(),
    }
}
