use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::UsageError;

/// Reads a TOML or JSON file (by extension) into a JSON value.
pub fn read_value(path: &Path) -> anyhow::Result<Value> {
    let text = fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config {}: {e}", path.display())))?;
    let value = match path.extension().and_then(|e| e.to_str()) {
        Some("toml") => {
            let parsed: toml::Value = toml::from_str(&text)
                .map_err(|e| UsageError(format!("{}: {e}", path.display())))?;
            serde_json::to_value(parsed)?
        }
        Some("json") => serde_json::from_str(&text)
            .map_err(|e| UsageError(format!("{}: {e}", path.display())))?,
        _ => {
            return Err(UsageError(format!(
                "config {} must end in .toml or .json",
                path.display()
            ))
            .into())
        }
    };
    Ok(value)
}

/// Recursively overlays `patch` onto `base`.
fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Applies `a.b.c=value`; the value is parsed as JSON when possible and
/// taken as a string otherwise. The key must already exist.
fn set_dotted(root: &mut Value, assignment: &str) -> Result<(), UsageError> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| UsageError(format!("override `{assignment}` is not key=value")))?;
    let mut slot = root;
    for part in key.split('.') {
        slot = slot
            .as_object_mut()
            .and_then(|m: &mut Map<String, Value>| m.get_mut(part))
            .ok_or_else(|| UsageError(format!("unknown config key `{key}`")))?;
    }
    *slot = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Defaults, then the optional file, then overrides; unknown keys fail.
pub fn resolve<T: Serialize + DeserializeOwned>(
    defaults: &T,
    file: Option<&Path>,
    overrides: &[String],
) -> anyhow::Result<T> {
    let mut value = serde_json::to_value(defaults)?;
    if let Some(path) = file {
        merge(&mut value, read_value(path)?);
    }
    for o in overrides {
        set_dotted(&mut value, o)?;
    }
    serde_json::from_value(value).map_err(|e| UsageError(format!("invalid config: {e}")).into())
}
