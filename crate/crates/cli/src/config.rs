//! Flat JSON config files with command-line overrides.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{CliError, CliResult};

pub type Flat = Map<String, Value>;

/// Reads a flat key-value JSON object; a missing path gives an empty map.
pub fn read_flat(path: Option<&Path>) -> CliResult<Flat> {
    let Some(path) = path else { return Ok(Flat::new()) };
    let text = std::fs::read_to_string(path).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))?;
    match serde_json::from_str::<Value>(&text) {
        Ok(Value::Object(m)) => {
            if let Some((k, _)) = m.iter().find(|(_, v)| v.is_object() || v.is_array()) {
                return Err(CliError::usage(format!("{}: key {k:?} is nested; config files are flat", path.display())));
            }
            Ok(m)
        }
        Ok(_) => Err(CliError::usage(format!("{}: expected a JSON object", path.display()))),
        Err(e) => Err(CliError::usage(format!("{}: {e}", path.display()))),
    }
}

fn keys_of<T: Serialize>(value: &T) -> Flat {
    match serde_json::to_value(value).expect("config serializes") {
        Value::Object(m) => m,
        _ => unreachable!("configs are structs"),
    }
}

/// Rejects keys that none of `targets` define.
pub fn check_keys(flat: &Flat, targets: &[&Flat], reserved: &[&str]) -> CliResult<()> {
    for k in flat.keys() {
        if !reserved.contains(&k.as_str()) && !targets.iter().any(|t| t.contains_key(k)) {
            return Err(CliError::usage(format!("unknown config key {k:?}")));
        }
    }
    Ok(())
}

/// Overlays the keys of `base` present in `file`, then in `overrides`.
pub fn overlay<T: Serialize + DeserializeOwned>(base: &T, file: &Flat, overrides: &Flat) -> CliResult<T> {
    let mut m = keys_of(base);
    for layer in [file, overrides] {
        for (k, v) in layer {
            if m.contains_key(k) {
                m.insert(k.clone(), v.clone());
            }
        }
    }
    serde_json::from_value(Value::Object(m)).map_err(|e| CliError::usage(format!("bad config value: {e}")))
}

/// The flat key set of a config struct.
pub fn fields<T: Serialize>(value: &T) -> Flat {
    keys_of(value)
}

/// Collects the `Some` fields of an override list.
#[macro_export]
macro_rules! overrides {
    ($($key:literal => $val:expr),* $(,)?) => {{
        let mut m = $crate::config::Flat::new();
        $(if let Some(v) = &$val { m.insert($key.to_string(), serde_json::to_value(v).expect("override serializes")); })*
        m
    }};
}
