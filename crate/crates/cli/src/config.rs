//! Run configuration loading: JSON or flat `key=value` files, `--set`
//! overrides, and the resolved-config snapshot written into every run
//! directory. Unknown keys are rejected by the typed deserializers.

use std::collections::BTreeMap;
use std::path::Path;

use radenc_core::error::{Error, Result};
use serde_json::Value;

/// Parse a config file into a key -> JSON value map. Files starting with
/// `{` are JSON objects; anything else is `key=value` lines (`#` comments).
pub fn load_config_map(path: &Path) -> Result<BTreeMap<String, Value>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("config `{}`: {e}", path.display())))?;
    parse_config_text(&text).map_err(|e| Error::config(format!("config `{}`: {e}", path.display())))
}

fn parse_config_text(text: &str) -> std::result::Result<BTreeMap<String, Value>, String> {
    let trimmed = text.trim_start();
    if trimmed.starts_with('{') {
        let value: Value = serde_json::from_str(text).map_err(|e| e.to_string())?;
        let Value::Object(map) = value else {
            return Err("top-level JSON must be an object".into());
        };
        return Ok(map.into_iter().collect());
    }
    let mut out = BTreeMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(format!("line {}: expected key=value", lineno + 1));
        };
        out.insert(key.trim().to_string(), parse_scalar(value.trim()));
    }
    Ok(out)
}

/// Interpret an override value: JSON scalar when it parses, string otherwise.
pub fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str::<Value>(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

pub fn apply_overrides(map: &mut BTreeMap<String, Value>, sets: &[String]) -> Result<()> {
    for s in sets {
        let Some((key, value)) = s.split_once('=') else {
            return Err(Error::config(format!("--set `{s}`: expected key=value")));
        };
        map.insert(key.trim().to_string(), parse_scalar(value.trim()));
    }
    Ok(())
}

/// Pull a string-valued key out of the map (consumed by the caller so the
/// remainder can deserialize with deny_unknown_fields).
pub fn take_string(map: &mut BTreeMap<String, Value>, key: &str) -> Option<String> {
    map.remove(key).map(|v| match v {
        Value::String(s) => s,
        other => other.to_string(),
    })
}

/// Deserialize the remaining keys into a typed config.
pub fn into_typed<T: serde::de::DeserializeOwned>(map: BTreeMap<String, Value>) -> Result<T> {
    let obj: serde_json::Map<String, Value> = map.into_iter().collect();
    serde_json::from_value(Value::Object(obj)).map_err(|e| Error::config(e.to_string()))
}

/// Canonical JSON of a key map (BTreeMap keeps keys sorted).
pub fn canonical_json(map: &BTreeMap<String, Value>) -> String {
    serde_json::to_string_pretty(map).expect("config serializes")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flat_and_json_forms_agree() {
        let flat = parse_config_text("teacher_momentum_start=0.994\nepochs=10\narch=vit_tiny\n").unwrap();
        let json = parse_config_text(
            r#"{"teacher_momentum_start": 0.994, "epochs": 10, "arch": "vit_tiny"}"#,
        )
        .unwrap();
        assert_eq!(flat, json);
    }

    #[test]
    fn comments_and_blank_lines_skipped() {
        let map = parse_config_text("# comment\n\nseed=7\n").unwrap();
        assert_eq!(map["seed"], Value::from(7));
    }

    #[test]
    fn overrides_replace_values() {
        let mut map = parse_config_text("epochs=10").unwrap();
        apply_overrides(&mut map, &["epochs=3".into(), "name=run".into()]).unwrap();
        assert_eq!(map["epochs"], Value::from(3));
        assert_eq!(map["name"], Value::from("run"));
    }
}
