//! Run manifest: what ran, with which configuration, and what it produced.

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use sha2::{Digest, Sha256};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_SCHEMA: &str = "lindistill-manifest/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema: String,
    pub tool: String,
    pub version: String,
    pub command: String,
    /// SHA-256 of the canonical JSON form of `config`.
    pub config_sha256: String,
    pub seed: Option<u64>,
    pub threads: usize,
    pub started_at: String,
    pub finished_at: String,
    /// The configuration after defaults and overrides were applied.
    pub config: Value,
    /// Files written next to the manifest, in write order.
    pub outputs: Vec<String>,
    pub results: Value,
    /// Trials or checks that failed without aborting the run.
    pub failures: usize,
    pub warnings: Vec<String>,
}

/// Rebuilds `value` with every object's keys in sorted order.
pub fn canonical(value: &Value) -> Value {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&map[k]));
            }
            Value::Object(out)
        }
        Value::Array(items) => Value::Array(items.iter().map(canonical).collect()),
        other => other.clone(),
    }
}

/// Lower-case hex SHA-256 of the compact canonical JSON of `value`.
pub fn config_hash(value: &Value) -> String {
    let text = serde_json::to_string(&canonical(value)).expect("JSON values always serialise");
    Sha256::digest(text.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn hash_ignores_key_order() {
        let a: Value = serde_json::from_str(r#"{"b": 1, "a": {"y": [1, 2], "x": null}}"#).unwrap();
        let b: Value = serde_json::from_str(r#"{"a": {"x": null, "y": [1, 2]}, "b": 1}"#).unwrap();
        assert_eq!(config_hash(&a), config_hash(&b));
        assert_ne!(
            config_hash(&a),
            config_hash(&json!({"b": 2, "a": {"x": null, "y": [1, 2]}}))
        );
    }

    #[test]
    fn hash_of_empty_object_matches_sha256() {
        // sha256("{}")
        assert_eq!(
            config_hash(&json!({})),
            "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a"
        );
    }
}
