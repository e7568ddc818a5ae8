//! Config resolution: defaults, then the JSON file, then `--set key=value`
//! overrides, then `--seed`.
//!
//! The file may also be a `manifest.json` from an earlier run; its `config`
//! object is used as-is.

use std::path::Path;

use fedctl_core::SimulationConfig;
use serde_json::{Map, Value};

use crate::error::{CliError, Result};

pub fn load_config(path: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<SimulationConfig> {
    let mut tree = serde_json::to_value(SimulationConfig::default()).expect("default config serializes");
    if let Some(path) = path {
        let text = std::fs::read_to_string(path).map_err(|source| CliError::Input {
            path: path.to_path_buf(),
            source,
        })?;
        let file: Value = serde_json::from_str(&text).map_err(|e| CliError::Malformed {
            what: "config",
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        let file = unwrap_manifest(file);
        if !file.is_object() {
            return Err(CliError::Config(format!("{} must hold a JSON object", path.display())));
        }
        merge(&mut tree, file, "")?;
    }
    for item in overrides {
        apply_override(&mut tree, item)?;
    }

    let mut cfg: SimulationConfig = serde_path_to_error::deserialize(tree).map_err(|e| {
        let key = e.path().to_string();
        CliError::Config(format!("key `{key}`: {}", e.inner()))
    })?;
    if let Some(seed) = seed {
        cfg.master_seed = seed;
    }
    let cfg = cfg.resolved();
    cfg.validate()?;
    Ok(cfg)
}

fn unwrap_manifest(v: Value) -> Value {
    match v {
        Value::Object(mut map) if map.contains_key("artifact_version") && map.contains_key("config") => {
            map.remove("config").unwrap_or(Value::Null)
        }
        other => other,
    }
}

/// Merge `src` into `dst`. Keys absent from `dst` are rejected.
fn merge(dst: &mut Value, src: Value, prefix: &str) -> Result<()> {
    match (dst, src) {
        (Value::Object(d), Value::Object(s)) => {
            for (k, v) in s {
                let key = join(prefix, &k);
                match d.get_mut(&k) {
                    Some(slot) => merge(slot, v, &key)?,
                    None => return Err(CliError::Config(format!("unknown key `{key}`"))),
                }
            }
            Ok(())
        }
        (slot, v) => {
            if v.is_object() && !slot.is_object() {
                return Err(CliError::Config(format!("key `{prefix}` is not a section")));
            }
            *slot = v;
            Ok(())
        }
    }
}

fn join(prefix: &str, key: &str) -> String {
    if prefix.is_empty() {
        key.to_string()
    } else {
        format!("{prefix}.{key}")
    }
}

/// `a.b.c=value`; the value is parsed as JSON and falls back to a bare string.
pub fn apply_override(tree: &mut Value, item: &str) -> Result<()> {
    let (key, raw) = item
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override `{item}` is not KEY=VALUE")))?;
    let key = key.trim();
    let mut node = tree;
    for part in key.split('.') {
        node = match node {
            Value::Object(map) => map
                .get_mut(part)
                .ok_or_else(|| CliError::Config(format!("unknown key `{key}`")))?,
            _ => return Err(CliError::Config(format!("unknown key `{key}`"))),
        };
    }
    if node.is_object() {
        return Err(CliError::Config(format!("key `{key}` is a section, not a value")));
    }
    *node = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    Ok(())
}

/// Flat `dotted.key -> value` view, used by tests and `inspect`.
pub fn flatten(v: &Value) -> Map<String, Value> {
    fn walk(v: &Value, prefix: &str, out: &mut Map<String, Value>) {
        match v {
            Value::Object(map) => {
                for (k, child) in map {
                    walk(child, &join(prefix, k), out);
                }
            }
            other => {
                out.insert(prefix.to_string(), other.clone());
            }
        }
    }
    let mut out = Map::new();
    walk(v, "", &mut out);
    out
}
