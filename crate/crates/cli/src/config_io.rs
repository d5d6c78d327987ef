//! Config file parsing and `--set key=value` overrides.

use std::path::Path;

use foba::{FobaError, Result, RunConfig};
use serde_json::Value;

/// Parses a TOML document into the JSON tree the config schema reads.
pub fn parse_toml(text: &str, origin: &str) -> Result<Value> {
    let table: toml::Table = toml::from_str(text).map_err(|e| FobaError::config(origin, e.to_string()))?;
    Ok(serde_json::to_value(table)?)
}

/// Interprets the right-hand side of an override as a TOML value, falling
/// back to a bare string.
pub fn parse_value(raw: &str) -> Value {
    match toml::from_str::<toml::Table>(&format!("v = {}", raw)) {
        Ok(mut t) => serde_json::to_value(t.remove("v").expect("key v")).unwrap_or(Value::String(raw.into())),
        Err(_) => Value::String(raw.to_string()),
    }
}

/// Defaults, then the file, then each override in order, then `seed` for
/// every seeded component.
pub fn resolve(file: Option<&Path>, overrides: &[String], seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
                std::io::ErrorKind::NotFound => FobaError::MissingFile(path.to_path_buf()),
                _ => FobaError::io(path, e),
            })?;
            RunConfig::from_value(parse_toml(&text, &path.display().to_string())?)?
        }
        None => RunConfig::default(),
    };
    for o in overrides {
        let (key, value) = o
            .split_once('=')
            .ok_or_else(|| FobaError::config(o.as_str(), "override must look like key=value"))?;
        cfg.apply_override(key.trim(), parse_value(value.trim()))?;
    }
    if let Some(s) = seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
        cfg.synth.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}
