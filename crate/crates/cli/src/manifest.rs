use std::path::Path;

use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

/// Hex SHA-256 of the compact JSON encoding of `spec`.
pub fn config_hash(spec: &Value) -> String {
    hex::encode(Sha256::digest(spec.to_string().as_bytes()))
}

/// Write `manifest.json` with the resolved spec, its hash and versions.
pub fn write_manifest<S: Serialize>(dir: &Path, command: &str, spec: &S, files: &[String]) -> Result<(), CliError> {
    let spec = serde_json::to_value(spec).map_err(|e| CliError::Config(e.to_string()))?;
    let manifest = json!({
        "command": command,
        "spec": spec,
        "config_hash": config_hash(&spec),
        "versions": {
            "fpfgain": env!("CARGO_PKG_VERSION"),
        },
        "files": files,
    });
    write_json(&dir.join("manifest.json"), &manifest)
}

pub fn write_json(path: &Path, value: &Value) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::Io(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}
