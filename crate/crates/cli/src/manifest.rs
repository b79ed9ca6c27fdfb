//! Run manifests: a content-hashed record of what a command produced, used
//! by `--resume` to make completed invocations no-ops. Timestamps live only
//! here, never in metric files.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::{SystemTime, UNIX_EPOCH};

use crlab_core::error::Result;
use sha2::{Digest, Sha256};

pub const MANIFEST_FORMAT: &str = "crlab-manifest-v1";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Hash of the canonical config echo plus the command identity.
pub fn config_hash(command: &str, echo: &BTreeMap<String, String>, extra: &[(&str, String)]) -> String {
    let mut hasher = Sha256::new();
    hasher.update(command.as_bytes());
    hasher.update(b"\n");
    for (k, v) in echo {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    for (k, v) in extra {
        hasher.update(k.as_bytes());
        hasher.update(b"=");
        hasher.update(v.as_bytes());
        hasher.update(b"\n");
    }
    let digest = hasher.finalize();
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// True when a completed manifest with the same hash already sits in `dir`.
pub fn is_complete(dir: &Path, hash: &str) -> bool {
    let path = dir.join(MANIFEST_FILE);
    let Ok(body) = std::fs::read_to_string(&path) else {
        return false;
    };
    let Ok(value) = serde_json::from_str::<serde_json::Value>(&body) else {
        return false;
    };
    value["format"] == MANIFEST_FORMAT
        && value["completed"] == true
        && value["config_hash"] == hash
}

/// Write the manifest after all outputs exist.
pub fn write(
    dir: &Path,
    command: &str,
    hash: &str,
    echo: &BTreeMap<String, String>,
    outputs: &[String],
) -> Result<()> {
    let created_unix_ms =
        SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_millis()).unwrap_or(0);
    let manifest = serde_json::json!({
        "format": MANIFEST_FORMAT,
        "command": command,
        "config_hash": hash,
        "config_echo": echo,
        "outputs": outputs,
        "created_unix_ms": created_unix_ms,
        "completed": true,
    });
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}
