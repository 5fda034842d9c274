//! Run directory bookkeeping: the echoed config and `run.json` with the
//! seed and artifact hashes.

use std::collections::BTreeMap;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};
use unipact_core::config::RunConfig;
use unipact_core::CoreError;

pub const CONFIG_FILE: &str = "config.txt";
pub const RUN_FILE: &str = "run.json";

#[derive(Serialize)]
struct RunRecord<'a> {
    version: &'a str,
    command: &'a str,
    seed: u64,
    seed_source: &'a str,
    artifacts: BTreeMap<String, String>,
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    notes: BTreeMap<String, serde_json::Value>,
}

pub fn sha256_file(path: &Path) -> Result<String, CoreError> {
    let bytes = std::fs::read(path).map_err(|e| CoreError::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CoreError> {
    std::fs::write(path, bytes).map_err(|e| CoreError::io(path, e))
}

pub fn create(dir: &Path) -> Result<(), CoreError> {
    std::fs::create_dir_all(dir).map_err(|e| CoreError::io(dir, e))
}

/// Writes `config.txt`, then `run.json` hashing `artifacts` (paths
/// relative to `dir`) and the config itself.
pub fn finish(
    dir: &Path,
    command: &str,
    cfg: &RunConfig,
    seed_source: &str,
    artifacts: &[&str],
    notes: BTreeMap<String, serde_json::Value>,
) -> Result<(), CoreError> {
    write(&dir.join(CONFIG_FILE), cfg.echo())?;
    let mut hashes = BTreeMap::new();
    for name in artifacts.iter().copied().chain([CONFIG_FILE]) {
        hashes.insert(name.to_string(), sha256_file(&dir.join(name))?);
    }
    let rec = RunRecord {
        version: env!("CARGO_PKG_VERSION"),
        command,
        seed: cfg.seed,
        seed_source,
        artifacts: hashes,
        notes,
    };
    let mut text = serde_json::to_string_pretty(&rec).map_err(|e| CoreError::invalid(e.to_string()))?;
    text.push('\n');
    write(&dir.join(RUN_FILE), text)
}
