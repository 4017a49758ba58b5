//! Parameter blob (`<stem>.bin`, little-endian f32) plus a JSON manifest.

use std::path::{Path, PathBuf};

use crossseg_core::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::net::{Network, NetworkConfig};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub config: NetworkConfig,
    pub seed: u64,
    pub iteration: usize,
    pub num_params: usize,
    /// SHA-256 of the serialized network config.
    pub config_hash: String,
    /// SHA-256 of the parameter blob.
    pub params_hash: String,
    /// Free-form run configuration hash, filled by the caller.
    #[serde(default)]
    pub run_config_hash: Option<String>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn config_hash(config: &NetworkConfig) -> String {
    sha256_hex(serde_json::to_string(config).expect("config serializes").as_bytes())
}

fn paths(dir: &Path, stem: &str) -> (PathBuf, PathBuf) {
    (dir.join(format!("{stem}.bin")), dir.join(format!("{stem}.json")))
}

pub fn save_checkpoint(
    net: &Network<f32>,
    dir: &Path,
    stem: &str,
    iteration: usize,
    run_config_hash: Option<String>,
) -> Result<CheckpointMeta> {
    std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
    let (bin, json) = paths(dir, stem);
    let blob: Vec<u8> = net.params().iter().flat_map(|v| v.to_le_bytes()).collect();
    let meta = CheckpointMeta {
        config: net.config().clone(),
        seed: net.config().seed,
        iteration,
        num_params: net.num_params(),
        config_hash: config_hash(net.config()),
        params_hash: sha256_hex(&blob),
        run_config_hash,
    };
    std::fs::write(&bin, &blob).map_err(|e| io(&bin, e))?;
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::Json { path: json.clone(), source: e })?;
    std::fs::write(&json, text).map_err(|e| io(&json, e))?;
    Ok(meta)
}

pub fn load_checkpoint(dir: &Path, stem: &str) -> Result<(Network<f32>, CheckpointMeta)> {
    let (bin, json) = paths(dir, stem);
    let text = std::fs::read_to_string(&json).map_err(|e| io(&json, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text).map_err(|e| Error::Json { path: json.clone(), source: e })?;
    if meta.config_hash != config_hash(&meta.config) {
        return Err(Error::Validation(format!("{}: config hash mismatch", json.display())));
    }
    let blob = std::fs::read(&bin).map_err(|e| io(&bin, e))?;
    if blob.len() != meta.num_params * 4 {
        return Err(Error::Format(format!(
            "{}: {} bytes for {} parameters",
            bin.display(),
            blob.len(),
            meta.num_params
        )));
    }
    if sha256_hex(&blob) != meta.params_hash {
        return Err(Error::Validation(format!("{}: parameter hash mismatch", bin.display())));
    }
    let params = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((Network::from_params(meta.config.clone(), params)?, meta))
}

fn io(path: &Path, source: std::io::Error) -> Error {
    Error::Io { path: path.to_path_buf(), source }
}

/// Splits a path like `run/checkpoints/net3d_000200.json` (or without the
/// extension) into the directory and stem expected by [`load_checkpoint`].
pub fn split_checkpoint_path(p: &Path) -> Result<(PathBuf, String)> {
    let stem = p
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| Error::Validation(format!("not a checkpoint path: {}", p.display())))?;
    let dir = p.parent().map(Path::to_path_buf).unwrap_or_default();
    Ok((dir, stem.to_string()))
}
