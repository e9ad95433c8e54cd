//! Versioned, checksummed JSON checkpoints.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Envelope {
    version: u32,
    config_hash: String,
    /// SHA-256 over version, config hash and payload text.
    checksum: String,
    payload: String,
}

fn checksum(version: u32, config_hash: &str, payload: &str) -> String {
    let mut h = Sha256::new();
    h.update(version.to_le_bytes());
    h.update(config_hash.as_bytes());
    h.update([0]);
    h.update(payload.as_bytes());
    hex::encode(h.finalize())
}

/// Writes `state` atomically (temp file, then rename).
pub fn save_checkpoint<T: Serialize>(path: &Path, config_hash: &str, state: &T) -> Result<()> {
    let payload = serde_json::to_string(state)?;
    let env = Envelope {
        version: CHECKPOINT_VERSION,
        config_hash: config_hash.to_string(),
        checksum: checksum(CHECKPOINT_VERSION, config_hash, &payload),
        payload,
    };
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, serde_json::to_vec(&env)?)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Reads a checkpoint, refusing version mismatches, corrupted content and,
/// when `expected_hash` is given, checkpoints of a different config.
pub fn load_checkpoint<T: DeserializeOwned>(path: &Path, expected_hash: Option<&str>) -> Result<T> {
    let bytes = std::fs::read(path).map_err(|e| Error::Read {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    let env: Envelope =
        serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    if env.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "version {} is not supported (expected {CHECKPOINT_VERSION})",
            env.version
        )));
    }
    if checksum(env.version, &env.config_hash, &env.payload) != env.checksum {
        return Err(Error::Checkpoint(format!("{}: checksum mismatch", path.display())));
    }
    if let Some(h) = expected_hash {
        if h != env.config_hash {
            return Err(Error::Checkpoint(format!(
                "{} was written for config {} but the current config is {h}",
                path.display(),
                env.config_hash
            )));
        }
    }
    serde_json::from_str(&env.payload).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// The config hash a checkpoint was written with.
pub fn checkpoint_config_hash(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path)?;
    let env: Envelope = serde_json::from_slice(&bytes).map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(env.config_hash)
}
