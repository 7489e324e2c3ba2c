//! SHA-256 helpers for content-addressed resume keys and the bundle file index.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{PipelineError, Result};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).map_err(|e| PipelineError::io(path, e))?;
    Ok(sha256_hex(&bytes))
}

/// Hash of a sequence of labelled parts; each part is length-prefixed so
/// distinct sequences never collide by concatenation.
pub fn stage_key(parts: &[(&str, &str)]) -> String {
    let mut h = Sha256::new();
    for (label, value) in parts {
        for s in [label, value] {
            h.update((s.len() as u64).to_le_bytes());
            h.update(s.as_bytes());
        }
    }
    hex::encode(h.finalize())
}
