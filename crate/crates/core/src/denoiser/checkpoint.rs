//! Checkpoints: a JSON manifest plus a little-endian `f64` weight blob.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{DenoiserConfig, DenoiserError, DenoiserParams, Objective, TOKEN_LAYOUT_VERSION};
use crate::diffusion::ScheduleConfig;

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"PDIFFW\0\0";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub token_layout_version: u32,
    pub denoiser: DenoiserConfig,
    pub schedule: ScheduleConfig,
    pub embed_dim: usize,
    pub objective: Objective,
    pub param_count: usize,
    /// Weight blob, relative to the manifest's directory.
    pub weights_file: String,
}

fn weights_path(manifest: &Path, file: &str) -> PathBuf {
    manifest.parent().unwrap_or_else(|| Path::new(".")).join(file)
}

/// Writes `manifest` (JSON) and a sibling `.bin` blob.
pub fn save_checkpoint(
    manifest: &Path,
    params: &DenoiserParams,
    schedule: &ScheduleConfig,
    objective: Objective,
) -> Result<CheckpointManifest, DenoiserError> {
    let stem = manifest
        .file_stem()
        .and_then(|s| s.to_str())
        .ok_or_else(|| DenoiserError::Checkpoint(format!("bad manifest path {}", manifest.display())))?;
    let file = format!("{stem}.bin");
    let m = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT_VERSION,
        token_layout_version: TOKEN_LAYOUT_VERSION,
        denoiser: *params.config(),
        schedule: *schedule,
        embed_dim: params.config().embed_dim,
        objective,
        param_count: params.param_count(),
        weights_file: file.clone(),
    };
    let mut blob = Vec::with_capacity(20 + 8 * params.param_count());
    blob.extend_from_slice(MAGIC);
    blob.extend_from_slice(&CHECKPOINT_FORMAT_VERSION.to_le_bytes());
    blob.extend_from_slice(&(params.param_count() as u64).to_le_bytes());
    for v in params.values() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(weights_path(manifest, &file))?.write_all(&blob)?;
    let json = serde_json::to_string_pretty(&m).map_err(|e| DenoiserError::Checkpoint(e.to_string()))?;
    fs::write(manifest, json)?;
    Ok(m)
}

pub fn load_checkpoint(manifest: &Path) -> Result<(DenoiserParams, CheckpointManifest), DenoiserError> {
    let text = fs::read_to_string(manifest)?;
    let m: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| DenoiserError::Checkpoint(format!("manifest: {e}")))?;
    if m.format_version != CHECKPOINT_FORMAT_VERSION {
        return Err(DenoiserError::Checkpoint(format!(
            "format version {} not supported (expected {CHECKPOINT_FORMAT_VERSION})",
            m.format_version
        )));
    }
    if m.token_layout_version != TOKEN_LAYOUT_VERSION {
        return Err(DenoiserError::Checkpoint(format!(
            "token layout version {} not supported (expected {TOKEN_LAYOUT_VERSION})",
            m.token_layout_version
        )));
    }
    if m.embed_dim != m.denoiser.embed_dim {
        return Err(DenoiserError::Checkpoint("embed_dim disagrees with architecture".into()));
    }
    let blob = fs::read(weights_path(manifest, &m.weights_file))?;
    if blob.len() < 20 || &blob[..8] != MAGIC {
        return Err(DenoiserError::Checkpoint("weight blob has no valid header".into()));
    }
    let version = u32::from_le_bytes(blob[8..12].try_into().expect("4 bytes"));
    if version != CHECKPOINT_FORMAT_VERSION {
        return Err(DenoiserError::Checkpoint(format!("weight blob version {version} not supported")));
    }
    let count = u64::from_le_bytes(blob[12..20].try_into().expect("8 bytes")) as usize;
    if count != m.param_count || blob.len() != 20 + 8 * count {
        return Err(DenoiserError::Checkpoint(format!(
            "weight blob holds {} bytes for {count} parameters, manifest says {}",
            blob.len(),
            m.param_count
        )));
    }
    let values = blob[20..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let params = DenoiserParams::from_values(m.denoiser, values)?;
    Ok((params, m))
}
