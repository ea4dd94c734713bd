//! On-disk formats.
//!
//! * Correspondence file: `{"pairs": [{"i", "j", "points_i", "points_j"}, ...]}`.
//! * Camera file: `{"cameras": [{"log_focal", "quat", "trans"}, ...]}` in scene order.
//! * Dataset directory: `manifest.json` plus `scenes/<name>.json`, one
//!   [`SceneRecord`] per file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::PoseTuple;
use crate::geometry::{Camera, CorrespondenceSet, GeometryError};
use crate::scenegen::{Dataset, SceneDistribution, SceneRecord};

pub const DATASET_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const SCENES_DIR: &str = "scenes";

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: malformed JSON: {source}")]
    Json {
        path: PathBuf,
        source: serde_json::Error,
    },
    #[error("{path}: {detail}")]
    Invalid { path: PathBuf, detail: String },
}

impl IoError {
    fn invalid(path: &Path, detail: impl Into<String>) -> Self {
        IoError::Invalid {
            path: path.to_path_buf(),
            detail: detail.into(),
        }
    }
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, IoError> {
    let text = fs::read_to_string(path).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    serde_json::from_str(&text).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// Pretty JSON with a trailing newline; output is byte-stable for equal values.
pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), IoError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|source| IoError::Json {
        path: path.to_path_buf(),
        source,
    })?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<(), IoError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|source| IoError::Io {
            path: dir.to_path_buf(),
            source,
        })?;
    }
    fs::write(path, text).map_err(|source| IoError::Io {
        path: path.to_path_buf(),
        source,
    })
}

#[derive(Serialize, Deserialize)]
struct PairsFile {
    pairs: Vec<CorrespondenceSet>,
}

#[derive(Serialize, Deserialize)]
struct CamerasFile {
    cameras: Vec<Camera>,
}

pub fn read_correspondences(path: &Path) -> Result<Vec<CorrespondenceSet>, IoError> {
    let f: PairsFile = read_json(path)?;
    for (k, m) in f.pairs.iter().enumerate() {
        m.validate()
            .map_err(|e: GeometryError| IoError::invalid(path, format!("pair {k}: {e}")))?;
    }
    Ok(f.pairs)
}

pub fn write_correspondences(path: &Path, pairs: &[CorrespondenceSet]) -> Result<(), IoError> {
    write_json(
        path,
        &PairsFile {
            pairs: pairs.to_vec(),
        },
    )
}

pub fn read_cameras(path: &Path) -> Result<PoseTuple, IoError> {
    let f: CamerasFile = read_json(path)?;
    if f.cameras.is_empty() {
        return Err(IoError::invalid(path, "camera list is empty"));
    }
    if let Some(k) = f.cameras.iter().position(|c| !c.is_finite()) {
        return Err(IoError::invalid(path, format!("camera {k} has non-finite parameters")));
    }
    Ok(PoseTuple::new(f.cameras))
}

pub fn write_cameras(path: &Path, poses: &PoseTuple) -> Result<(), IoError> {
    write_json(
        path,
        &CamerasFile {
            cameras: poses.cameras.clone(),
        },
    )
}

/// `manifest.json` of a dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub seed: u64,
    pub train_ratio: f64,
    pub distribution: SceneDistribution,
    /// Scene names in index order; files live at `scenes/<name>.json`.
    pub scenes: Vec<String>,
    pub train: Vec<usize>,
    pub test: Vec<usize>,
}

fn scene_path(dir: &Path, name: &str) -> PathBuf {
    dir.join(SCENES_DIR).join(format!("{name}.json"))
}

pub fn write_dataset(
    dir: &Path,
    dataset: &Dataset,
    distribution: &SceneDistribution,
    seed: u64,
    train_ratio: f64,
) -> Result<DatasetManifest, IoError> {
    for s in &dataset.scenes {
        write_json(&scene_path(dir, &s.name), s)?;
    }
    let manifest = DatasetManifest {
        format_version: DATASET_FORMAT_VERSION,
        seed,
        train_ratio,
        distribution: distribution.clone(),
        scenes: dataset.scenes.iter().map(|s| s.name.clone()).collect(),
        train: dataset.train.clone(),
        test: dataset.test.clone(),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(manifest)
}

pub fn read_dataset(dir: &Path) -> Result<(Dataset, DatasetManifest), IoError> {
    let mpath = dir.join(MANIFEST_FILE);
    let manifest: DatasetManifest = read_json(&mpath)?;
    if manifest.format_version != DATASET_FORMAT_VERSION {
        return Err(IoError::invalid(
            &mpath,
            format!("dataset format version {} not supported", manifest.format_version),
        ));
    }
    let n = manifest.scenes.len();
    if let Some(k) = manifest.train.iter().chain(&manifest.test).find(|k| **k >= n) {
        return Err(IoError::invalid(&mpath, format!("split index {k} out of range for {n} scenes")));
    }
    let scenes = manifest
        .scenes
        .iter()
        .map(|name| read_scene(&scene_path(dir, name)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((
        Dataset {
            scenes,
            train: manifest.train.clone(),
            test: manifest.test.clone(),
        },
        manifest,
    ))
}

pub fn read_scene(path: &Path) -> Result<SceneRecord, IoError> {
    let s: SceneRecord = read_json(path)?;
    let n = s.n_frames();
    if s.conditioning.len() != n {
        return Err(IoError::invalid(
            path,
            format!("{} embeddings for {n} cameras", s.conditioning.len()),
        ));
    }
    for m in &s.matches {
        if m.i >= n || m.j >= n {
            return Err(IoError::invalid(path, format!("pair ({}, {}) outside {n} frames", m.i, m.j)));
        }
        m.validate().map_err(|e| IoError::invalid(path, e.to_string()))?;
    }
    Ok(s)
}
