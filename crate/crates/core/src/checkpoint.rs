//! Checkpoint directory: `index.json`, `config.json` and one tensor blob per
//! parameter under `params/`.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::DetectorConfig;
use crate::dataio::blob::{self, Blob};
use crate::error::{Error, Result};
use crate::fsutil;
use crate::model::{Detector, ParamStore};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IndexEntry {
    pub blob: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointIndex {
    pub format_version: u32,
    pub params: BTreeMap<String, IndexEntry>,
}

pub fn save_checkpoint(det: &Detector, dir: &Path) -> Result<()> {
    let mut params = BTreeMap::new();
    for (name, t) in det.params.iter() {
        let rel = format!("params/{name}.swkt");
        blob::write(&dir.join(&rel), &Blob::f32(t.shape(), t.data().to_vec()))?;
        params.insert(
            name.clone(),
            IndexEntry {
                blob: rel,
                shape: t.shape().to_vec(),
            },
        );
    }
    det.cfg.save(&dir.join(CONFIG_FILE))?;
    fsutil::write_json(
        &dir.join(INDEX_FILE),
        &CheckpointIndex {
            format_version: CHECKPOINT_VERSION,
            params,
        },
    )
}

pub fn read_index(dir: &Path) -> Result<CheckpointIndex> {
    let path = dir.join(INDEX_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let index: CheckpointIndex = serde_json::from_str(&text)
        .map_err(|e| Error::Checkpoint(format!("{}: corrupted index: {e}", path.display())))?;
    if index.format_version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format_version {} is not supported (expected {CHECKPOINT_VERSION})",
            path.display(),
            index.format_version
        )));
    }
    Ok(index)
}

/// Parameters as stored, checked against the index shapes.
pub fn read_params(dir: &Path) -> Result<ParamStore<f32>> {
    let index = read_index(dir)?;
    let mut store = ParamStore::new();
    for (name, entry) in &index.params {
        let path = dir.join(&entry.blob);
        if !path.exists() {
            return Err(Error::Checkpoint(format!("missing blob {} for {name}", path.display())));
        }
        let b = blob::read(&path)?;
        if b.dims != entry.shape {
            return Err(Error::Checkpoint(format!(
                "blob {} has shape {:?}, index says {:?}",
                path.display(),
                b.dims,
                entry.shape
            )));
        }
        let dims = b.dims.clone();
        store.insert(name.clone(), Tensor::new(&dims, b.into_f32(&path)?)?);
    }
    Ok(store)
}

/// Rebuild a detector from the embedded configuration and stored weights.
pub fn load_checkpoint(dir: &Path) -> Result<Detector> {
    let cfg = DetectorConfig::load(&dir.join(CONFIG_FILE))?;
    let mut det = Detector::new(cfg)?;
    det.set_params(read_params(dir)?)?;
    Ok(det)
}

/// Load weights into a detector built from `cfg`, rejecting shape mismatches.
pub fn load_into(cfg: DetectorConfig, dir: &Path) -> Result<Detector> {
    let mut det = Detector::new(cfg)?;
    det.set_params(read_params(dir)?)?;
    Ok(det)
}
