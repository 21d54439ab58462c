//! Checkpoints: concatenated LGNK tensor records plus a sibling JSON manifest
//! naming them in file order.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelParams};
use crate::datagen::container::{decode_tensor, encode_tensor, write_atomic, FileDtype};
use crate::error::{Error, Result};
use crate::generator::Variant;
use crate::train::OptimizerState;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format_version: u32,
    pub config: ModelConfig,
    pub variant: Variant,
    pub epoch: usize,
    pub tensors: Vec<String>,
    pub optimizer_state: Vec<String>,
    pub optimizer_step: Option<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub epoch: usize,
    pub optimizer: Option<OptimizerState>,
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Self {
            params,
            epoch: 0,
            optimizer: None,
        }
    }
}

pub fn manifest_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

/// Writes the tensor file and its manifest; returns both paths.
pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<Vec<PathBuf>> {
    let mut buf = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in ckpt.params.tensors() {
        encode_tensor(&mut buf, t, FileDtype::native(t))?;
        tensors.push(name.clone());
    }
    let mut optimizer_state = Vec::new();
    if let Some(opt) = &ckpt.optimizer {
        for (prefix, map) in [("adam.m.", &opt.m), ("adam.v.", &opt.v)] {
            for (name, t) in map {
                encode_tensor(&mut buf, t, FileDtype::native(t))?;
                optimizer_state.push(format!("{}{}", prefix, name));
            }
        }
    }
    let manifest = CheckpointManifest {
        format_version: CHECKPOINT_FORMAT,
        config: ckpt.params.config.clone(),
        variant: ckpt.params.config.variant,
        epoch: ckpt.epoch,
        tensors,
        optimizer_state,
        optimizer_step: ckpt.optimizer.as_ref().map(|o| o.step),
    };
    let mpath = manifest_path(path);
    let json = serde_json::to_vec_pretty(&manifest).map_err(|e| Error::Json {
        path: mpath.clone(),
        source: e,
    })?;
    write_atomic(path, &buf)?;
    write_atomic(&mpath, &json)?;
    Ok(vec![path.to_path_buf(), mpath])
}

pub fn read_manifest(path: &Path) -> Result<CheckpointManifest> {
    let mpath = manifest_path(path);
    let text = fs::read(&mpath).map_err(|e| Error::io(&mpath, e))?;
    serde_json::from_slice(&text).map_err(|e| Error::Json { path: mpath, source: e })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let manifest = read_manifest(path)?;
    if manifest.format_version != CHECKPOINT_FORMAT {
        return Err(Error::Incompatible(format!(
            "checkpoint format {} (expected {})",
            manifest.format_version, CHECKPOINT_FORMAT
        )));
    }
    if manifest.variant != manifest.config.variant {
        return Err(Error::Incompatible(format!(
            "manifest variant {} disagrees with config variant {}",
            manifest.variant.name(),
            manifest.config.variant.name()
        )));
    }
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut offset = 0;
    let next = |offset: &mut usize| -> Result<crate::numkern::Tensor> {
        let (t, _, end) = decode_tensor(&bytes, *offset)?;
        *offset = end;
        Ok(t)
    };
    let mut tensors = BTreeMap::new();
    for name in &manifest.tensors {
        tensors.insert(name.clone(), next(&mut offset)?);
    }
    let mut m = BTreeMap::new();
    let mut v = BTreeMap::new();
    for name in &manifest.optimizer_state {
        let t = next(&mut offset)?;
        if let Some(path) = name.strip_prefix("adam.m.") {
            m.insert(path.to_string(), t);
        } else if let Some(path) = name.strip_prefix("adam.v.") {
            v.insert(path.to_string(), t);
        } else {
            return Err(Error::Incompatible(format!("unknown optimizer tensor {}", name)));
        }
    }
    if offset != bytes.len() {
        return Err(Error::Parse {
            offset: offset as u64,
            reason: format!("{} trailing bytes after last tensor", bytes.len() - offset),
        });
    }
    let params = ModelParams::from_tensors(manifest.config, tensors)?;
    let optimizer = manifest.optimizer_step.map(|step| OptimizerState { step, m, v });
    Ok(Checkpoint {
        params,
        epoch: manifest.epoch,
        optimizer,
    })
}
