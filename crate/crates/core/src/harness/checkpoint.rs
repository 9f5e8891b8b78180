//! Checkpoint directories.
//!
//! ```text
//! <dir>/index.json        step, class count, parameter table
//! <dir>/config.txt        run config snapshot
//! <dir>/metrics.log       log lines so far
//! <dir>/params/NNNN.stt   parameter values, f64
//! <dir>/adam/NNNN_m.stt   first moments
//! <dir>/adam/NNNN_v.stt   second moments
//! ```
//!
//! The directory is assembled next to its destination and renamed into place.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::container::{load_tensor, save_tensor, write_atomic, DType, StoredTensor};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::train::{Adam, TrainState};
use crate::model::Stmi;

pub const CHECKPOINT_VERSION: &str = "stmi-ckpt/1";
pub const INDEX_FILE: &str = "index.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const LOG_FILE: &str = "metrics.log";

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
    value: String,
    adam_m: String,
    adam_v: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Index {
    version: String,
    step: usize,
    num_classes: usize,
    adam_t: u64,
    params: Vec<ParamEntry>,
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut s = dir.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

pub fn save(dir: impl AsRef<Path>, config: &RunConfig, state: &TrainState) -> Result<()> {
    let dir = dir.as_ref();
    let staging = sibling(dir, ".partial");
    if staging.exists() {
        fs::remove_dir_all(&staging).map_err(|e| Error::io(&staging, e))?;
    }
    let ps = &state.params;
    let mut entries = Vec::with_capacity(ps.len());
    for (k, id) in ps.ids().enumerate() {
        let entry = ParamEntry {
            name: ps.name(id).to_string(),
            shape: ps.get(id).shape().to_vec(),
            trainable: ps.is_trainable(id),
            value: format!("params/{k:04}.stt"),
            adam_m: format!("adam/{k:04}_m.stt"),
            adam_v: format!("adam/{k:04}_v.stt"),
        };
        save_tensor(&StoredTensor::from_f64(ps.get(id)), staging.join(&entry.value))?;
        save_tensor(&StoredTensor::from_f64(&state.adam.m[k]), staging.join(&entry.adam_m))?;
        save_tensor(&StoredTensor::from_f64(&state.adam.v[k]), staging.join(&entry.adam_v))?;
        entries.push(entry);
    }
    let index = Index {
        version: CHECKPOINT_VERSION.into(),
        step: state.step,
        num_classes: state.model.config.num_classes,
        adam_t: state.adam.t,
        params: entries,
    };
    write_atomic(&staging.join(INDEX_FILE), &serde_json::to_vec_pretty(&index)?)?;
    write_atomic(&staging.join(CONFIG_FILE), config.to_text().as_bytes())?;
    let mut log = state.log.join("\n");
    if !log.is_empty() {
        log.push('\n');
    }
    write_atomic(&staging.join(LOG_FILE), log.as_bytes())?;

    let old = sibling(dir, ".old");
    if dir.exists() {
        if old.exists() {
            fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
        }
        fs::rename(dir, &old).map_err(|e| Error::io(dir, e))?;
    }
    fs::rename(&staging, dir).map_err(|e| Error::io(dir, e))?;
    if old.exists() {
        fs::remove_dir_all(&old).map_err(|e| Error::io(&old, e))?;
    }
    Ok(())
}

fn load_f64(dir: &Path, rel: &str, shape: &[usize]) -> Result<crate::tensor::Tensor> {
    let t = load_tensor(dir.join(rel))?.expect(DType::F64, shape.len())?;
    if t.shape != shape {
        return Err(Error::Geometry(format!("{rel}: shape {:?}, index says {shape:?}", t.shape)));
    }
    Ok(t.to_tensor())
}

/// Loads the config snapshot and the training state.
pub fn load(dir: impl AsRef<Path>) -> Result<(RunConfig, TrainState)> {
    let dir = dir.as_ref();
    let index_path = dir.join(INDEX_FILE);
    let bytes = fs::read(&index_path).map_err(|e| Error::io(&index_path, e))?;
    let index: Index = serde_json::from_slice(&bytes)?;
    if index.version != CHECKPOINT_VERSION {
        return Err(Error::Config(format!(
            "checkpoint version {:?}, expected {CHECKPOINT_VERSION:?}",
            index.version
        )));
    }
    let config = RunConfig::load(dir.join(CONFIG_FILE))?;
    let (model, mut params) = Stmi::new(config.model(index.num_classes), config.seed)?;
    if index.params.len() != params.len() {
        return Err(Error::Config(format!(
            "checkpoint has {} parameters, model has {}",
            index.params.len(),
            params.len()
        )));
    }
    let mut adam = Adam::new(&params);
    adam.t = index.adam_t;
    for (k, entry) in index.params.iter().enumerate() {
        let id = params
            .find(&entry.name)
            .ok_or_else(|| Error::Config(format!("checkpoint parameter {:?} not in model", entry.name)))?;
        if id.index() != k {
            return Err(Error::Config(format!("parameter {:?} out of order", entry.name)));
        }
        params.set(id, load_f64(dir, &entry.value, &entry.shape)?)?;
        params.set_trainable(id, entry.trainable);
        adam.m[k] = load_f64(dir, &entry.adam_m, &entry.shape)?;
        adam.v[k] = load_f64(dir, &entry.adam_v, &entry.shape)?;
    }
    let log_path = dir.join(LOG_FILE);
    let log = fs::read_to_string(&log_path).map_err(|e| Error::io(&log_path, e))?;
    let state = TrainState {
        model,
        params,
        adam,
        step: index.step,
        log: log.lines().map(str::to_string).collect(),
    };
    Ok((config, state))
}
