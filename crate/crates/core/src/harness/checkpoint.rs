//! Checkpoint directories: one safetensors blob per top-level parameter group
//! plus `meta.json`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use super::config::{arch_hash, TrainConfig};
use crate::metrics::MetricsReport;
use crate::model::{LandmarkModel, ModelConfig};
use crate::params::ParamStore;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val: Option<MetricsReport>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: TrainConfig,
    pub config_hash: String,
    pub epoch: usize,
    pub step: usize,
    pub best_val_dsc: Option<f64>,
    pub history: Vec<EpochRecord>,
    pub seed: u64,
    pub code_version: String,
    pub dtype: String,
}

impl CheckpointMeta {
    pub fn new(config: &TrainConfig, dtype: DType) -> Result<Self> {
        Ok(Self {
            config_hash: arch_hash(&config.model()?)?,
            config: config.clone(),
            epoch: 0,
            step: 0,
            best_val_dsc: None,
            history: Vec::new(),
            seed: config.seed,
            code_version: env!("CARGO_PKG_VERSION").to_string(),
            dtype: dtype.as_str().to_string(),
        })
    }
}

/// Entry of `params/index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub file: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub frozen: bool,
}

fn group(name: &str) -> &str {
    name.split('.').next().unwrap_or(name)
}

pub fn save(dir: &Path, store: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    let params = dir.join("params");
    std::fs::create_dir_all(&params)?;
    let mut groups: BTreeMap<String, HashMap<String, Tensor>> = BTreeMap::new();
    let mut index: BTreeMap<String, IndexEntry> = BTreeMap::new();
    for (name, t, frozen) in store.all() {
        let g = group(&name).to_string();
        let entry = IndexEntry {
            file: format!("{g}.safetensors"),
            shape: t.dims().to_vec(),
            dtype: t.dtype().as_str().to_string(),
            frozen,
        };
        index.insert(name.clone(), entry);
        groups.entry(g).or_default().insert(name, t.contiguous()?);
    }
    for (g, tensors) in &groups {
        candle_core::safetensors::save(tensors, params.join(format!("{g}.safetensors")))?;
    }
    std::fs::write(params.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    std::fs::write(dir.join("meta.json"), serde_json::to_string_pretty(meta)?)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let path = dir.join("meta.json");
    let text = std::fs::read_to_string(&path)
        .map_err(|e| Error::Load(format!("cannot read {}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_tensors(dir: &Path) -> Result<HashMap<String, Tensor>> {
    let params = dir.join("params");
    let index: BTreeMap<String, IndexEntry> = serde_json::from_str(
        &std::fs::read_to_string(params.join("index.json"))
            .map_err(|e| Error::Load(format!("checkpoint index in {}: {e}", params.display())))?,
    )?;
    let mut files: Vec<&String> = index.values().map(|e| &e.file).collect();
    files.sort();
    files.dedup();
    let mut out = HashMap::new();
    for f in files {
        out.extend(candle_core::safetensors::load(params.join(f), &Device::Cpu)?);
    }
    for (name, e) in &index {
        match out.get(name) {
            None => return Err(Error::Load(format!("checkpoint index lists `{name}` but no blob holds it"))),
            Some(t) if t.dims() != e.shape.as_slice() => {
                return Err(Error::Load(format!("`{name}`: index says {:?}, blob holds {:?}", e.shape, t.dims())))
            }
            Some(_) => {}
        }
    }
    Ok(out)
}

/// Rebuilds the model stored in `dir`. With `expected`, the stored architecture
/// must match it.
pub fn load_model(dir: &Path, expected: Option<&ModelConfig>) -> Result<(LandmarkModel, ParamStore, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let mut model_cfg = meta.config.model()?;
    if let Some(exp) = expected {
        let want = arch_hash(exp)?;
        if want != meta.config_hash {
            return Err(Error::Compatibility(format!(
                "checkpoint architecture {} does not match the requested {}",
                &meta.config_hash[..12],
                &want[..12]
            )));
        }
    }
    // every weight comes from the checkpoint, including frozen ones
    model_cfg.encoder.pretrained_depth_weights = None;
    let dtype: DType = meta.dtype.parse().map_err(|_| Error::Load(format!("unknown dtype `{}`", meta.dtype)))?;
    let store = ParamStore::new(dtype, meta.seed);
    store.preload(load_tensors(dir)?);
    let model = LandmarkModel::new(&model_cfg, &store)?;
    store.check_loaded()?;
    let missing = store.not_preloaded("");
    if !missing.is_empty() {
        return Err(Error::Load(format!("checkpoint lacks {} parameters, e.g. `{}`", missing.len(), missing[0])));
    }
    Ok((model, store, meta))
}
