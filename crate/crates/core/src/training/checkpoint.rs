//! Model and trainer persistence.
//!
//! A model checkpoint is one tensor file whose tensors are the parameter map
//! and whose header `meta.model_config` holds the model configuration as JSON
//! (`config_hash` is its SHA-256). A trainer directory holds `model.ckpt` plus
//! `optimizer.ckpt`, whose tensors are the Adam moments under `m/<path>` and
//! `v/<path>` and whose header carries the training configuration, step count
//! and seed.

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{TrainConfig, Trainer};
use crate::error::{Error, Result};
use crate::hiermodel::{HierModel, ModelConfig};
use crate::numerics::checkpoint::{CheckpointHeader, TensorFile};
use crate::numerics::{AdamWConfig, OptimizerState, ParamStore, Real};

pub const MODEL_FILE: &str = "model.ckpt";
pub const OPTIMIZER_FILE: &str = "optimizer.ckpt";

pub fn config_hash(cfg: &ModelConfig) -> String {
    let json = serde_json::to_string(cfg).expect("model config serializes");
    Sha256::digest(json.as_bytes())
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

fn meta_json<D: serde::de::DeserializeOwned>(h: &CheckpointHeader, key: &str, path: &Path) -> Result<D> {
    let raw = h
        .meta
        .get(key)
        .ok_or_else(|| Error::Data(format!("{}: header lacks {key}", path.display())))?;
    Ok(serde_json::from_str(raw)?)
}

pub fn save_model<T: Real>(model: &HierModel<T>, path: &Path, global_step: u64, seed: u64) -> Result<()> {
    let mut header = CheckpointHeader::new::<T>(config_hash(&model.cfg));
    header.global_step = global_step;
    header.seeds.insert("train".into(), seed);
    header
        .meta
        .insert("model_config".into(), serde_json::to_string(&model.cfg)?);
    let tensors = model
        .params
        .iter()
        .map(|(k, v)| (k.clone(), v.as_ref().clone()))
        .collect();
    TensorFile { header, tensors }.save(path)
}

pub fn load_model<T: Real>(path: &Path) -> Result<HierModel<T>> {
    let file = TensorFile::<T>::load(path)?;
    let cfg: ModelConfig = meta_json(&file.header, "model_config", path)?;
    if config_hash(&cfg) != file.header.config_hash {
        return Err(Error::Data(format!("{}: config hash mismatch", path.display())));
    }
    cfg.validate()?;
    let mut params = ParamStore::new();
    for (k, t) in file.tensors {
        params.insert(k, t);
    }
    Ok(HierModel { cfg, params })
}

/// Writes a trainer to `dir`. Only valid between optimizer steps.
pub fn save_trainer<T: Real>(t: &Trainer<T>, dir: &Path) -> Result<()> {
    if t.pending_micro_steps() != 0 {
        return Err(Error::Contract(
            "cannot checkpoint in the middle of gradient accumulation".into(),
        ));
    }
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    save_model(&t.model, &dir.join(MODEL_FILE), t.step(), t.cfg.seed)?;

    let mut header = CheckpointHeader::new::<T>(config_hash(&t.model.cfg));
    header.global_step = t.step();
    header.seeds.insert("train".into(), t.cfg.seed);
    header
        .meta
        .insert("train_config".into(), serde_json::to_string(&t.cfg)?);
    header
        .meta
        .insert("adam".into(), serde_json::to_string(&t.opt.hyper)?);
    header
        .meta
        .insert("total_steps".into(), t.total_steps.to_string());
    let mut tensors = BTreeMap::new();
    for (k, v) in &t.opt.first_moment {
        tensors.insert(format!("m/{k}"), v.clone());
    }
    for (k, v) in &t.opt.second_moment {
        tensors.insert(format!("v/{k}"), v.clone());
    }
    TensorFile { header, tensors }.save(&dir.join(OPTIMIZER_FILE))
}

pub fn load_trainer<T: Real>(dir: &Path) -> Result<Trainer<T>> {
    let model = load_model::<T>(&dir.join(MODEL_FILE))?;
    let path = dir.join(OPTIMIZER_FILE);
    let file = TensorFile::<T>::load(&path)?;
    if file.header.config_hash != config_hash(&model.cfg) {
        return Err(Error::Data(format!(
            "{}: optimizer state belongs to another model",
            path.display()
        )));
    }
    let cfg: TrainConfig = meta_json(&file.header, "train_config", &path)?;
    let hyper: AdamWConfig = meta_json(&file.header, "adam", &path)?;
    let total_steps: u64 = meta_json(&file.header, "total_steps", &path)?;
    let mut opt = OptimizerState::new(hyper);
    opt.step = file.header.global_step;
    for (k, v) in file.tensors {
        match k.split_once('/') {
            Some(("m", p)) => opt.first_moment.insert(p.to_string(), v),
            Some(("v", p)) => opt.second_moment.insert(p.to_string(), v),
            _ => return Err(Error::Data(format!("{}: unexpected tensor {k}", path.display()))),
        };
    }
    cfg.validate()?;
    Ok(Trainer::from_parts(model, opt, cfg, total_steps))
}
