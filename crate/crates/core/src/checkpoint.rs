//! Checkpoint directories: one tensor container per named parameter (and per
//! AdamW moment) plus a JSON sidecar.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};
use crate::model::{AdamW, AdamWHyper, Model, ModelConfig};
use crate::tensor::Tensor;

pub const CHECKPOINT_SCHEMA: &str = "snip.checkpoint.v1";
const SIDECAR: &str = "checkpoint.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema: String,
    pub config: ModelConfig,
    pub adamw: AdamWHyper,
    /// Optimizer steps taken.
    pub t: u64,
    pub step: u64,
    pub params: Vec<String>,
    pub optimizer_state: bool,
}

fn write_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    t.write_container(&mut w)?;
    Ok(())
}

fn read_tensor(path: &Path) -> Result<Tensor> {
    Tensor::read_container(BufReader::new(File::open(path)?))
}

/// Writes `model` and, if given, the optimizer moments under `dir`.
pub fn save(dir: &Path, model: &Model, opt: Option<&AdamW>, hyper: AdamWHyper, step: u64) -> Result<()> {
    let names = model.layout().names();
    fs::create_dir_all(dir.join("params"))?;
    for (name, p) in names.iter().zip(model.params()) {
        write_tensor(&dir.join("params").join(format!("{name}.snipt")), p)?;
    }
    if let Some(opt) = opt {
        for sub in ["adam_m", "adam_v"] {
            fs::create_dir_all(dir.join(sub))?;
        }
        for (i, name) in names.iter().enumerate() {
            write_tensor(&dir.join("adam_m").join(format!("{name}.snipt")), &opt.m[i])?;
            write_tensor(&dir.join("adam_v").join(format!("{name}.snipt")), &opt.v[i])?;
        }
    }
    let meta = CheckpointMeta {
        schema: CHECKPOINT_SCHEMA.into(),
        config: model.config().clone(),
        adamw: opt.map(|o| o.hyper).unwrap_or(hyper),
        t: opt.map(|o| o.t).unwrap_or(0),
        step,
        params: names,
        optimizer_state: opt.is_some(),
    };
    fs::write(dir.join(SIDECAR), serde_json::to_string_pretty(&meta)?)?;
    Ok(())
}

pub fn load_meta(dir: &Path) -> Result<CheckpointMeta> {
    let meta: CheckpointMeta = serde_json::from_str(&fs::read_to_string(dir.join(SIDECAR))?)?;
    if meta.schema != CHECKPOINT_SCHEMA {
        return Err(invalid(format!("unsupported checkpoint schema {:?}", meta.schema)));
    }
    Ok(meta)
}

/// Loads the model and, when stored, the optimizer state.
pub fn load(dir: &Path) -> Result<(Model, Option<AdamW>, CheckpointMeta)> {
    let meta = load_meta(dir)?;
    let read_all = |sub: &str| -> Result<Vec<Tensor>> {
        meta.params
            .iter()
            .map(|n| read_tensor(&dir.join(sub).join(format!("{n}.snipt"))))
            .collect()
    };
    let params = read_all("params")?;
    let model = Model::from_params(meta.config.clone(), params)?;
    let opt = if meta.optimizer_state {
        Some(AdamW::from_state(meta.adamw, model.params(), read_all("adam_m")?, read_all("adam_v")?, meta.t)?)
    } else {
        None
    };
    Ok((model, opt, meta))
}

/// Like [`load`] but requires optimizer state.
pub fn load_with_optimizer(dir: &Path) -> Result<(Model, AdamW, CheckpointMeta)> {
    let (model, opt, meta) = load(dir)?;
    let opt = opt.ok_or_else(|| invalid(format!("checkpoint {} lacks optimizer state", dir.display())))?;
    Ok((model, opt, meta))
}
