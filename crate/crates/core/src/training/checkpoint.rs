//! Checkpoint directory: `manifest.json` plus `weights.bin`, a little-endian
//! f32 blob addressed by per-tensor byte offsets.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::NUM_ACTS;
use crate::dualflow::{FlowConfig, FlowModel};
use crate::error::{DfmedError, Result};
use crate::generator::{GenConfig, GenModel};
use crate::metrics::EvalReport;
use crate::numerics::{ParamStore, Real};
use crate::vocab::Vocab;

pub const CHECKPOINT_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const WEIGHTS: &str = "weights.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into `weights.bin`.
    pub offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// `flow` or `generator`.
    pub kind: String,
    pub config: serde_json::Value,
    pub vocab: Vocab,
    pub thresholds: Option<[f64; NUM_ACTS]>,
    pub step: usize,
    pub epoch: usize,
    pub metrics: Option<EvalReport>,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `params` as f32 together with a manifest built from `meta`
/// (whose `tensors` field is replaced).
pub fn write_checkpoint<F: Real>(dir: impl AsRef<Path>, mut meta: Manifest, params: &ParamStore<F>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| DfmedError::io(dir, e))?;
    let mut blob = Vec::with_capacity(params.num_scalars() * 4);
    meta.tensors.clear();
    for (_, name, t) in params.iter() {
        meta.tensors.push(TensorEntry { name: name.to_string(), shape: t.shape.clone(), dtype: "f32".into(), offset: blob.len() });
        for v in &t.data {
            blob.extend_from_slice(&(v.f64() as f32).to_le_bytes());
        }
    }
    meta.version = CHECKPOINT_VERSION;
    let mp = dir.join(MANIFEST);
    fs::write(&mp, serde_json::to_vec_pretty(&meta)?).map_err(|e| DfmedError::io(&mp, e))?;
    let wp = dir.join(WEIGHTS);
    fs::write(&wp, blob).map_err(|e| DfmedError::io(&wp, e))
}

/// Reads the manifest and overwrites every tensor of `params` by name.
/// Names, shapes and dtypes must match exactly.
pub fn read_checkpoint<F: Real>(dir: impl AsRef<Path>, params: &mut ParamStore<F>) -> Result<Manifest> {
    let meta = read_manifest(&dir)?;
    let wp = dir.as_ref().join(WEIGHTS);
    let blob = fs::read(&wp).map_err(|e| DfmedError::io(&wp, e))?;
    if meta.tensors.len() != params.len() {
        return Err(DfmedError::Checkpoint(format!(
            "{} tensors in checkpoint, model has {}",
            meta.tensors.len(),
            params.len()
        )));
    }
    for entry in &meta.tensors {
        let id = params
            .id(&entry.name)
            .ok_or_else(|| DfmedError::Checkpoint(format!("unexpected tensor {}", entry.name)))?;
        let t = params.get_mut(id);
        if t.shape != entry.shape {
            return Err(DfmedError::Checkpoint(format!("{}: shape {:?} vs model {:?}", entry.name, entry.shape, t.shape)));
        }
        if entry.dtype != "f32" {
            return Err(DfmedError::Checkpoint(format!("{}: unsupported dtype {}", entry.name, entry.dtype)));
        }
        let end = entry.offset + t.data.len() * 4;
        let bytes = blob
            .get(entry.offset..end)
            .ok_or_else(|| DfmedError::Checkpoint(format!("{}: blob truncated", entry.name)))?;
        for (v, chunk) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *v = F::of(f32::from_le_bytes(chunk.try_into().expect("4 bytes")) as f64);
        }
    }
    Ok(meta)
}

fn read_manifest(dir: impl AsRef<Path>) -> Result<Manifest> {
    let mp = dir.as_ref().join(MANIFEST);
    let text = fs::read_to_string(&mp).map_err(|e| DfmedError::io(&mp, e))?;
    let meta: Manifest = serde_json::from_str(&text)?;
    if meta.version != CHECKPOINT_VERSION {
        return Err(DfmedError::Checkpoint(format!("unsupported version {}", meta.version)));
    }
    Ok(meta)
}

fn manifest(kind: &str, config: serde_json::Value, vocab: &Vocab, thresholds: Option<[f64; NUM_ACTS]>) -> Manifest {
    Manifest {
        version: CHECKPOINT_VERSION,
        kind: kind.into(),
        config,
        vocab: vocab.clone(),
        thresholds,
        step: 0,
        epoch: 0,
        metrics: None,
        tensors: Vec::new(),
    }
}

pub fn save_flow<F: Real>(
    dir: impl AsRef<Path>,
    model: &FlowModel<F>,
    step: usize,
    epoch: usize,
    metrics: Option<EvalReport>,
) -> Result<()> {
    let mut m = manifest("flow", serde_json::to_value(&model.cfg)?, &model.vocab, Some(model.thresholds));
    m.step = step;
    m.epoch = epoch;
    m.metrics = metrics;
    write_checkpoint(dir, m, &model.params)
}

pub fn load_flow<F: Real>(dir: impl AsRef<Path>) -> Result<(FlowModel<F>, Manifest)> {
    let meta = read_manifest(&dir)?;
    if meta.kind != "flow" {
        return Err(DfmedError::Checkpoint(format!("expected a flow checkpoint, found {}", meta.kind)));
    }
    let cfg: FlowConfig = serde_json::from_value(meta.config.clone())?;
    let mut model = FlowModel::new(cfg, meta.vocab.clone())?;
    let meta = read_checkpoint(&dir, &mut model.params)?;
    if let Some(t) = meta.thresholds {
        model.thresholds = t;
    }
    Ok((model, meta))
}

pub fn save_generator<F: Real>(
    dir: impl AsRef<Path>,
    model: &GenModel<F>,
    step: usize,
    epoch: usize,
    metrics: Option<EvalReport>,
) -> Result<()> {
    let mut m = manifest("generator", serde_json::to_value(&model.cfg)?, &model.vocab, None);
    m.step = step;
    m.epoch = epoch;
    m.metrics = metrics;
    write_checkpoint(dir, m, &model.params)
}

pub fn load_generator<F: Real>(dir: impl AsRef<Path>) -> Result<(GenModel<F>, Manifest)> {
    let meta = read_manifest(&dir)?;
    if meta.kind != "generator" {
        return Err(DfmedError::Checkpoint(format!("expected a generator checkpoint, found {}", meta.kind)));
    }
    let cfg: GenConfig = serde_json::from_value(meta.config.clone())?;
    let mut model = GenModel::new(cfg, meta.vocab.clone())?;
    let meta = read_checkpoint(&dir, &mut model.params)?;
    Ok((model, meta))
}
