//! Self-describing checkpoint files: named weight arrays in a safetensors
//! container whose metadata holds a versioned JSON header.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};

use crate::backbone::NoiseSchedule;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};

pub const CHECKPOINT_VERSION: u32 = 1;
const HEADER_KEY: &str = "multicomp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub version: u32,
    pub model: ModelConfig,
    pub schedule: NoiseSchedule,
    pub step: usize,
    /// Trainer bookkeeping needed to resume (random streams, data order,
    /// optimizer counters); absent for inference-only exports.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<serde_json::Value>,
}

impl CheckpointHeader {
    pub fn for_model(model: &Model, step: usize) -> Self {
        CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: model.cfg,
            schedule: model.schedule.clone(),
            step,
            train: None,
        }
    }
}

fn ckpt_err(path: &Path, reason: impl ToString) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn tensor_bytes(t: &Tensor) -> Result<(Dtype, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            Dtype::F64,
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            Dtype::F32,
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Writes `tensors` plus `header` to `path` through a temporary sibling
/// file and a rename, so readers never observe a partial file.
pub fn save_checkpoint(path: &Path, header: &CheckpointHeader, tensors: &[(String, Tensor)]) -> Result<()> {
    let encoded = tensors
        .iter()
        .map(|(name, t)| Ok((name.clone(), tensor_bytes(t)?, t.dims().to_vec())))
        .collect::<Result<Vec<_>>>()?;
    let views = encoded
        .iter()
        .map(|(name, (dtype, bytes), shape)| {
            TensorView::new(*dtype, shape.clone(), bytes)
                .map(|v| (name.as_str(), v))
                .map_err(|e| ckpt_err(path, e))
        })
        .collect::<Result<Vec<_>>>()?;
    let meta = HashMap::from([(HEADER_KEY.to_string(), serde_json::to_string(header)?)]);
    let bytes = safetensors::serialize(views, Some(meta)).map_err(|e| ckpt_err(path, e))?;

    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save_checkpoint`]. Tensors come back
/// sorted by name.
pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(CheckpointHeader, Vec<(String, Tensor)>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (_, meta) = SafeTensors::read_metadata(&bytes).map_err(|e| ckpt_err(path, e))?;
    let raw = meta
        .metadata()
        .as_ref()
        .and_then(|m| m.get(HEADER_KEY))
        .ok_or_else(|| ckpt_err(path, "missing header"))?;
    let header: CheckpointHeader = serde_json::from_str(raw).map_err(|e| ckpt_err(path, e))?;
    if header.version != CHECKPOINT_VERSION {
        return Err(ckpt_err(
            path,
            format!("unsupported version {} (expected {CHECKPOINT_VERSION})", header.version),
        ));
    }
    let st = SafeTensors::deserialize(&bytes).map_err(|e| ckpt_err(path, e))?;
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            Dtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            Dtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, device)?
            }
            other => return Err(ckpt_err(path, format!("unsupported dtype {other:?} for {name}"))),
        };
        tensors.push((name, t));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    Ok((header, tensors))
}

/// Rebuilds a model from a checkpoint, ignoring optimizer entries.
pub fn load_model(path: &Path, device: &Device, dtype: DType) -> Result<(Model, CheckpointHeader)> {
    let (header, tensors) = load_checkpoint(path, device)?;
    let model = Model::new(header.model, header.schedule.clone(), 0, device, dtype)?;
    model.load_weights(&tensors)?;
    Ok((model, header))
}

/// Writes the model weights alone.
pub fn save_model(path: &Path, model: &Model, step: usize) -> Result<()> {
    save_checkpoint(path, &CheckpointHeader::for_model(model, step), &model.weights())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_round_trip_is_exact_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = ModelConfig::default();
        cfg.backbone.channels = [8, 16];
        cfg.backbone.groups = 4;
        let model = Model::new(cfg, NoiseSchedule::default(), 3, &Device::Cpu, DType::F32).unwrap();
        let a = dir.path().join("a.safetensors");
        let b = dir.path().join("b.safetensors");
        save_model(&a, &model, 7).unwrap();
        save_model(&b, &model, 7).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
        assert!(!dir.path().join("a.safetensors.tmp").exists());

        let (loaded, header) = load_model(&a, &Device::Cpu, DType::F32).unwrap();
        assert_eq!(header.step, 7);
        assert_eq!(header.model, cfg);
        for ((n1, t1), (n2, t2)) in model.weights().iter().zip(loaded.weights().iter()) {
            assert_eq!(n1, n2);
            let d = (t1 - t2).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.safetensors");
        let mut header = CheckpointHeader {
            version: CHECKPOINT_VERSION,
            model: ModelConfig::default(),
            schedule: NoiseSchedule::linear(1e-4, 0.02, 10).unwrap(),
            step: 0,
            train: None,
        };
        header.version = 99;
        save_checkpoint(&path, &header, &[]).unwrap();
        assert!(matches!(load_checkpoint(&path, &Device::Cpu), Err(Error::Checkpoint { .. })));
    }
}
