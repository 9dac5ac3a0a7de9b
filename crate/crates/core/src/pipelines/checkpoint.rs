//! Checkpoint directories: a named-tensor container (`params.bin`) plus
//! `meta.json` with config, step count, schedule state, and the dataset
//! fingerprint. Loading fails loudly on any config or shape mismatch.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::diffusion::LatentScaler;
use crate::nets::ParamSet;
use crate::tensor::Tensor;
use crate::Scalar;

use super::RunConfig;

const MAGIC: &[u8; 8] = b"MLDMCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad container: {0}")]
    BadContainer(String),
    #[error("config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("missing tensor {0}")]
    MissingTensor(String),
}

/// Flat container of named f64 tensors, stored little-endian.
#[derive(Default)]
pub struct TensorStore {
    entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl TensorStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert<T: Scalar>(&mut self, name: &str, tensor: &Tensor<T>) {
        self.entries.insert(
            name.to_string(),
            (tensor.shape().to_vec(), tensor.data().iter().map(|v| v.as_f64()).collect()),
        );
    }

    pub fn get<T: Scalar>(&self, name: &str) -> Option<Tensor<T>> {
        self.entries.get(name).map(|(shape, data)| {
            Tensor::new(shape, data.iter().map(|&v| T::of_f64(v)).collect())
        })
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn write(&self, path: &Path) -> Result<(), CheckpointError> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for (name, (shape, data)) in &self.entries {
            let nb = name.as_bytes();
            out.extend_from_slice(&(nb.len() as u16).to_le_bytes());
            out.extend_from_slice(nb);
            out.push(shape.len() as u8);
            for &d in shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mut file = fs::File::create(path)?;
        file.write_all(&out)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut pos = 0usize;
        let take = |pos: &mut usize, n: usize| -> Result<&[u8], CheckpointError> {
            if *pos + n > bytes.len() {
                return Err(CheckpointError::BadContainer("truncated".into()));
            }
            let s = &bytes[*pos..*pos + n];
            *pos += n;
            Ok(s)
        };
        if take(&mut pos, 8)? != MAGIC {
            return Err(CheckpointError::BadContainer("bad magic".into()));
        }
        let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::BadContainer(format!("unknown version {version}")));
        }
        let count = u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
                .map_err(|e| CheckpointError::BadContainer(e.to_string()))?;
            let ndim = take(&mut pos, 1)?[0] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(u64::from_le_bytes(take(&mut pos, 8)?.try_into().unwrap()) as usize);
            }
            let numel: usize = shape.iter().product();
            let raw = take(&mut pos, numel * 8)?;
            let data: Vec<f64> =
                raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.insert(name, (shape, data));
        }
        Ok(Self { entries })
    }
}

/// Checkpoint metadata. `extra` holds last metric values for inspection.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub version: u32,
    pub kind: String,
    pub step: usize,
    pub dataset_fingerprint: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub run_config: Option<RunConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub predictor_config: Option<super::PredictorTrainConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scaler: Option<LatentScaler>,
    #[serde(default)]
    pub extra: BTreeMap<String, f64>,
}

pub fn write_meta(dir: &Path, meta: &CheckpointMeta) -> Result<(), CheckpointError> {
    let json = serde_json::to_string_pretty(meta)
        .map_err(|e| CheckpointError::BadContainer(e.to_string()))?;
    fs::write(dir.join("meta.json"), json)?;
    Ok(())
}

pub fn read_meta(dir: &Path) -> Result<CheckpointMeta, CheckpointError> {
    let raw = fs::read_to_string(dir.join("meta.json"))?;
    serde_json::from_str(&raw).map_err(|e| CheckpointError::BadContainer(e.to_string()))
}

/// Copy every tensor of a parameter set into the store.
pub fn store_params<T: Scalar>(store: &mut TensorStore, params: &ParamSet<T>) {
    for (name, tensor) in params.iter() {
        store.insert(name, tensor);
    }
}

/// Fill a parameter set from the store; every parameter must be present with
/// the right shape.
pub fn load_params<T: Scalar>(
    store: &TensorStore,
    params: &mut ParamSet<T>,
) -> Result<(), CheckpointError> {
    let names: Vec<String> = params.iter().map(|(n, _)| n.to_string()).collect();
    for name in names {
        let loaded: Tensor<T> =
            store.get(&name).ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
        let slot = params
            .iter_mut()
            .find(|(n, _)| *n == name)
            .map(|(_, t)| t)
            .expect("name from iteration");
        if loaded.shape() != slot.shape() {
            return Err(CheckpointError::ConfigMismatch(format!(
                "tensor {name} has shape {:?}, checkpoint has {:?}",
                slot.shape(),
                loaded.shape()
            )));
        }
        *slot = loaded;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn container_roundtrip() {
        let dir = std::env::temp_dir().join("morphldm_ckpt_test");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let mut store = TensorStore::new();
        let a = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32 * 0.5 - 1.0);
        let b = Tensor::<f64>::from_fn(&[4], |i| (i as f64).sqrt());
        store.insert("a", &a);
        store.insert("b", &b);
        let path = dir.join("params.bin");
        store.write(&path).unwrap();
        let loaded = TensorStore::read(&path).unwrap();
        assert_eq!(loaded.get::<f32>("a").unwrap(), a);
        assert_eq!(loaded.get::<f64>("b").unwrap(), b);
        assert!(loaded.get::<f32>("c").is_none());
        let _ = fs::remove_dir_all(&dir);
    }

    #[test]
    fn param_roundtrip_is_exact_for_f32() {
        let mut params = ParamSet::<f32>::new();
        params.add("w", Tensor::from_fn(&[5], |i| (i as f32 * 0.77).sin()));
        params.add("b", Tensor::from_fn(&[2], |i| i as f32));
        let mut store = TensorStore::new();
        store_params(&mut store, &params);
        let mut other = ParamSet::<f32>::new();
        other.add("w", Tensor::zeros(&[5]));
        other.add("b", Tensor::zeros(&[2]));
        load_params(&store, &mut other).unwrap();
        for ((_, a), (_, b)) in params.iter().zip(other.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn shape_mismatch_fails_loudly() {
        let mut params = ParamSet::<f32>::new();
        params.add("w", Tensor::zeros(&[5]));
        let mut store = TensorStore::new();
        store.insert("w", &Tensor::<f32>::zeros(&[4]));
        let mut target = ParamSet::<f32>::new();
        target.add("w", Tensor::zeros(&[5]));
        assert!(matches!(load_params(&store, &mut target), Err(CheckpointError::ConfigMismatch(_))));
        let empty = TensorStore::new();
        assert!(matches!(load_params(&empty, &mut params), Err(CheckpointError::MissingTensor(_))));
    }

    #[test]
    fn corrupt_container_rejected() {
        let dir = std::env::temp_dir().join("morphldm_ckpt_corrupt");
        let _ = fs::remove_dir_all(&dir);
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("params.bin");
        fs::write(&path, b"NOTMAGIC").unwrap();
        assert!(matches!(TensorStore::read(&path), Err(CheckpointError::BadContainer(_))));
        let _ = fs::remove_dir_all(&dir);
    }
}
