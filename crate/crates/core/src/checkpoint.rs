//! Self-describing model checkpoints.
//!
//! A checkpoint is a directory holding `metadata.json` (expert kind,
//! backbone config, freeze policy, normalization constants) and
//! `params.safetensors` with every parameter and batch-norm statistic.
//! Loading needs no external configuration. Tensor names are written in
//! sorted order so identical models produce identical bytes.

use std::collections::HashMap;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::{ArrayD, IxDyn};
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backbone::{build_backbone, BackboneConfig, BackboneError, ExpertModel, FreezePolicy};
use crate::datamodel::ExpertKind;
use crate::ingestion::{NORM_MEAN, NORM_STD};
use crate::nn::Scalar;

pub const METADATA_FILE: &str = "metadata.json";
pub const PARAMS_FILE: &str = "params.safetensors";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMetadata {
    pub format_version: u32,
    pub kind: ExpertKind,
    pub config: BackboneConfig,
    pub policy: FreezePolicy,
    pub normalization_mean: [f32; 3],
    pub normalization_std: [f32; 3],
    pub dtype: String,
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("metadata error at {path}: {source}")]
    Metadata {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error("tensor container error at {path}: {message}")]
    Container { path: PathBuf, message: String },
    #[error(transparent)]
    Backbone(#[from] BackboneError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CheckpointError + '_ {
    move |source| CheckpointError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Writes `metadata.json` + `params.safetensors` into `dir`.
pub fn save_checkpoint(model: &ExpertModel<f32>, dir: &Path) -> Result<(), CheckpointError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;

    let metadata = CheckpointMetadata {
        format_version: 1,
        kind: model.kind,
        config: model.config.clone(),
        policy: model.policy.clone(),
        normalization_mean: NORM_MEAN,
        normalization_std: NORM_STD,
        dtype: "f32".into(),
    };
    let meta_path = dir.join(METADATA_FILE);
    let meta_json =
        serde_json::to_vec_pretty(&metadata).map_err(|source| CheckpointError::Metadata {
            path: meta_path.clone(),
            source,
        })?;
    fs::write(&meta_path, meta_json).map_err(io_err(&meta_path))?;

    let snapshot = model.snapshot();
    write_tensor_map(&snapshot, &dir.join(PARAMS_FILE))
}

/// Serializes named f32 arrays, sorted by name for byte stability.
pub fn write_tensor_map(
    map: &HashMap<String, ArrayD<f32>>,
    path: &Path,
) -> Result<(), CheckpointError> {
    let mut names: Vec<&String> = map.keys().collect();
    names.sort();
    let mut byte_buffers: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(names.len());
    for name in names {
        let arr = &map[name];
        let standard = arr.as_standard_layout();
        let mut bytes = Vec::with_capacity(standard.len() * 4);
        for v in standard.iter() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        byte_buffers.push((name.clone(), arr.shape().to_vec(), bytes));
    }
    let views: Vec<(String, TensorView<'_>)> = byte_buffers
        .iter()
        .map(|(name, shape, bytes)| {
            let view = TensorView::new(Dtype::F32, shape.clone(), bytes)
                .expect("consistent tensor view");
            (name.clone(), view)
        })
        .collect();
    let data = safetensors::serialize(views, None).map_err(|e| CheckpointError::Container {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, data).map_err(io_err(path))
}

/// Reads a safetensors file into named arrays, converting to `F`.
pub fn read_tensor_map<F: Scalar>(path: &Path) -> Result<HashMap<String, ArrayD<F>>, CheckpointError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let st = SafeTensors::deserialize(&bytes).map_err(|e| CheckpointError::Container {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    let mut map = HashMap::new();
    for (name, view) in st.tensors() {
        if view.dtype() != Dtype::F32 {
            return Err(CheckpointError::Container {
                path: path.to_path_buf(),
                message: format!("tensor {name} has unsupported dtype {:?}", view.dtype()),
            });
        }
        let data = view.data();
        let values: Vec<F> = data
            .chunks_exact(4)
            .map(|c| F::from_f64(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(view.shape()), values).map_err(|e| {
            CheckpointError::Container {
                path: path.to_path_buf(),
                message: format!("tensor {name}: {e}"),
            }
        })?;
        map.insert(name.to_string(), arr);
    }
    Ok(map)
}

/// Rebuilds a model from a checkpoint directory. The stored config's
/// `pretrained` flag is ignored here: every parameter comes from the
/// checkpoint itself.
pub fn load_checkpoint(dir: &Path) -> Result<ExpertModel<f32>, CheckpointError> {
    let meta_path = dir.join(METADATA_FILE);
    let meta_bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    let metadata: CheckpointMetadata =
        serde_json::from_slice(&meta_bytes).map_err(|source| CheckpointError::Metadata {
            path: meta_path.clone(),
            source,
        })?;

    let build_config = BackboneConfig {
        pretrained: false,
        pretrained_weights: None,
        ..metadata.config.clone()
    };
    let mut model = build_backbone::<f32>(&build_config, metadata.kind)?;
    let map = read_tensor_map::<f32>(&dir.join(PARAMS_FILE))?;
    model.net.assign_named(&map, true, false)?;
    model.apply_freeze(&metadata.policy)?;
    model.config = metadata.config;
    Ok(model)
}

/// Reads only the metadata of a checkpoint.
pub fn read_metadata(dir: &Path) -> Result<CheckpointMetadata, CheckpointError> {
    let meta_path = dir.join(METADATA_FILE);
    let meta_bytes = fs::read(&meta_path).map_err(io_err(&meta_path))?;
    serde_json::from_slice(&meta_bytes).map_err(|source| CheckpointError::Metadata {
        path: meta_path,
        source,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FreezePolicy;
    use tempfile::tempdir;

    #[test]
    fn checkpoint_roundtrip_is_exact_and_byte_stable() {
        let cfg = BackboneConfig {
            input_size: 64,
            width_scale: 0.125,
            init_seed: 11,
            ..Default::default()
        };
        let mut model = build_backbone::<f32>(&cfg, ExpertKind::LensDetector).unwrap();
        model.apply_freeze(&FreezePolicy::standard()).unwrap();

        let dir = tempdir().unwrap();
        let ck1 = dir.path().join("ck1");
        let ck2 = dir.path().join("ck2");
        save_checkpoint(&model, &ck1).unwrap();
        save_checkpoint(&model, &ck2).unwrap();
        assert_eq!(
            fs::read(ck1.join(PARAMS_FILE)).unwrap(),
            fs::read(ck2.join(PARAMS_FILE)).unwrap()
        );

        let loaded = load_checkpoint(&ck1).unwrap();
        assert_eq!(loaded.kind, ExpertKind::LensDetector);
        assert_eq!(loaded.policy, FreezePolicy::standard());
        assert_eq!(loaded.config, cfg);
        let a = model.snapshot();
        let b = loaded.snapshot();
        assert_eq!(a.len(), b.len());
        for (name, arr) in &a {
            assert_eq!(arr, &b[name], "{name} differs after roundtrip");
        }
    }

    #[test]
    fn loading_a_missing_checkpoint_fails_cleanly() {
        let dir = tempdir().unwrap();
        assert!(load_checkpoint(&dir.path().join("nope")).is_err());
    }
}
