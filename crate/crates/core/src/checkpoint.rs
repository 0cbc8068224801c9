//! Self-describing checkpoints: a safetensors archive of every parameter
//! (by module path) plus the architecture record and training progress in
//! the header metadata.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::transform::ArchConfig;

pub const FORMAT_NAME: &str = "ntscc-checkpoint";
pub const FORMAT_VERSION: u32 = 1;

/// Training progress carried across resumes.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    pub iteration: u64,
    pub seed: u64,
    /// Free-form provenance (e.g. "base", "versatile").
    pub stage: String,
}

pub struct Checkpoint {
    pub store: ParamStore,
    pub arch: ArchConfig,
    pub state: TrainState,
}

fn st_dtype(d: DType) -> Result<StDtype> {
    match d {
        DType::F32 => Ok(StDtype::F32),
        DType::F64 => Ok(StDtype::F64),
        other => Err(Error::Checkpoint(format!("unsupported dtype {other:?}"))),
    }
}

/// Serializes to bytes; tensors are written in name order.
pub fn to_bytes(store: &ParamStore, arch: &ArchConfig, state: &TrainState) -> Result<Vec<u8>> {
    let snap = store.snapshot()?;
    let mut raw: Vec<(String, Vec<usize>, Vec<u8>)> = Vec::with_capacity(snap.len());
    let dtype = st_dtype(store.dtype())?;
    for (name, t) in &snap {
        let bytes = match store.dtype() {
            DType::F32 => t
                .flatten_all()?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
            _ => t
                .flatten_all()?
                .to_vec1::<f64>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        };
        raw.push((name.clone(), t.dims().to_vec(), bytes));
    }
    let views = raw
        .iter()
        .map(|(n, shape, b)| {
            TensorView::new(dtype, shape.clone(), b)
                .map(|v| (n.clone(), v))
                .map_err(|e| Error::Checkpoint(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut meta = HashMap::new();
    meta.insert("format".to_string(), FORMAT_NAME.to_string());
    meta.insert("format_version".to_string(), FORMAT_VERSION.to_string());
    meta.insert(
        "arch".to_string(),
        serde_json::to_string(arch).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    meta.insert(
        "train_state".to_string(),
        serde_json::to_string(state).map_err(|e| Error::Checkpoint(e.to_string()))?,
    );
    safetensors::serialize(views, &Some(meta)).map_err(|e| Error::Checkpoint(e.to_string()))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    let (_, header) = safetensors::SafeTensors::read_metadata(bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let meta = header
        .metadata()
        .as_ref()
        .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
    if meta.get("format").map(String::as_str) != Some(FORMAT_NAME) {
        return Err(Error::Checkpoint("not an ntscc checkpoint".into()));
    }
    let version: u32 = meta
        .get("format_version")
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| Error::Checkpoint("missing format_version".into()))?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version} is not supported (expected {FORMAT_VERSION})"
        )));
    }
    let arch: ArchConfig = serde_json::from_str(
        meta.get("arch")
            .ok_or_else(|| Error::Checkpoint("missing arch record".into()))?,
    )
    .map_err(|e| Error::Checkpoint(format!("arch record: {e}")))?;
    arch.validate()?;
    let state: TrainState = match meta.get("train_state") {
        Some(s) => {
            serde_json::from_str(s).map_err(|e| Error::Checkpoint(format!("train state: {e}")))?
        }
        None => TrainState::default(),
    };
    let st = safetensors::SafeTensors::deserialize(bytes)
        .map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut tensors = BTreeMap::new();
    let mut dtype = DType::F32;
    for (name, view) in st.tensors() {
        let shape = view.shape().to_vec();
        let data = view.data();
        let t = match view.dtype() {
            StDtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            StDtype::F64 => {
                dtype = DType::F64;
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(Error::Checkpoint(format!("tensor {name}: dtype {other:?}"))),
        };
        tensors.insert(name, t);
    }
    Ok(Checkpoint {
        store: ParamStore::from_tensors(tensors, dtype)?,
        arch,
        state,
    })
}

pub fn save(
    path: impl AsRef<Path>,
    store: &ParamStore,
    arch: &ArchConfig,
    state: &TrainState,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = to_bytes(store, arch, state)?;
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    // write-then-rename so a crash never leaves a truncated checkpoint
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
