//! Tensor container: one JSON header line, then raw little-endian blobs in
//! header order.

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;
use crate::model::encoder::{ModelConfig, ModelParams, PARAM_NAMES};
use crate::numcore::Tensor;

pub const CHECKPOINT_FORMAT: &str = "scriptbridge-checkpoint/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    F64,
    I8,
}

impl DType {
    pub fn width(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::I8 => 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobHeader {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
}

impl BlobHeader {
    pub fn byte_len(&self) -> usize {
        self.shape.iter().product::<usize>() * self.dtype.width()
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ContainerHeader<M> {
    format: String,
    meta: M,
    tensors: Vec<BlobHeader>,
}

pub fn f64_blob(name: &str, t: &Tensor) -> (BlobHeader, Vec<u8>) {
    let bytes = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
    (
        BlobHeader {
            name: name.to_string(),
            dtype: DType::F64,
            shape: t.shape().to_vec(),
        },
        bytes,
    )
}

pub fn blob_to_tensor(header: &BlobHeader, bytes: &[u8]) -> Result<Tensor> {
    if header.dtype != DType::F64 {
        return Err(Error::Checkpoint(format!(
            "{} is not an f64 tensor",
            header.name
        )));
    }
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(header.shape.clone(), data)
}

pub fn encode_container<M: Serialize>(
    format: &str,
    meta: &M,
    blobs: &[(BlobHeader, Vec<u8>)],
) -> Result<Vec<u8>> {
    for (h, b) in blobs {
        if h.byte_len() != b.len() {
            return Err(Error::Checkpoint(format!(
                "{}: {} bytes for shape {:?}",
                h.name,
                b.len(),
                h.shape
            )));
        }
    }
    let header = ContainerHeader {
        format: format.to_string(),
        meta,
        tensors: blobs.iter().map(|(h, _)| h.clone()).collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, b) in blobs {
        out.extend_from_slice(b);
    }
    Ok(out)
}

pub fn decode_container<M: DeserializeOwned>(
    format: &str,
    bytes: &[u8],
) -> Result<(M, Vec<(BlobHeader, Vec<u8>)>)> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("missing header line".into()))?;
    let header: ContainerHeader<M> = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    if header.format != format {
        return Err(Error::Checkpoint(format!(
            "format `{}`, expected `{format}`",
            header.format
        )));
    }
    let mut pos = nl + 1;
    let mut blobs = Vec::with_capacity(header.tensors.len());
    for h in header.tensors {
        let end = pos + h.byte_len();
        let chunk = bytes.get(pos..end).ok_or_else(|| {
            Error::Checkpoint(format!("{} truncated at byte {}", h.name, bytes.len()))
        })?;
        blobs.push((h, chunk.to_vec()));
        pos = end;
    }
    if pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - pos
        )));
    }
    Ok((header.meta, blobs))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub param_count: usize,
    /// Free-form tag such as `stage1`.
    pub label: String,
}

pub fn encode_checkpoint(params: &ModelParams, cfg: &ModelConfig, label: &str) -> Result<Vec<u8>> {
    params.check_shapes(cfg)?;
    let meta = CheckpointMeta {
        model: *cfg,
        param_count: params.param_count(),
        label: label.to_string(),
    };
    let blobs: Vec<_> = PARAM_NAMES
        .iter()
        .zip(params.tensors())
        .map(|(n, t)| f64_blob(n, t))
        .collect();
    encode_container(CHECKPOINT_FORMAT, &meta, &blobs)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(CheckpointMeta, ModelParams)> {
    let (meta, blobs): (CheckpointMeta, _) = decode_container(CHECKPOINT_FORMAT, bytes)?;
    meta.model.validate()?;
    let mut tensors = Vec::with_capacity(blobs.len());
    for ((h, b), want) in blobs.iter().zip(PARAM_NAMES) {
        if h.name != want {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` where `{want}` expected",
                h.name
            )));
        }
        tensors.push(blob_to_tensor(h, b)?);
    }
    let params = ModelParams::from_tensors(tensors, &meta.model)?;
    Ok((meta, params))
}

pub fn save_checkpoint(
    path: &Path,
    params: &ModelParams,
    cfg: &ModelConfig,
    label: &str,
) -> Result<()> {
    fsio::write_atomic(path, &encode_checkpoint(params, cfg, label)?)
}

pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, ModelParams)> {
    decode_checkpoint(&fsio::read(path)?).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}
