//! Checkpoint serialization: a JSON header describing config, training
//! progress and a tensor manifest, followed by raw little-endian f64 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ParamSet};

const MAGIC: &[u8; 8] = b"VBCKPT\x00\x01";
pub const FORMAT_VERSION: u32 = 1;

/// Everything about a training run except the tensors themselves.
/// `trainer` carries optimizer hyperparameters, scheduler state and the RNG
/// state as opaque JSON so the trainer can evolve without format changes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub config: ModelConfig,
    pub step: u64,
    pub epoch: u64,
    pub metric_history: Vec<f64>,
    pub vocab_checksum: String,
    #[serde(default)]
    pub trainer: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    /// Element offset into the f64 payload.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    meta: CheckpointMeta,
    manifest: Vec<TensorMeta>,
}

/// Write a checkpoint. Tensor order is preserved and becomes the manifest
/// order.
pub fn save_checkpoint(
    path: &Path,
    meta: &CheckpointMeta,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<()> {
    let mut manifest = Vec::with_capacity(tensors.len());
    let mut offset = 0usize;
    for (name, value) in tensors {
        manifest.push(TensorMeta {
            name: name.clone(),
            dtype: "f64".to_string(),
            shape: value.shape().to_vec(),
            offset,
        });
        offset += value.len();
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        meta: meta.clone(),
        manifest,
    };
    let header_bytes = serde_json::to_vec(&header)?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())?;
    w.write_all(&header_bytes)?;
    for (_, value) in tensors {
        for &x in value.iter() {
            w.write_all(&x.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Read a checkpoint back, validating magic, version, manifest offsets and
/// payload length.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointMeta, Vec<(String, ArrayD<f64>)>)> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let mut len_bytes = [0u8; 8];
    r.read_exact(&mut len_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header_len = u64::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    r.read_exact(&mut header_bytes)
        .map_err(|_| Error::Checkpoint(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(&header_bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: invalid header: {e}", path.display())))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported format version {}",
            path.display(),
            header.format_version
        )));
    }

    let mut expected = 0usize;
    for t in &header.manifest {
        if t.dtype != "f64" {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} has unsupported dtype {}",
                path.display(),
                t.name,
                t.dtype
            )));
        }
        if t.offset != expected {
            return Err(Error::Checkpoint(format!(
                "{}: tensor {} at offset {} but {} expected",
                path.display(),
                t.name,
                t.offset,
                expected
            )));
        }
        expected += t.shape.iter().product::<usize>();
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload)?;
    if payload.len() != expected * 8 {
        return Err(Error::Checkpoint(format!(
            "{}: payload is {} bytes but manifest requires {}",
            path.display(),
            payload.len(),
            expected * 8
        )));
    }

    let mut tensors = Vec::with_capacity(header.manifest.len());
    for t in &header.manifest {
        let n: usize = t.shape.iter().product();
        let start = t.offset * 8;
        let values: Vec<f64> = payload[start..start + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let array = ArrayD::from_shape_vec(t.shape.clone(), values)
            .map_err(|e| Error::Checkpoint(format!("{}: tensor {}: {e}", path.display(), t.name)))?;
        tensors.push((t.name.clone(), array));
    }
    Ok((header.meta, tensors))
}

/// Restore a parameter set from checkpoint tensors, requiring that every
/// expected parameter is present with the right shape. Extra tensors (for
/// example optimizer state) are ignored.
pub fn params_from_tensors(
    template: &ParamSet,
    tensors: &[(String, ArrayD<f64>)],
) -> Result<ParamSet> {
    let mut restored = ParamSet::new();
    for (name, expected) in template.iter() {
        let found = tensors
            .iter()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name}")))?;
        if found.1.shape() != expected.shape() {
            return Err(Error::Checkpoint(format!(
                "tensor {name} has shape {:?} but model expects {:?}",
                found.1.shape(),
                expected.shape()
            )));
        }
        restored.push(name, found.1.clone());
    }
    Ok(restored)
}
