//! Self-describing binary checkpoint container.
//!
//! Layout: magic `MTAF`, format version, a JSON header (model config,
//! sampler seed/step, tensor directory), then raw little-endian f64 data.
//! Raw bytes round-trip bit-exactly, which the resume and determinism
//! guarantees depend on.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::params::Gradients;
use super::{ModelConfig, Network};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"MTAF";
const VERSION: u32 = 1;
const VELOCITY_PREFIX: &str = "velocity.";

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Element offset into the data section.
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    sampler_seed: u64,
    step: u64,
    tensors: Vec<TensorMeta>,
}

/// A checkpoint read back from disk.
pub struct LoadedCheckpoint {
    pub network: Network,
    /// Optimizer velocity, present when the checkpoint was written mid-run.
    pub velocity: Option<Gradients>,
    pub sampler_seed: u64,
    pub step: u64,
}

fn err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

/// Write `network` (and optionally the optimizer velocity) to `path`.
pub fn save_checkpoint(
    path: &Path,
    network: &Network,
    velocity: Option<&Gradients>,
    sampler_seed: u64,
    step: u64,
) -> Result<()> {
    let mut tensors = Vec::new();
    let mut data: Vec<f64> = Vec::new();

    let mut push = |name: String, shape: &[usize], values: &[f64], data: &mut Vec<f64>| {
        tensors.push(TensorMeta {
            name,
            shape: shape.to_vec(),
            offset: data.len() as u64,
            len: values.len() as u64,
        });
        data.extend_from_slice(values);
    };

    for param in network.params.iter() {
        push(
            param.name.clone(),
            param.value.shape(),
            param.value.as_slice().expect("standard layout"),
            &mut data,
        );
    }
    if let Some(vel) = velocity {
        for (id, tensor) in vel.tensors.iter().enumerate() {
            push(
                format!("{VELOCITY_PREFIX}{}", network.params.name(id)),
                tensor.shape(),
                tensor.as_slice().expect("standard layout"),
                &mut data,
            );
        }
    }

    let header = Header {
        model: network.cfg.clone(),
        sampler_seed,
        step,
        tensors,
    };
    let header_json = serde_json::to_vec(&header).map_err(|e| err(format!("header: {e}")))?;

    let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::with_capacity(16 + header_json.len() + data.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for v in &data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Read a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 16 || &bytes[0..4] != MAGIC {
        return Err(err(format!("{}: not a checkpoint file", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let header_end = 16 + header_len;
    if bytes.len() < header_end {
        return Err(err("truncated header"));
    }
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| err(format!("header: {e}")))?;

    let data_bytes = &bytes[header_end..];
    let read_tensor = |meta: &TensorMeta| -> Result<ArrayD<f64>> {
        let start = meta.offset as usize * 8;
        let end = start + meta.len as usize * 8;
        if end > data_bytes.len() {
            return Err(err(format!("tensor {} out of bounds", meta.name)));
        }
        let values: Vec<f64> = data_bytes[start..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&meta.shape), values)
            .map_err(|e| err(format!("tensor {}: {e}", meta.name)))
    };

    // Rebuild the layout from the config, then fill parameters by name.
    let mut network = Network::init(header.model.clone(), 0)?;
    let mut velocity = network.params.zeros_like();
    let mut saw_velocity = false;

    let names: Vec<String> = network.params.iter().map(|p| p.name.clone()).collect();
    for meta in &header.tensors {
        let tensor = read_tensor(meta)?;
        if let Some(stripped) = meta.name.strip_prefix(VELOCITY_PREFIX) {
            let id = names
                .iter()
                .position(|n| n == stripped)
                .ok_or_else(|| err(format!("unknown velocity tensor {}", meta.name)))?;
            *velocity.get_mut(id) = tensor;
            saw_velocity = true;
        } else {
            let id = names
                .iter()
                .position(|n| n == &meta.name)
                .ok_or_else(|| err(format!("unknown tensor {}", meta.name)))?;
            if network.params.get(id).shape() != tensor.shape() {
                return Err(err(format!(
                    "tensor {} shape {:?} does not match layout {:?}",
                    meta.name,
                    tensor.shape(),
                    network.params.get(id).shape()
                )));
            }
            *network.params.get_mut(id) = tensor;
        }
    }

    Ok(LoadedCheckpoint {
        network,
        velocity: saw_velocity.then_some(velocity),
        sampler_seed: header.sampler_seed,
        step: header.step,
    })
}
