//! Named-tensor wire and checkpoint format.
//!
//! Layout: a little-endian u64 header length, a JSON header listing tensor
//! names and shapes in order, then each tensor's values as little-endian f32.
//! The same encoding carries parameter checkpoints, round messages, and
//! memory snapshots.

use crate::error::{Error, Result};
use crate::model::ParamVector;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Debug, Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    tensors: Vec<TensorMeta>,
}

pub fn encode_named_tensors(tensors: &[(String, Tensor)]) -> Vec<u8> {
    let header = Header {
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorMeta {
                name: name.clone(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(8 + header_json.len());
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, t) in tensors {
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_named_tensors(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < 8 {
        return Err(Error::Format("truncated header length".into()));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    let body_start = 8 + header_len;
    if bytes.len() < body_start {
        return Err(Error::Format("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[8..body_start])?;
    let total: usize = header
        .tensors
        .iter()
        .map(|m| m.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != body_start + total * 4 {
        return Err(Error::Format(format!(
            "payload is {} bytes, expected {}",
            bytes.len() - body_start,
            total * 4
        )));
    }
    let mut out = Vec::with_capacity(header.tensors.len());
    let mut cursor = body_start;
    for meta in header.tensors {
        let n: usize = meta.shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            let v = f32::from_le_bytes(bytes[cursor..cursor + 4].try_into().unwrap());
            data.push(v as f64);
            cursor += 4;
        }
        out.push((meta.name, Tensor::new(meta.shape, data)));
    }
    Ok(out)
}

pub fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    std::fs::write(path, encode_named_tensors(&params.to_named_tensors()))?;
    Ok(())
}

pub fn load_params(path: &Path) -> Result<ParamVector> {
    let bytes = std::fs::read(path)?;
    Ok(ParamVector::new(decode_named_tensors(&bytes)?))
}

/// Round a tensor through the wire's f32 precision. Broadcasting a model
/// through this keeps every participant byte-identical regardless of local
/// f64 history.
pub fn quantize(t: &Tensor) -> Tensor {
    t.map(|v| v as f32 as f64)
}
