//! Round message serialization.
//!
//! Client-server exchanges move through an explicit byte format even though
//! the server is in-process: length-prefixed JSON header (round, task, client,
//! sample count) followed by a named-tensor payload in the checkpoint format.
//! The payload carries f32 values, so a broadcast-decode round trip quantizes
//! parameters identically for every receiver.

use crate::checkpoint::{decode_named_tensors, encode_named_tensors};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundHeader {
    pub round: usize,
    pub task: usize,
    /// Sender id; the server uses `usize::MAX`.
    pub client_id: usize,
    /// Local sample count backing the payload (aggregation weight).
    pub n_l: usize,
}

#[derive(Debug, Clone)]
pub struct RoundMessage {
    pub header: RoundHeader,
    pub tensors: Vec<(String, Tensor)>,
}

impl RoundMessage {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(&self.header)?;
        let payload = encode_named_tensors(&self.tensors);
        let mut out = Vec::with_capacity(8 + header.len() + payload.len());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 8 {
            return Err(Error::Format("message shorter than length prefix".into()));
        }
        let len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
        let rest = &bytes[8..];
        if rest.len() < len {
            return Err(Error::Format("truncated message header".into()));
        }
        let header: RoundHeader = serde_json::from_slice(&rest[..len])?;
        let tensors = decode_named_tensors(&rest[len..])?;
        Ok(RoundMessage { header, tensors })
    }
}
