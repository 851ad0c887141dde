//! Checkpoint file: `u64` little-endian header length, a JSON header listing
//! every tensor (name, shape, dtype, byte offset into the blob section), then
//! the raw little-endian fp32 blobs.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Result, SarError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
    pub nbytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub metadata: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

const FORMAT: &str = "sar-checkpoint-v1";

pub fn write_checkpoint<W: Write>(
    mut w: W,
    metadata: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let mut offset = 0u64;
    let entries = tensors
        .iter()
        .map(|(name, t)| {
            let nbytes = (t.len() * 4) as u64;
            let e = TensorEntry {
                name: name.clone(),
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset,
                nbytes,
            };
            offset += nbytes;
            e
        })
        .collect();
    let header = CheckpointHeader {
        format: FORMAT.into(),
        metadata,
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    w.write_all(&(json.len() as u64).to_le_bytes())?;
    w.write_all(&json)?;
    let mut buf = Vec::with_capacity(offset as usize);
    for (_, t) in tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let len = u64::from_le_bytes(len) as usize;
    if len > 1 << 30 {
        return Err(SarError::Checkpoint(format!("header length {len} is implausible")));
    }
    let mut json = vec![0u8; len];
    r.read_exact(&mut json)?;
    let header: CheckpointHeader = serde_json::from_slice(&json)?;
    if header.format != FORMAT {
        return Err(SarError::Checkpoint(format!("unknown format {:?}", header.format)));
    }
    let mut blob = Vec::new();
    r.read_to_end(&mut blob)?;
    let mut out = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        if e.dtype != "f32" {
            return Err(SarError::Checkpoint(format!("{}: unsupported dtype {}", e.name, e.dtype)));
        }
        let (start, end) = (e.offset as usize, (e.offset + e.nbytes) as usize);
        if end > blob.len() || e.nbytes as usize != e.shape.iter().product::<usize>() * 4 {
            return Err(SarError::Checkpoint(format!("{}: blob out of bounds", e.name)));
        }
        let data = blob[start..end]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        out.push((e.name, Tensor::new(e.shape, data)?));
    }
    Ok((header.metadata, out))
}

pub fn save_checkpoint(
    path: &Path,
    metadata: serde_json::Value,
    tensors: &[(String, &Tensor)],
) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, metadata, tensors)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let file = std::fs::File::open(path)?;
    read_checkpoint(std::io::BufReader::new(file))
}
