//! Named-tensor binary container.
//!
//! Layout: an 8-byte little-endian unsigned header length, a UTF-8 JSON
//! header mapping tensor name to `{dtype, shape, offset, nbytes}`, then the
//! contiguous little-endian payload. Offsets are relative to the start of
//! the payload and assigned in ascending name order, so a given set of
//! tensors always serializes to identical bytes. Values are stored as `f32`
//! and widen losslessly back to the in-memory `f64`.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorMeta {
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    nbytes: usize,
}

/// Serializes named tensors to the container byte layout.
pub fn write_tensors(entries: &[(&str, &Tensor)]) -> Result<Vec<u8>> {
    let mut sorted: Vec<(&str, &Tensor)> = entries.to_vec();
    sorted.sort_by_key(|(name, _)| name.to_owned());
    for window in sorted.windows(2) {
        if window[0].0 == window[1].0 {
            return Err(Error::FormatInconsistent(format!(
                "duplicate tensor name `{}`",
                window[0].0
            )));
        }
    }
    let mut header = BTreeMap::new();
    let mut offset = 0usize;
    for (name, tensor) in &sorted {
        let nbytes = tensor.data().len() * 4;
        header.insert(
            name.to_string(),
            TensorMeta {
                dtype: "f32".to_string(),
                shape: tensor.shape().to_vec(),
                offset,
                nbytes,
            },
        );
        offset += nbytes;
    }
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(8 + header_json.len() + offset);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in &sorted {
        for &v in tensor.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Parses a container byte buffer back into named tensors.
pub fn read_tensors(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    if bytes.len() < 8 {
        return Err(Error::FormatTruncated(format!(
            "container of {} bytes is shorter than the 8-byte length prefix",
            bytes.len()
        )));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().unwrap()) as usize;
    if bytes.len() < 8 + header_len {
        return Err(Error::FormatTruncated(format!(
            "header claims {header_len} bytes but only {} remain",
            bytes.len() - 8
        )));
    }
    let header: BTreeMap<String, TensorMeta> =
        serde_json::from_slice(&bytes[8..8 + header_len]).map_err(|e| {
            Error::FormatInconsistent(format!("header is not valid JSON: {e}"))
        })?;
    let payload = &bytes[8 + header_len..];
    let expected_payload: usize = header.values().map(|m| m.nbytes).sum();
    if payload.len() < expected_payload {
        return Err(Error::FormatTruncated(format!(
            "payload holds {} bytes, header expects {expected_payload}",
            payload.len()
        )));
    }
    if payload.len() > expected_payload {
        return Err(Error::FormatInconsistent(format!(
            "payload holds {} bytes beyond the declared {expected_payload}",
            payload.len()
        )));
    }
    let mut out = BTreeMap::new();
    for (name, meta) in &header {
        if meta.dtype != "f32" {
            return Err(Error::FormatInconsistent(format!(
                "tensor `{name}` has unsupported dtype `{}`",
                meta.dtype
            )));
        }
        let count: usize = meta.shape.iter().product();
        if meta.nbytes != count * 4 {
            return Err(Error::FormatInconsistent(format!(
                "tensor `{name}` declares {} bytes for shape {:?}",
                meta.nbytes, meta.shape
            )));
        }
        let end = meta.offset.checked_add(meta.nbytes).ok_or_else(|| {
            Error::FormatInconsistent(format!("tensor `{name}` offset overflows"))
        })?;
        if end > payload.len() {
            return Err(Error::FormatTruncated(format!(
                "tensor `{name}` extends to byte {end} beyond the payload"
            )));
        }
        let mut data = Vec::with_capacity(count);
        for chunk in payload[meta.offset..end].chunks_exact(4) {
            let v = f32::from_le_bytes(chunk.try_into().unwrap()) as f64;
            if !v.is_finite() {
                return Err(Error::FormatInconsistent(format!(
                    "tensor `{name}` contains non-finite values"
                )));
            }
            data.push(v);
        }
        out.insert(name.clone(), Tensor::new(meta.shape.clone(), data)?);
    }
    Ok(out)
}

pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<()> {
    let bytes = write_tensors(entries)?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&bytes)?;
    Ok(())
}

pub fn load_tensors(path: &Path) -> Result<BTreeMap<String, Tensor>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    read_tensors(&bytes)
}
