//! Named-array archives (safetensors) with string metadata.

use std::collections::HashMap;
use std::path::Path;

use bag_autograd::Tensor;
use safetensors::tensor::TensorView;
use safetensors::{Dtype, SafeTensors};

use crate::error::{BagError, Result};

pub struct Archive {
    pub metadata: HashMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

fn corrupt(path: &Path, what: impl std::fmt::Display) -> BagError {
    BagError::CorruptCheckpoint(format!("{}: {what}", path.display()))
}

/// Decodes an archive held in memory. F64, F32 and F16 arrays are accepted.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Archive> {
    let (_, meta) = SafeTensors::read_metadata(bytes).map_err(|e| corrupt(path, e))?;
    let st = SafeTensors::deserialize(bytes).map_err(|e| corrupt(path, e))?;
    let mut tensors = Vec::new();
    for (name, view) in st.tensors() {
        let raw = view.data();
        let data: Vec<f64> = match view.dtype() {
            Dtype::F64 => raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            Dtype::F32 => raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            Dtype::F16 => raw
                .chunks_exact(2)
                .map(|c| f16_to_f64(u16::from_le_bytes([c[0], c[1]])))
                .collect(),
            other => return Err(corrupt(path, format!("array {name} has unsupported dtype {other:?}"))),
        };
        tensors.push((name, Tensor::from_vec(data, view.shape())));
    }
    tensors.sort_by(|a, b| a.0.cmp(&b.0));
    Ok(Archive {
        metadata: meta.metadata().clone().unwrap_or_default(),
        tensors,
    })
}

pub fn read(path: &Path) -> Result<Archive> {
    let bytes = std::fs::read(path).map_err(|e| BagError::io(path, e))?;
    decode(&bytes, path)
}

/// Writes f64 arrays; the file is replaced atomically.
pub fn write<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
    metadata: HashMap<String, String>,
) -> Result<()> {
    let encoded: Vec<(&str, Vec<usize>, Vec<u8>)> = tensors
        .into_iter()
        .map(|(n, t)| {
            (
                n,
                t.shape().to_vec(),
                t.data().iter().flat_map(|v| v.to_le_bytes()).collect(),
            )
        })
        .collect();
    let views = encoded
        .iter()
        .map(|(n, shape, bytes)| {
            Ok((
                *n,
                TensorView::new(Dtype::F64, shape.clone(), bytes).map_err(|e| corrupt(path, e))?,
            ))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut bytes = safetensors::serialize(views, Some(metadata)).map_err(|e| corrupt(path, e))?;
    canonicalize_header(&mut bytes).map_err(|e| corrupt(path, e))?;
    let tmp = path.with_extension("partial");
    std::fs::write(&tmp, bytes).map_err(|e| BagError::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| BagError::io(path, e))
}

/// Rewrites the JSON header with sorted keys. The metadata map is hashed with
/// a random seed, so without this equal archives could differ byte-wise.
fn canonicalize_header(bytes: &mut [u8]) -> std::result::Result<(), String> {
    let len = bytes
        .get(..8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .ok_or("short archive")?;
    let header = bytes.get_mut(8..8 + len).ok_or("header past end")?;
    let value: serde_json::Value = serde_json::from_slice(header).map_err(|e| e.to_string())?;
    let sorted = serde_json::to_vec(&value).map_err(|e| e.to_string())?;
    if sorted.len() > len {
        return Err(format!("sorted header grew from {len} to {} bytes", sorted.len()));
    }
    header[..sorted.len()].copy_from_slice(&sorted);
    header[sorted.len()..].fill(b' ');
    Ok(())
}

fn f16_to_f64(h: u16) -> f64 {
    let sign = if h >> 15 == 1 { -1.0 } else { 1.0 };
    let exp = ((h >> 10) & 0x1f) as i32;
    let frac = (h & 0x3ff) as f64;
    match exp {
        0 => sign * frac * 2f64.powi(-24),
        31 if frac == 0.0 => sign * f64::INFINITY,
        31 => f64::NAN,
        _ => sign * (1.0 + frac / 1024.0) * 2f64.powi(exp - 15),
    }
}
