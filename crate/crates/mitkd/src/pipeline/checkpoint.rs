//! Binary model checkpoints.
//!
//! Layout: 4-byte magic `MITK`, one version byte (1), a little-endian u32
//! length-prefixed UTF-8 JSON header (model config, head metadata, optional
//! provenance, ordered tensor directory of name/shape), then the raw
//! little-endian f64 payloads in directory order. Roundtrips are bit-exact.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{EncoderModel, HeadInfo, ModelConfig, ParamSet};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"MITK";
pub const VERSION: u8 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    heads: BTreeMap<String, HeadInfo>,
    provenance: Option<String>,
    tensors: Vec<TensorEntry>,
}

pub fn save_checkpoint(model: &EncoderModel, provenance: Option<&str>, path: &Path) -> Result<()> {
    let header = Header {
        config: model.config.clone(),
        heads: model.heads.clone(),
        provenance: provenance.map(str::to_string),
        tensors: model
            .params
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(header_json.len() + model.params.numel() * 8 + 16);
    out.extend_from_slice(&MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(header_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (_, tensor) in model.params.iter() {
        for v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&out).map_err(|e| Error::io(path, e))?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(EncoderModel, Option<String>)> {
    if !path.exists() {
        return Err(Error::MissingPrerequisite { path: path.to_path_buf() });
    }
    let mut file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path, e))?;
    if bytes.len() < 9 {
        return Err(Error::Format("checkpoint shorter than its fixed header".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(Error::Format(format!(
            "bad magic {:02x?}, expected {MAGIC:02x?}",
            &bytes[0..4]
        )));
    }
    if bytes[4] != VERSION {
        return Err(Error::Format(format!(
            "unsupported version {}, expected {VERSION}",
            bytes[4]
        )));
    }
    let header_len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    if bytes.len() < 9 + header_len {
        return Err(Error::Integrity("truncated JSON header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[9..9 + header_len])?;
    let mut offset = 9 + header_len;
    let mut params = ParamSet::default();
    for entry in &header.tensors {
        let numel: usize = entry.shape.iter().product();
        let end = offset + numel * 8;
        if bytes.len() < end {
            return Err(Error::Integrity(format!(
                "truncated payload for tensor {} (need {} bytes, have {})",
                entry.name,
                numel * 8,
                bytes.len().saturating_sub(offset)
            )));
        }
        let data: Vec<f64> = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.insert(&entry.name, Tensor::new(entry.shape.clone(), data)?);
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Integrity(format!(
            "{} trailing bytes after payload",
            bytes.len() - offset
        )));
    }
    Ok((
        EncoderModel {
            config: header.config,
            params,
            heads: header.heads,
        },
        header.provenance,
    ))
}
