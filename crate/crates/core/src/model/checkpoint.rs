//! Versioned model container.
//!
//! Layout: 8-byte magic, little-endian u32 format version, u64 manifest
//! length, a JSON manifest (config plus tensor index), then every tensor as
//! raw little-endian f64 in manifest order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::params::{ModelConfig, ModelParams, NamedTensors};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"ATNMODEL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: ModelConfig,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    /// Byte offset into the data section.
    offset: usize,
}

pub fn to_bytes(params: &ModelParams) -> Result<Vec<u8>> {
    let named = params.named();
    let mut offset = 0;
    let manifest = Manifest {
        config: params.config.clone(),
        tensors: named
            .iter()
            .map(|(n, t, _)| {
                let e = TensorEntry {
                    name: n.clone(),
                    shape: t.shape().to_vec(),
                    offset,
                };
                offset += 8 * t.len();
                e
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Serialization(e.to_string()))?;
    let mut out = Vec::with_capacity(json.len() + 20 + 8 * params.trainable_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t, _) in &named {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelParams> {
    let bad = |m: &str| Error::Serialization(format!("model container: {m}"));
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic header"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(bad(&format!("unsupported format version {version}")));
    }
    let mlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = &bytes[20..];
    if body.len() < mlen {
        return Err(bad("truncated manifest"));
    }
    let manifest: Manifest =
        serde_json::from_slice(&body[..mlen]).map_err(|e| bad(&e.to_string()))?;
    let mut params = ModelParams::zeros(&manifest.config)?;
    let data = &body[mlen..];
    let mut entries = manifest.tensors.iter();
    let mut failure = None;
    let mut consumed = 0;
    params.visit_mut("", &mut |name, t, _| {
        if failure.is_some() {
            return;
        }
        match entries.next() {
            Some(e) if e.name == name && e.shape == t.shape() => {
                let end = e.offset + t.len() * 8;
                if data.len() < end {
                    failure = Some(bad("truncated tensor data"));
                    return;
                }
                for (v, chunk) in t.data_mut().iter_mut().zip(data[e.offset..end].chunks_exact(8)) {
                    *v = f64::from_le_bytes(chunk.try_into().unwrap());
                }
                consumed = consumed.max(end);
            }
            Some(e) => {
                failure = Some(bad(&format!(
                    "tensor '{}' {:?} does not match expected '{name}' {:?}",
                    e.name,
                    e.shape,
                    t.shape()
                )))
            }
            None => failure = Some(bad(&format!("missing tensor '{name}'"))),
        }
    });
    if let Some(e) = failure {
        return Err(e);
    }
    if entries.next().is_some() || consumed != data.len() {
        return Err(bad("trailing tensors or data"));
    }
    Ok(params)
}

pub fn save(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = to_bytes(params)?;
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelParams> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| Error::Context {
        context: path.display().to_string(),
        source: Box::new(e),
    })
}

/// Copy one tensor into a parameter set by name.
pub fn set_tensor(params: &mut ModelParams, name: &str, value: Tensor) -> Result<()> {
    let mut value = Some(value);
    let mut err = None;
    params.visit_mut("", &mut |n, t, _| {
        if n == name {
            if let Some(v) = value.take() {
                if v.shape() == t.shape() {
                    *t = v;
                } else {
                    err = Some(Error::shape(format!("{name}: {:?} vs {:?}", v.shape(), t.shape())));
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e);
    }
    if value.is_some() {
        return Err(Error::invalid(format!("no tensor named '{name}'")));
    }
    Ok(())
}
