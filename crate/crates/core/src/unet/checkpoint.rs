//! Binary checkpoint format.
//!
//! ```text
//! "UNSE"              4 bytes magic
//! version             u16 little-endian
//! header_len          u32 little-endian
//! header              header_len bytes of UTF-8 JSON
//! tensors             f32 little-endian, concatenated in header order
//! ```
//!
//! The header carries the model config, provenance, free-form metadata and
//! a `params` table of `{name, shape, offset}` where `offset` is the byte
//! offset of the tensor inside the data section.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelParams, Provenance, UNetConfig};
use crate::error::{Error, Result};
use crate::fsutil::write_atomic;
use crate::tensor::{Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"UNSE";
pub const FORMAT_VERSION: u16 = 1;

/// Free-form values stored alongside the parameters (e.g. validation dice).
pub type Metadata = BTreeMap<String, serde_json::Value>;

#[derive(Serialize, Deserialize)]
struct Header {
    config: UNetConfig,
    provenance: Provenance,
    #[serde(default)]
    metadata: Metadata,
    params: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

pub fn save_checkpoint<T: Scalar>(model: &ModelParams<T>, path: impl AsRef<Path>) -> Result<()> {
    save_checkpoint_with_metadata(model, &Metadata::new(), path)
}

pub fn save_checkpoint_with_metadata<T: Scalar>(
    model: &ModelParams<T>,
    metadata: &Metadata,
    path: impl AsRef<Path>,
) -> Result<()> {
    write_atomic(path.as_ref(), &encode(model, metadata)?)
}

fn encode<T: Scalar>(model: &ModelParams<T>, metadata: &Metadata) -> Result<Vec<u8>> {
    let mut offset = 0;
    let params = model
        .iter()
        .map(|(name, t)| {
            let e = Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                offset,
            };
            offset += 4 * t.numel();
            e
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        config: *model.config(),
        provenance: model.provenance(),
        metadata: metadata.clone(),
        params,
    })?;
    let mut out = Vec::with_capacity(10 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for (_, t) in model.iter() {
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    Ok(out)
}

/// Reads a checkpoint together with its metadata.
pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(ModelParams<f32>, Metadata)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile { path: path.to_path_buf() },
        _ => Error::Io(e),
    })?;
    decode(&bytes)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams<f32>> {
    Ok(read_checkpoint(path)?.0)
}

/// Loads a checkpoint that must match `expected` key for key.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &UNetConfig) -> Result<ModelParams<f32>> {
    let model = load_checkpoint(path)?;
    let found: BTreeMap<&str, &[usize]> = model.iter().map(|(n, t)| (n, t.shape())).collect();
    let schema = expected.schema();
    for (name, shape) in &schema {
        match found.get(name.as_str()) {
            None => {
                return Err(Error::SchemaMismatch {
                    key: name.clone(),
                    reason: "missing".into(),
                })
            }
            Some(s) if *s != shape.as_slice() => {
                return Err(Error::SchemaMismatch {
                    key: name.clone(),
                    reason: format!("shape {s:?}, expected {shape:?}"),
                })
            }
            _ => {}
        }
    }
    if let Some((extra, _)) = model.iter().find(|(n, _)| !schema.iter().any(|(s, _)| s == n)) {
        return Err(Error::SchemaMismatch {
            key: extra.to_string(),
            reason: "not part of the expected schema".into(),
        });
    }
    ModelParams::from_parts(*expected, model.provenance(), model.params)
}

fn take<'a>(bytes: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    let end = at
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Truncated(format!("{what}: need {n} bytes at offset {at}, file has {}", bytes.len())))?;
    let s = &bytes[*at..end];
    *at = end;
    Ok(s)
}

fn decode(bytes: &[u8]) -> Result<(ModelParams<f32>, Metadata)> {
    let mut at = 0;
    let magic: [u8; 4] = take(bytes, &mut at, 4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(Error::BadMagic { found: magic });
    }
    let version = u16::from_le_bytes(take(bytes, &mut at, 2, "version")?.try_into().unwrap());
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found: version,
            expected: FORMAT_VERSION,
        });
    }
    let len = u32::from_le_bytes(take(bytes, &mut at, 4, "header length")?.try_into().unwrap()) as usize;
    let header: Header = serde_json::from_slice(take(bytes, &mut at, len, "header")?)
        .map_err(|e| Error::Header(e.to_string()))?;
    let data = &bytes[at..];
    let mut params = Vec::with_capacity(header.params.len());
    let mut expected_offset = 0;
    for e in header.params {
        if e.offset != expected_offset {
            return Err(Error::Header(format!(
                "tensor `{}` at offset {}, expected {expected_offset}",
                e.name, e.offset
            )));
        }
        let numel: usize = e.shape.iter().product();
        let mut cursor = e.offset;
        let raw = take(data, &mut cursor, 4 * numel, &e.name)?;
        expected_offset = cursor;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        params.push((e.name, Tensor::new(e.shape, values)?));
    }
    if expected_offset != data.len() {
        return Err(Error::Header(format!(
            "{} trailing bytes after the last tensor",
            data.len() - expected_offset
        )));
    }
    Ok((ModelParams::from_parts(header.config, header.provenance, params)?, header.metadata))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::unet::build;

    #[test]
    fn encode_starts_with_magic_and_version() {
        let m = build::<f32>(UNetConfig::noise(1, 2, 1), 0).unwrap();
        let bytes = encode(&m, &Metadata::new()).unwrap();
        assert_eq!(&bytes[..4], b"UNSE");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), FORMAT_VERSION);
        let (back, _) = decode(&bytes).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn truncation_is_detected() {
        let m = build::<f32>(UNetConfig::noise(1, 2, 1), 0).unwrap();
        let bytes = encode(&m, &Metadata::new()).unwrap();
        for cut in [3, 8, 20, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Truncated(_))), "cut {cut}");
        }
    }
}
