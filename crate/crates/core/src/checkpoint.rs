//! Checkpoint container and training-metadata sidecar files.
//!
//! Layout (all little-endian):
//!
//! ```text
//! [u64 header_len][header_len bytes of UTF-8 JSON][payload]
//! ```
//!
//! The header maps each tensor name to `{"dtype": "F32", "shape": [..],
//! "data_offsets": [begin, end]}` with offsets relative to the payload start.
//! An optional `__metadata__` string map is tolerated on read and ignored.
//! Only `F32` tensors are accepted.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::de::{MapAccess, Visitor};
use serde::{Deserialize, Deserializer, Serialize};

use crate::error::{Error, Result};
use crate::params::{ParameterMap, TrainingMeta};

pub const CHECKPOINT_EXTENSION: &str = "ckpt";
pub const META_EXTENSION: &str = "meta.json";

const METADATA_KEY: &str = "__metadata__";
const F32_DTYPE: &str = "F32";

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct HeaderEntry {
    dtype: String,
    shape: Vec<usize>,
    data_offsets: [u64; 2],
}

/// Header entries in on-disk order; duplicate keys are an error rather than last-wins.
struct RawHeader(Vec<(String, serde_json::Value)>);

impl<'de> Deserialize<'de> for RawHeader {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        struct HeaderVisitor;

        impl<'de> Visitor<'de> for HeaderVisitor {
            type Value = RawHeader;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of tensor descriptors")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> std::result::Result<RawHeader, A::Error> {
                let mut seen = HashSet::new();
                let mut entries = Vec::new();
                while let Some((key, value)) = access.next_entry::<String, serde_json::Value>()? {
                    if !seen.insert(key.clone()) {
                        return Err(serde::de::Error::custom(format!("duplicate tensor name `{key}`")));
                    }
                    entries.push((key, value));
                }
                Ok(RawHeader(entries))
            }
        }

        deserializer.deserialize_map(HeaderVisitor)
    }
}

/// Serializes a map into the checkpoint byte layout.
pub fn encode_checkpoint(map: &ParameterMap<f32>) -> Vec<u8> {
    let mut header = BTreeMap::new();
    let mut offset = 0u64;
    for (name, tensor) in map.iter() {
        let bytes = 4 * tensor.len() as u64;
        header.insert(
            name.to_owned(),
            HeaderEntry {
                dtype: F32_DTYPE.to_owned(),
                shape: tensor.shape().to_vec(),
                data_offsets: [offset, offset + bytes],
            },
        );
        offset += bytes;
    }
    let mut header_bytes = serde_json::to_vec(&header).expect("header serialization cannot fail");
    // pad with spaces so the payload starts 8-byte aligned
    while header_bytes.len() % 8 != 0 {
        header_bytes.push(b' ');
    }

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for x in map.values() {
        out.extend_from_slice(&x.to_bits().to_le_bytes());
    }
    out
}

/// Parses checkpoint bytes. `origin` only labels errors.
pub fn decode_checkpoint(bytes: &[u8], origin: &Path) -> Result<ParameterMap<f32>> {
    let fail = |reason: String| Error::format(origin, reason);

    let prefix: [u8; 8] = bytes
        .get(..8)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| fail(format!("file is {} bytes, shorter than the 8-byte header length", bytes.len())))?;
    let header_len = u64::from_le_bytes(prefix);
    let rest = &bytes[8..];
    if header_len > rest.len() as u64 {
        return Err(fail(format!(
            "header length {header_len} exceeds the {} bytes that follow it",
            rest.len()
        )));
    }
    let (header_bytes, payload) = rest.split_at(header_len as usize);
    let header_text =
        std::str::from_utf8(header_bytes).map_err(|e| fail(format!("header is not UTF-8: {e}")))?;
    let RawHeader(raw) =
        serde_json::from_str(header_text).map_err(|e| fail(format!("header is not a valid JSON object: {e}")))?;

    let mut spans = Vec::with_capacity(raw.len());
    let mut map = ParameterMap::new();
    for (name, value) in raw {
        if name == METADATA_KEY {
            continue;
        }
        let entry: HeaderEntry =
            serde_json::from_value(value).map_err(|e| fail(format!("tensor `{name}`: bad descriptor: {e}")))?;
        if entry.dtype != F32_DTYPE {
            return Err(Error::UnsupportedDtype {
                name,
                dtype: entry.dtype,
            });
        }
        let [begin, end] = entry.data_offsets;
        let numel = entry
            .shape
            .iter()
            .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
            .ok_or_else(|| fail(format!("tensor `{name}`: shape overflows")))?;
        if end < begin || end - begin != numel.saturating_mul(4) {
            return Err(fail(format!(
                "tensor `{name}`: offsets [{begin}, {end}) do not hold {numel} F32 values"
            )));
        }
        if end > payload.len() as u64 {
            return Err(fail(format!(
                "tensor `{name}`: offsets [{begin}, {end}) run past the {}-byte payload",
                payload.len()
            )));
        }
        let data = payload[begin as usize..end as usize]
            .chunks_exact(4)
            .map(|c| f32::from_bits(u32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        map.insert(name.clone(), entry.shape, data)
            .map_err(|e| fail(e.to_string()))?;
        spans.push((begin, end, name));
    }

    spans.sort();
    for pair in spans.windows(2) {
        let (_, prev_end, ref prev) = pair[0];
        let (begin, _, ref next) = pair[1];
        if begin < prev_end {
            return Err(fail(format!("tensors `{prev}` and `{next}` have overlapping offsets")));
        }
    }
    Ok(map)
}

pub fn write_checkpoint(map: &ParameterMap<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file_atomic(path.as_ref(), &encode_checkpoint(map))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParameterMap<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}

/// Writes through a temporary file in the destination directory, then renames.
pub fn write_file_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

/// Sidecar JSON describing how a checkpoint was fine-tuned.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TrainingMetaFile {
    Explicit {
        task_name: String,
        learning_rates: Vec<f64>,
    },
    Constant {
        task_name: String,
        learning_rate: f64,
        steps: usize,
    },
}

impl TrainingMetaFile {
    pub fn task_name(&self) -> &str {
        match self {
            TrainingMetaFile::Explicit { task_name, .. } | TrainingMetaFile::Constant { task_name, .. } => task_name,
        }
    }

    /// Expands the constant-rate shorthand and validates the rates.
    pub fn to_meta(&self) -> Result<TrainingMeta> {
        match self {
            TrainingMetaFile::Explicit { learning_rates, .. } => TrainingMeta::new(learning_rates.clone()),
            TrainingMetaFile::Constant {
                learning_rate, steps, ..
            } => {
                if !(learning_rate.is_finite() && *learning_rate > 0.0) {
                    return Err(Error::NonPositiveRate {
                        step: 0,
                        rate: *learning_rate,
                    });
                }
                TrainingMeta::constant(*learning_rate, *steps)
            }
        }
    }
}

pub fn read_training_meta_file(path: impl AsRef<Path>) -> Result<TrainingMetaFile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| {
        Error::format(
            path,
            format!("expected {{task_name, learning_rates}} or {{task_name, learning_rate, steps}}: {e}"),
        )
    })
}

pub fn read_training_meta(path: impl AsRef<Path>) -> Result<TrainingMeta> {
    let path = path.as_ref();
    read_training_meta_file(path)?.to_meta().map_err(|e| match e {
        Error::EmptyInput(reason) => Error::format(path, reason),
        other => other,
    })
}

pub fn write_training_meta(path: impl AsRef<Path>, task_name: &str, meta: &TrainingMeta) -> Result<()> {
    let file = TrainingMetaFile::Explicit {
        task_name: task_name.to_owned(),
        learning_rates: meta.learning_rates().to_vec(),
    };
    let mut text = serde_json::to_string_pretty(&file).expect("meta serialization cannot fail");
    text.push('\n');
    write_file_atomic(path.as_ref(), text.as_bytes())
}
