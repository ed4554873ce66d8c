//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DCKP"  u32 version  u64 header_len  header (JSON)  f64 data...
//! ```
//!
//! The header holds the model config, the vocabulary and the name and shape
//! of every array, in the order the raw data follows. The file length must
//! match the header exactly, so a truncated file is rejected before any
//! array is built.

use std::path::Path;

use decode_core::autodiff::{ParamSet, Tensor};
use decode_core::corpus::Vocabulary;
use decode_core::model::{Model, ModelConfig};
use decode_core::training::Checkpoint;
use serde::{Deserialize, Serialize};

use crate::error::{LabError, Result};
use crate::files;

pub const MAGIC: &[u8; 4] = b"DCKP";
pub const VERSION: u32 = 1;
const PREAMBLE: usize = 4 + 4 + 8;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    vocab: Vocabulary,
    arrays: Vec<ArrayInfo>,
}

#[derive(Serialize, Deserialize)]
struct ArrayInfo {
    name: String,
    shape: Vec<usize>,
}

pub fn encode(ck: &Checkpoint) -> Vec<u8> {
    let header = Header {
        config: ck.config.clone(),
        vocab: ck.vocab.clone(),
        arrays: ck
            .params
            .iter()
            .map(|(_, name, t)| ArrayInfo {
                name: name.to_string(),
                shape: t.shape().to_vec(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).expect("in-memory serialization");
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + 8 * ck.params.n_values());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, _, t) in ck.params.iter() {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Parses checkpoint bytes; `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let bad = |message: String| LabError::Checkpoint {
        path: path.into(),
        message,
    };
    if bytes.len() < PREAMBLE {
        return Err(bad(format!("{} bytes is shorter than the preamble", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(bad(format!("unsupported version {version} (expected {VERSION})")));
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap());
    let header_end = usize::try_from(header_len)
        .ok()
        .and_then(|n| n.checked_add(PREAMBLE))
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| bad(format!("header length {header_len} runs past end of file")))?;
    let header: Header =
        serde_json::from_slice(&bytes[PREAMBLE..header_end]).map_err(|e| bad(format!("header: {e}")))?;

    let mut n_values = 0usize;
    for a in &header.arrays {
        let len = a.shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        n_values = len
            .and_then(|l| n_values.checked_add(l))
            .ok_or_else(|| bad(format!("array {} has an overflowing shape", a.name)))?;
    }
    let expected = n_values
        .checked_mul(8)
        .and_then(|n| n.checked_add(header_end))
        .ok_or_else(|| bad("array data size overflows".into()))?;
    if bytes.len() != expected {
        return Err(bad(format!(
            "expected {expected} bytes for the declared arrays, found {}",
            bytes.len()
        )));
    }

    let mismatch = |detail: String| LabError::ConfigMismatch {
        path: path.into(),
        detail,
    };
    let mut params = ParamSet::new();
    let mut values = bytes[header_end..].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap()));
    for a in header.arrays {
        let len = a.shape.iter().product();
        let data: Vec<f64> = values.by_ref().take(len).collect();
        let t = Tensor::new(a.shape, data).map_err(|e| bad(e.to_string()))?;
        params.insert(a.name, t).map_err(|e| bad(e.to_string()))?;
    }
    if header.config.vocab_size != header.vocab.len() {
        return Err(mismatch(format!(
            "config vocab_size {} but the stored vocabulary has {} tokens",
            header.config.vocab_size,
            header.vocab.len()
        )));
    }
    let model = Model::from_params(header.config, params).map_err(|e| mismatch(e.to_string()))?;
    Ok(Checkpoint::from_model(model, header.vocab))
}

pub fn save(path: &Path, ck: &Checkpoint) -> Result<()> {
    files::write_atomic(path, &encode(ck))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&files::read_bytes(path)?, path)
}

/// Loads a checkpoint that must have been produced under `expected`.
pub fn load_expecting(path: &Path, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load(path)?;
    let mut want = expected.clone();
    want.vocab_size = ck.config.vocab_size;
    if ck.config != want {
        return Err(LabError::ConfigMismatch {
            path: path.into(),
            detail: format!(
                "checkpoint was trained with {} but the run config asks for {}",
                serde_json::to_string(&ck.config).unwrap_or_default(),
                serde_json::to_string(&want).unwrap_or_default()
            ),
        });
    }
    Ok(ck)
}
