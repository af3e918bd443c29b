//! Binary checkpoint container.
//!
//! ```text
//! offset  size  content
//! 0       8     magic "MASKCAP\0"
//! 8       4     format version, u32 little-endian (currently 1)
//! 12      4     header length N, u32 little-endian
//! 16      N     UTF-8 JSON header
//! 16+N    ...   tensor data: every tensor listed in the header, in order,
//!               as row-major little-endian IEEE-754 f64 values
//! ```
//!
//! The header is an object with keys `kind` (`"base"` or `"interpret"`),
//! `config` (model dimensions), `vocab` (token list, index = id), `seed`, and
//! `tensors`, a list of `{"name": .., "shape": [..]}`.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelKind, ModelParams};
use crate::numkern::Tensor;

pub const MAGIC: &[u8; 8] = b"MASKCAP\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: ModelKind,
    config: ModelConfig,
    vocab: Vocabulary,
    seed: u64,
    tensors: Vec<TensorEntry>,
}

/// A trained model with everything needed to decode with it.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub model: Model,
    pub vocab: Vocabulary,
    pub seed: u64,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, model: Model, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if vocab.len() != model.config.vocab {
            return Err(Error::Config(format!(
                "vocabulary has {} tokens but the model expects {}",
                vocab.len(),
                model.config.vocab
            )));
        }
        Ok(Checkpoint { kind, model, vocab, seed })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let named = self.model.params.named();
        let header = Header {
            kind: self.kind,
            config: self.model.config.clone(),
            vocab: self.vocab.clone(),
            seed: self.seed,
            tensors: named
                .iter()
                .map(|(n, t)| TensorEntry {
                    name: n.to_string(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let len = u32::try_from(json.len()).map_err(|_| Error::Checkpoint("header too large".into()))?;
        let values: usize = named.iter().map(|(_, t)| t.len()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 8 * values);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in named {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let len = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
        header.config.validate()?;
        let mut pos = 16 + len;
        let mut named = BTreeMap::new();
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let raw = bytes
                .get(pos..pos + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("truncated data for `{}`", entry.name)))?;
            pos += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, data)
                .map_err(|e| Error::Checkpoint(format!("tensor `{}`: {e}", entry.name)))?;
            if named.insert(entry.name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", entry.name)));
            }
        }
        if pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - pos)));
        }
        let params = ModelParams::from_named(&header.config, named)?;
        let model = Model::from_parts(header.config, params)?;
        Checkpoint::new(header.kind, model, header.vocab, header.seed)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes)
    }
}
