//! Self-describing binary checkpoints.
//!
//! Layout:
//!
//! ```text
//! magic    8 bytes  "DISCOCKP"
//! version  u32 LE
//! hdr_len  u64 LE
//! header   hdr_len bytes of JSON: vocab, config, metadata, tensor list
//! payload  every tensor's f64 values, LE, in header order
//! ```
//!
//! Identical encoders and metadata serialize to identical bytes.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::tape::Params;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;

const MAGIC: &[u8; 8] = b"DISCOCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: Encoder,
    /// Free-form run metadata (stage, method, dev score, ...).
    pub metadata: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    vocab: Vocabulary,
    config: EncoderConfig,
    metadata: BTreeMap<String, String>,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

impl Checkpoint {
    pub fn new(encoder: Encoder) -> Self {
        Self {
            encoder,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            vocab: self.encoder.vocab,
            config: self.encoder.config,
            metadata: self.metadata.clone(),
            tensors: self
                .encoder
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header is plain data");
        let payload: usize = self.encoder.params.values().map(Tensor::len).sum();
        let mut out = Vec::with_capacity(20 + header.len() + payload * 8);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for t in self.encoder.params.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Checkpoint(msg.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let hdr_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let hdr_end = 20usize.checked_add(hdr_len).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..hdr_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;

        let mut cursor = hdr_end;
        let mut params = Params::new();
        for entry in header.tensors {
            let len: usize = entry.shape.iter().product();
            let end = cursor
                .checked_add(len * 8)
                .filter(|&e| e <= bytes.len())
                .ok_or_else(|| bad("truncated payload"))?;
            let data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
            params.insert(entry.name, Tensor::new(entry.shape, data)?);
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes after payload"));
        }
        let encoder = Encoder::new(header.vocab, header.config, params)?;
        Ok(Self {
            encoder,
            metadata: header.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
