//! Binary checkpoint format:
//!
//! ```text
//! "GJLM" | version: u16 LE | header_len: u32 LE | header JSON | f32 LE blobs
//! ```
//!
//! The header carries the model config, the parameter manifest (names and
//! shapes, in blob order) and the digest of the vocabulary the model was
//! trained with.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{GptModel, ModelConfig};
use crate::numerics::Tensor;
use crate::vocab::Vocabulary;
use crate::{Error, Result, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GJLM";
pub const CHECKPOINT_VERSION: u16 = 1;

const PREAMBLE: usize = 4 + 2 + 4;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    config: ModelConfig,
    manifest: Vec<ManifestEntry>,
    vocab_digest: String,
}

#[derive(Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: GptModel<f32>,
    pub vocab_digest: String,
}

impl Checkpoint {
    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }

    /// Fails when `vocab` is not the vocabulary the model was saved with.
    pub fn check_vocab(&self, vocab: &Vocabulary) -> Result<()> {
        let digest = vocab.digest();
        if digest != self.vocab_digest {
            return Err(Error::Format(format!(
                "vocabulary digest {digest} does not match checkpoint digest {}",
                self.vocab_digest
            )));
        }
        if vocab.len() != self.model.config().vocab_size {
            return Err(Error::Format("vocabulary size does not match the model".into()));
        }
        Ok(())
    }
}

pub fn encode_checkpoint<S: Scalar>(model: &GptModel<S>, vocab_digest: &str) -> Vec<u8> {
    let header = Header {
        config: *model.config(),
        manifest: model
            .config()
            .manifest()
            .into_iter()
            .map(|(name, shape)| ManifestEntry { name, shape })
            .collect(),
        vocab_digest: vocab_digest.to_string(),
    };
    let header = serde_json::to_vec(&header).expect("header serializes");
    let floats: usize = model.params().iter().map(Tensor::len).sum();
    let mut out = Vec::with_capacity(PREAMBLE + header.len() + 4 * floats);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for p in model.params() {
        for &x in p.data() {
            out.extend_from_slice(&(x.f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::Size {
            expected: PREAMBLE,
            found: bytes.len(),
        });
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let header_len = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes")) as usize;
    let body_start = PREAMBLE + header_len;
    if bytes.len() < body_start {
        return Err(Error::Size {
            expected: body_start,
            found: bytes.len(),
        });
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..body_start])
        .map_err(|e| Error::Format(format!("header: {e}")))?;
    header.config.validate().map_err(|e| Error::Format(e.to_string()))?;
    let expected: Vec<ManifestEntry> = header
        .config
        .manifest()
        .into_iter()
        .map(|(name, shape)| ManifestEntry { name, shape })
        .collect();
    if expected != header.manifest {
        return Err(Error::Format("manifest does not match config".into()));
    }
    let floats: usize = expected.iter().map(|e| e.shape.iter().product::<usize>()).sum();
    let body = &bytes[body_start..];
    if body.len() != 4 * floats {
        return Err(Error::Size {
            expected: body_start + 4 * floats,
            found: bytes.len(),
        });
    }
    let mut values = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")));
    let params = expected
        .into_iter()
        .map(|e| {
            let n = e.shape.iter().product();
            Tensor::new(e.shape, values.by_ref().take(n).collect())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Checkpoint {
        model: GptModel::from_parts(header.config, params)?,
        vocab_digest: header.vocab_digest,
    })
}

pub fn save_checkpoint<S: Scalar>(model: &GptModel<S>, vocab_digest: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_checkpoint(model, vocab_digest)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&fs::read(path).map_err(|e| Error::io(path, e))?)
}
