//! Binary checkpoint container.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` header length, a JSON
//! header (configs, vocabulary, counters and the tensor table), the tensor
//! data as little-endian `f64` in table order, and a SHA-256 of everything
//! before it.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::TrainingConfig;
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"VIDCAPCK";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: Model,
    pub training: Option<TrainingConfig>,
    pub vocab: Option<Vocabulary>,
    /// Last completed training stage (0 for an untrained model).
    pub stage: u8,
    /// Optimizer updates made in that stage.
    pub updates: u64,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    model: ModelConfig,
    training: Option<TrainingConfig>,
    vocab: Option<Vocabulary>,
    stage: u8,
    updates: u64,
    tensors: Vec<TensorEntry>,
}

impl Checkpoint {
    pub fn new(model: Model) -> Self {
        Self {
            model,
            training: None,
            vocab: None,
            stage: 0,
            updates: 0,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.config.clone(),
            training: self.training.clone(),
            vocab: self.vocab.clone(),
            stage: self.stage,
            updates: self.updates,
            tensors: self
                .model
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.to_owned(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut buf = Vec::with_capacity(json.len() + 8 * self.model.params.num_scalars() + 64);
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
        buf.extend_from_slice(&json);
        for t in self.model.params.tensors() {
            for x in t.data() {
                buf.extend_from_slice(&x.to_le_bytes());
            }
        }
        let digest = Sha256::digest(&buf);
        buf.extend_from_slice(&digest[..]);
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_owned());
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        if bytes.len() < MAGIC.len() + 12 + DIGEST_LEN {
            return Err(bad("checksum mismatch (file truncated)"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - DIGEST_LEN);
        if Sha256::digest(body)[..] != *stored {
            return Err(bad("checksum mismatch (file truncated or corrupted)"));
        }
        let mut at = MAGIC.len();
        let version = u32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
        at += 4;
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unknown format version {version}")));
        }
        let header_len = u64::from_le_bytes(body[at..at + 8].try_into().expect("8 bytes")) as usize;
        at += 8;
        let json = body
            .get(at..at.saturating_add(header_len))
            .ok_or_else(|| bad("header extends past end of file"))?;
        let header: Header = serde_json::from_slice(json)?;
        at += header_len;

        let mut tensors: Vec<(String, Tensor)> = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            let n = e.rows * e.cols;
            let raw = body
                .get(at..at + 8 * n)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` extends past end of file", e.name)))?;
            at += 8 * n;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(e.rows, e.cols, data)));
        }
        if at != body.len() {
            return Err(bad("trailing bytes after tensor data"));
        }

        let mut names = Vec::new();
        let mut ordered = Vec::new();
        for (name, shape) in header.model.param_shapes() {
            let t = tensors
                .iter()
                .find(|(n, _)| *n == name)
                .map(|(_, t)| t.clone())
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if t.shape() != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            names.push(name);
            ordered.push(t);
        }
        let model = Model::with_params(header.model, ModelParams::from_parts(names, ordered))?;
        Ok(Self {
            model,
            training: header.training,
            vocab: header.vocab,
            stage: header.stage,
            updates: header.updates,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()?)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Checkpoint {
        let model = Model::new(ModelConfig::new(3, 4, 7), 11).unwrap();
        Checkpoint {
            model,
            training: Some(TrainingConfig::default()),
            vocab: None,
            stage: 1,
            updates: 42,
        }
    }

    fn reseal(mut body: Vec<u8>) -> Vec<u8> {
        let digest = Sha256::digest(&body);
        body.extend_from_slice(&digest[..]);
        body
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let back = Checkpoint::from_bytes(&c.to_bytes().unwrap()).unwrap();
        assert_eq!(back, c);
        for (a, b) in c.model.params.tensors().iter().zip(back.model.params.tensors()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_file_fails_checksum() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [1, 9, bytes.len() / 2, bytes.len() - 40] {
            let err = Checkpoint::from_bytes(&bytes[..bytes.len() - cut]).unwrap_err();
            assert!(err.to_string().contains("checksum"), "{err}");
        }
        let mut flipped = bytes.clone();
        flipped[bytes.len() / 2] ^= 1;
        assert!(Checkpoint::from_bytes(&flipped).unwrap_err().to_string().contains("checksum"));
    }

    #[test]
    fn unknown_version_rejected() {
        let bytes = sample().to_bytes().unwrap();
        let mut body = bytes[..bytes.len() - DIGEST_LEN].to_vec();
        body[8..12].copy_from_slice(&99u32.to_le_bytes());
        let err = Checkpoint::from_bytes(&reseal(body)).unwrap_err();
        assert!(err.to_string().contains("unknown format version 99"), "{err}");
    }

    #[test]
    fn missing_tensor_named() {
        let c = sample();
        let mut names: Vec<String> = c.model.params.names().to_vec();
        let mut tensors = c.model.params.tensors().to_vec();
        let idx = names.iter().position(|n| n == "gate.w").unwrap();
        names.remove(idx);
        tensors.remove(idx);
        let header = Header {
            model: c.model.config.clone(),
            training: None,
            vocab: None,
            stage: 0,
            updates: 0,
            tensors: names
                .iter()
                .zip(&tensors)
                .map(|(n, t)| TensorEntry {
                    name: n.clone(),
                    rows: t.rows(),
                    cols: t.cols(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header).unwrap();
        let mut body = MAGIC.to_vec();
        body.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        body.extend_from_slice(&(json.len() as u64).to_le_bytes());
        body.extend_from_slice(&json);
        for t in &tensors {
            for x in t.data() {
                body.extend_from_slice(&x.to_le_bytes());
            }
        }
        let err = Checkpoint::from_bytes(&reseal(body)).unwrap_err();
        assert!(err.to_string().contains("missing tensor `gate.w`"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let c = sample();
        save_checkpoint(&c, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), c);
        assert!(load_checkpoint(dir.path().join("absent")).is_err());
    }
}
