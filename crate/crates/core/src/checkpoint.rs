//! Self-describing parameter container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"LASTCKPT"            8-byte magic
//! u32                    format version
//! u64                    header length in bytes
//! header                 JSON: config echo, phase, parent hash, tensor table
//! tensor data            concatenated f32 values in table order
//! [u8; 32]               SHA-256 of every preceding byte
//! ```
//!
//! The hex form of the trailer is the checkpoint's content hash.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{LastModel, ModelConfig, ParamGroup, ParameterStore};
use crate::nn::{DType, Real};

const MAGIC: &[u8; 8] = b"LASTCKPT";
const VERSION: u32 = 1;
const HASH_LEN: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Init,
    Pretrain,
    Adapt,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Init => "init",
            Phase::Pretrain => "pretrain",
            Phase::Adapt => "adapt",
        })
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Phase::Init),
            "pretrain" => Ok(Phase::Pretrain),
            "adapt" => Ok(Phase::Adapt),
            other => Err(Error::InvalidArgument(format!("unknown checkpoint phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    group: String,
    dtype: DType,
    shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    phase: Phase,
    parent_hash: Option<String>,
    #[serde(default)]
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub phase: Phase,
    /// Content hash of the checkpoint this one was trained from.
    pub parent_hash: Option<String>,
    /// Free-form provenance (variant name, run settings).
    pub meta: serde_json::Value,
    pub params: ParameterStore<f32>,
}

impl Checkpoint {
    pub fn new(model: &LastModel<f32>, phase: Phase, parent_hash: Option<String>) -> Self {
        Self {
            config: model.config.clone(),
            phase,
            parent_hash,
            meta: serde_json::Value::Null,
            params: model.params.clone(),
        }
    }

    pub fn model(&self) -> Result<LastModel<f32>> {
        LastModel::from_params(self.config.clone(), self.params.clone())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let tensors = self.params.named_tensors();
        let header = Header {
            config: self.config.clone(),
            phase: self.phase,
            parent_hash: self.parent_hash.clone(),
            meta: self.meta.clone(),
            tensors: tensors
                .iter()
                .map(|(g, name, t)| TensorEntry {
                    name: name.clone(),
                    group: g.name().to_string(),
                    dtype: f32::DTYPE,
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let header = serde_json::to_vec(&header).expect("header serialises");
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for (_, _, t) in &tensors {
            for &v in t.iter() {
                v.write_le(&mut out);
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    /// Parses and verifies a serialized checkpoint. `origin` names the source in errors.
    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let fmt_err = |m: &str| Error::CheckpointFormat(format!("{}: {m}", origin.display()));
        if bytes.len() < MAGIC.len() + 12 + HASH_LEN || &bytes[..MAGIC.len()] != MAGIC {
            return Err(fmt_err("not a checkpoint file"));
        }
        let (body, stored) = bytes.split_at(bytes.len() - HASH_LEN);
        let computed = Sha256::digest(body);
        if computed.as_slice() != stored {
            return Err(Error::CheckpointHash {
                path: origin.to_path_buf(),
                stored: hex::encode(stored),
                computed: hex::encode(computed),
            });
        }
        let version = u32::from_le_bytes(body[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(fmt_err(&format!("unsupported format version {version}")));
        }
        let header_len = u64::from_le_bytes(body[12..20].try_into().expect("8 bytes")) as usize;
        let data_start = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= body.len())
            .ok_or_else(|| fmt_err("header length exceeds file"))?;
        let header: Header =
            serde_json::from_slice(&body[20..data_start]).map_err(|e| fmt_err(&format!("bad header: {e}")))?;
        header.config.validate()?;
        let mut params = ParameterStore::<f32>::init(&header.config, &mut ChaCha8Rng::seed_from_u64(0));
        let mut cursor = data_start;
        let mut slots = params.named_tensors_mut();
        if slots.len() != header.tensors.len() {
            return Err(fmt_err(&format!(
                "{} tensors stored, config implies {}",
                header.tensors.len(),
                slots.len()
            )));
        }
        for (entry, (group, name, dst)) in header.tensors.iter().zip(slots.iter_mut()) {
            if entry.name != *name || entry.shape != dst.shape() || entry.dtype != DType::F32 {
                return Err(Error::CheckpointMismatch {
                    group: group.to_string(),
                    detail: format!(
                        "stored {} {:?} does not match {} {:?}",
                        entry.name,
                        entry.shape,
                        name,
                        dst.shape()
                    ),
                });
            }
            let nbytes = dst.len() * 4;
            let chunk = body
                .get(cursor..cursor + nbytes)
                .ok_or_else(|| fmt_err("tensor data truncated"))?;
            for (v, b) in dst.iter_mut().zip(chunk.chunks_exact(4)) {
                *v = f32::read_le(b);
            }
            cursor += nbytes;
        }
        drop(slots);
        if cursor != body.len() {
            return Err(fmt_err("trailing bytes after tensor data"));
        }
        Ok(Self {
            config: header.config,
            phase: header.phase,
            parent_hash: header.parent_hash,
            meta: header.meta,
            params,
        })
    }

    /// Writes the checkpoint and returns its content hash.
    pub fn save(&self, path: &Path) -> Result<String> {
        let bytes = self.to_bytes();
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
        Ok(hex::encode(&bytes[bytes.len() - HASH_LEN..]))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }

    /// Loads and checks the parameters against the architecture the caller expects.
    pub fn load_for(path: &Path, expected: &ModelConfig) -> Result<Self> {
        let ckpt = Self::load(path)?;
        ckpt.params.check_shapes(expected)?;
        if ckpt.config != *expected {
            return Err(Error::Config(format!(
                "{} was trained with a different model configuration",
                path.display()
            )));
        }
        Ok(ckpt)
    }

    pub fn content_hash(&self) -> String {
        let bytes = self.to_bytes();
        hex::encode(&bytes[bytes.len() - HASH_LEN..])
    }

    /// SHA-256 of one parameter group's serialized values.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        self.params.group_hash(group)
    }
}
