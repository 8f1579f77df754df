//! Binary model checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "ELSB" | version=1 | metadata length | metadata (JSON)
//! tensor count | per tensor: name length, name, rank, extents..., f64 LE payload
//! ```
//!
//! The metadata carries the model kind, its hyperparameters and the
//! vocabulary in id order. Tensors are stored at full `f64` precision, so a
//! model read back from disk is bit-identical to the one saved.

use std::collections::HashSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::chatbot::{ChatbotConfig, ChatbotModel};
use crate::error::{Error, Result};
use crate::nn::ParamSet;
use crate::tensor::Tensor;
use crate::vocab::Vocabulary;
use crate::vqg::{VqgConfig, VqgModel};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ELSB";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Vqg,
    Chatbot,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Vqg => "vqg",
            ModelKind::Chatbot => "chatbot",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: ModelKind,
    pub hyperparameters: serde_json::Value,
    pub vocabulary: Vocabulary,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StoredTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl StoredTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            shape: t.shape().to_vec(),
            data: t.data().to_vec(),
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.data.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelCheckpoint {
    pub meta: CheckpointMeta,
    pub tensors: Vec<StoredTensor>,
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'b [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated {what}: need {n} bytes, {} remain",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl ModelCheckpoint {
    pub fn kind(&self) -> ModelKind {
        self.meta.kind
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.meta)?;
        let mut out = Vec::new();
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Parses and validates a whole checkpoint; nothing is returned unless
    /// every section checks out.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4, "magic")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: CHECKPOINT_MAGIC,
                found: magic.to_vec(),
            });
        }
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let meta_len = r.u32("metadata length")? as usize;
        let meta_offset = r.pos as u64;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len, "metadata")?).map_err(|e| {
            Error::Format {
                offset: meta_offset,
                message: format!("metadata: {e}"),
            }
        })?;
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(1024));
        let mut names = HashSet::new();
        for _ in 0..count {
            let offset = r.pos as u64;
            let name_len = r.u32("tensor name length")? as usize;
            let name = String::from_utf8(r.take(name_len, "tensor name")?.to_vec()).map_err(|_| Error::Format {
                offset,
                message: "tensor name is not UTF-8".into(),
            })?;
            if !names.insert(name.clone()) {
                return Err(Error::Format {
                    offset,
                    message: format!("duplicate tensor name {name:?}"),
                });
            }
            let rank = r.u32("tensor rank")? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32("tensor extent")? as usize);
            }
            let len: usize = shape.iter().product();
            if rank == 0 || len == 0 {
                return Err(Error::Format {
                    offset,
                    message: format!("tensor {name:?} has empty shape {shape:?}"),
                });
            }
            let payload = r.take(8 * len, "tensor payload")?;
            let data = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(StoredTensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::Format {
                offset: r.pos as u64,
                message: format!("{} trailing bytes", bytes.len() - r.pos),
            });
        }
        Ok(Self { meta, tensors })
    }

    /// Checks the stored tensor table against `expected` names and shapes.
    fn check_table(&self, expected: &[(String, Vec<usize>)]) -> Result<()> {
        if self.tensors.len() != expected.len() {
            return Err(Error::Format {
                offset: 0,
                message: format!(
                    "checkpoint has {} tensors, model needs {}",
                    self.tensors.len(),
                    expected.len()
                ),
            });
        }
        for (stored, (name, shape)) in self.tensors.iter().zip(expected) {
            if &stored.name != name {
                return Err(Error::Format {
                    offset: 0,
                    message: format!("expected tensor {name:?}, found {:?}", stored.name),
                });
            }
            if &stored.shape != shape {
                return Err(Error::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: stored.shape.clone(),
                });
            }
        }
        Ok(())
    }

    fn expect_kind(&self, kind: ModelKind) -> Result<()> {
        if self.meta.kind != kind {
            return Err(Error::KindMismatch {
                expected: kind.to_string(),
                found: self.meta.kind.to_string(),
            });
        }
        Ok(())
    }

    fn fill<P: ParamSet>(&self, params: &mut P) -> Result<()> {
        for (dst, src) in params.tensors_mut().into_iter().zip(&self.tensors) {
            *dst = src.to_tensor()?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(ckpt: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = ckpt.to_bytes()?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelCheckpoint> {
    ModelCheckpoint::from_bytes(&fs::read(path)?)
}

/// Loads and rejects checkpoints of any other kind.
pub fn load_checkpoint_of_kind(path: impl AsRef<Path>, kind: ModelKind) -> Result<ModelCheckpoint> {
    let ckpt = load_checkpoint(path)?;
    ckpt.expect_kind(kind)?;
    Ok(ckpt)
}

fn stored<P: ParamSet>(params: &P) -> Vec<StoredTensor> {
    params
        .named_tensors()
        .into_iter()
        .map(|(n, t)| StoredTensor::from_tensor(n, t))
        .collect()
}

impl VqgModel {
    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            meta: CheckpointMeta {
                kind: ModelKind::Vqg,
                hyperparameters: serde_json::to_value(&self.config)?,
                vocabulary: self.vocab.clone(),
            },
            tensors: stored(&self.params),
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Vqg)?;
        let config: VqgConfig = serde_json::from_value(ckpt.meta.hyperparameters.clone())?;
        config.validate()?;
        let vocab = ckpt.meta.vocabulary.clone();
        ckpt.check_table(&VqgModel::expected_shapes(&config, vocab.len()))?;
        let mut model = VqgModel::new(config.clone(), vocab.clone(), 0)?;
        ckpt.fill(&mut model.params)?;
        VqgModel::from_parts(config, vocab, model.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }
}

impl ChatbotModel {
    pub fn to_checkpoint(&self) -> Result<ModelCheckpoint> {
        Ok(ModelCheckpoint {
            meta: CheckpointMeta {
                kind: ModelKind::Chatbot,
                hyperparameters: serde_json::to_value(&self.config)?,
                vocabulary: self.vocab.clone(),
            },
            tensors: stored(&self.params),
        })
    }

    pub fn from_checkpoint(ckpt: &ModelCheckpoint) -> Result<Self> {
        ckpt.expect_kind(ModelKind::Chatbot)?;
        let config: ChatbotConfig = serde_json::from_value(ckpt.meta.hyperparameters.clone())?;
        config.validate()?;
        let vocab = ckpt.meta.vocabulary.clone();
        ckpt.check_table(&ChatbotModel::expected_shapes(&config, vocab.len()))?;
        let mut model = ChatbotModel::new(config.clone(), vocab.clone(), 0)?;
        ckpt.fill(&mut model.params)?;
        ChatbotModel::from_parts(config, vocab, model.params)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&load_checkpoint(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_checkpoint(&self.to_checkpoint()?, path)
    }
}
