//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "BCAPCKPT"
//! version      u32      1
//! header_len   u32
//! header       header_len bytes of UTF-8 JSON (see `Header`)
//! n_tensors    u32
//! per tensor:
//!   name_len   u16
//!   name       name_len bytes UTF-8
//!   ndim       u32
//!   dims       ndim x u32
//!   data       prod(dims) x f64
//! ```
//!
//! Tensors appear in [`CaptionModel::params`] order and must be finite. The header carries the
//! vocabulary tokens and their SHA-256 hash; loading recomputes the hash and
//! rejects a mismatch.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::data::{ClasswordRegistry, Vocabulary};
use crate::error::{Error, Result};
use crate::features::FeatureView;
use crate::model::{CaptionModel, HyperParams};

pub const MAGIC: &[u8; 8] = b"BCAPCKPT";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub preset: String,
    pub seed: u64,
    /// SGD updates applied so far.
    pub iteration: u64,
    pub feature_view: FeatureView,
}

#[derive(Serialize, Deserialize)]
struct Header {
    hyper: HyperParams,
    vocab: Vec<String>,
    vocab_hash: String,
    classwords: Vec<String>,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: CaptionModel,
    pub vocab: Vocabulary,
    pub registry: ClasswordRegistry,
    pub meta: CheckpointMeta,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() < n {
            return Err(bad(format!("truncated while reading {what}")));
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Ok(head)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

impl Checkpoint {
    pub fn new(model: CaptionModel, vocab: Vocabulary, registry: ClasswordRegistry, meta: CheckpointMeta) -> Result<Self> {
        if model.hyper.vocab_size != vocab.len() {
            return Err(bad(format!(
                "model vocabulary size {} does not match {} tokens",
                model.hyper.vocab_size,
                vocab.len()
            )));
        }
        registry.vocab_indices(&vocab)?;
        Ok(Checkpoint {
            model,
            vocab,
            registry,
            meta,
        })
    }

    pub fn vocab_hash(&self) -> String {
        self.vocab.hash()
    }

    /// Fails unless `expected` is this checkpoint's vocabulary hash.
    pub fn ensure_vocab(&self, expected: &str) -> Result<()> {
        let actual = self.vocab_hash();
        if actual != expected {
            return Err(Error::VocabHashMismatch {
                expected: expected.to_owned(),
                actual,
            });
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = Header {
            hyper: self.model.hyper,
            vocab: self.vocab.tokens().to_vec(),
            vocab_hash: self.vocab.hash(),
            classwords: self.registry.classwords().to_vec(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let params = self.model.params();
        let mut out = Vec::with_capacity(64 + json.len() + 8 * self.model.hyper.param_count());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&(params.len() as u32).to_le_bytes());
        for (name, _, t) in params {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for &x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes };
        if r.take(8, "magic")? != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u32("header length")? as usize;
        let header: Header = serde_json::from_slice(r.take(header_len, "header")?)
            .map_err(|e| bad(format!("invalid header: {e}")))?;
        header.hyper.validate()?;
        header.meta.feature_view.validate()?;
        let vocab = Vocabulary::from_tokens(header.vocab)?;
        let actual = vocab.hash();
        if actual != header.vocab_hash {
            return Err(Error::VocabHashMismatch {
                expected: header.vocab_hash,
                actual,
            });
        }
        let registry = ClasswordRegistry::new(header.classwords)?;
        // refuse to allocate more than the file can hold
        let needed = header.hyper.param_count().checked_mul(8);
        if needed.is_none_or(|n| n > r.buf.len()) {
            return Err(bad("tensor data shorter than the header's model dimensions"));
        }

        let mut model = CaptionModel::zeros(header.hyper)?;
        let n = r.u32("tensor count")? as usize;
        let mut slots = model.params_mut();
        if n != slots.len() {
            return Err(bad(format!("expected {} tensors, found {n}", slots.len())));
        }
        for (name, _, slot) in slots.iter_mut() {
            let len = r.u16("tensor name length")? as usize;
            let got = std::str::from_utf8(r.take(len, "tensor name")?).map_err(|_| bad("tensor name is not UTF-8"))?;
            if got != *name {
                return Err(bad(format!("expected tensor `{name}`, found `{got}`")));
            }
            let ndim = r.u32("tensor rank")? as usize;
            if ndim != slot.shape().len() {
                return Err(bad(format!("tensor `{name}` has rank {ndim}, expected {}", slot.shape().len())));
            }
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u32("tensor dims")? as usize);
            }
            if dims != slot.shape() {
                return Err(bad(format!("tensor `{name}` has shape {dims:?}, expected {:?}", slot.shape())));
            }
            let raw = r.take(8 * slot.len(), "tensor data")?;
            for (x, chunk) in slot.data_mut().iter_mut().zip(raw.chunks_exact(8)) {
                *x = f64::from_le_bytes(chunk.try_into().unwrap());
                if !x.is_finite() {
                    return Err(bad(format!("tensor `{name}` holds a non-finite value")));
                }
            }
        }
        drop(slots);
        if !r.buf.is_empty() {
            return Err(bad(format!("{} trailing bytes", r.buf.len())));
        }
        Checkpoint::new(model, vocab, registry, header.meta)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// Named parameter tensors, for comparisons.
    pub fn tensors(&self) -> Vec<(&'static str, &Tensor)> {
        self.model.params().into_iter().map(|(n, _, t)| (n, t)).collect()
    }
}
