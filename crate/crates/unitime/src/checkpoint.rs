//! Versioned binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UNTM"  magic
//! u32     format version (currently 1)
//! u64 n + n bytes          resolved run config, UTF-8 TOML
//! u64 count, per token:    u64 n + n bytes UTF-8   (vocabulary, id order)
//! u64 count, per tensor:   u64 n + name bytes, u64 ndim, ndim x u64 dims,
//!                          u64 element offset, u64 element count
//! u64 total elements, then total x f64 payload
//! u64 n + n bytes          training metadata, UTF-8 JSON
//! ```
//!
//! Tensors are stored in the model's canonical parameter order, so
//! save -> load -> save reproduces the file byte for byte.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::ModelParams;
use crate::numerics::tensor::Tensor;
use crate::text::Vocabulary;
use crate::training::TrainedModel;

pub const MAGIC: [u8; 4] = *b"UNTM";
pub const VERSION: u32 = 1;

/// Training provenance embedded in the checkpoint. Deliberately excludes
/// wall-clock timing so identical seeded runs stay byte-identical.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub seed: u64,
    pub selected_epoch: usize,
    pub epochs_run: usize,
    pub mean_val_curve: Vec<f64>,
    pub diverged_at_epoch: Option<usize>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// Resolved run config echoed verbatim.
    pub config_text: String,
    pub vocab: Vocabulary,
    /// Named tensors in canonical order.
    pub tensors: Vec<(String, Tensor)>,
    pub meta: CheckpointMeta,
}

fn put_u64(out: &mut Vec<u8>, v: u64) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_bytes(out: &mut Vec<u8>, bytes: &[u8]) {
    put_u64(out, bytes.len() as u64);
    out.extend_from_slice(bytes);
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "truncated: wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn sized_usize(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} overflows usize")))
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let n = self.sized_usize(what)?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{what} is not UTF-8")))
    }
}

impl Checkpoint {
    pub fn from_trained(model: &TrainedModel, config_text: String, meta: CheckpointMeta) -> Self {
        Self {
            config_text,
            vocab: model.vocab.clone(),
            tensors: model
                .params
                .named_tensors()
                .into_iter()
                .map(|(n, t)| (n, t.clone()))
                .collect(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_bytes(&mut out, self.config_text.as_bytes());

        put_u64(&mut out, self.vocab.len() as u64);
        for token in self.vocab.tokens() {
            put_bytes(&mut out, token.as_bytes());
        }

        put_u64(&mut out, self.tensors.len() as u64);
        let mut offset = 0u64;
        for (name, tensor) in &self.tensors {
            put_bytes(&mut out, name.as_bytes());
            put_u64(&mut out, tensor.ndim() as u64);
            for &d in tensor.shape() {
                put_u64(&mut out, d as u64);
            }
            put_u64(&mut out, offset);
            put_u64(&mut out, tensor.len() as u64);
            offset += tensor.len() as u64;
        }
        put_u64(&mut out, offset);
        for (_, tensor) in &self.tensors {
            for v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }

        let meta = serde_json::to_string(&self.meta).expect("metadata serializes");
        put_bytes(&mut out, meta.as_bytes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}, expected {VERSION}"
            )));
        }
        let config_text = r.string("config text")?;

        let token_count = r.sized_usize("vocabulary size")?;
        let mut tokens = Vec::with_capacity(token_count);
        for _ in 0..token_count {
            tokens.push(r.string("vocabulary token")?);
        }
        let vocab = Vocabulary::from_tokens(tokens)?;

        let tensor_count = r.sized_usize("tensor count")?;
        let mut directory = Vec::with_capacity(tensor_count);
        for _ in 0..tensor_count {
            let name = r.string("tensor name")?;
            let ndim = r.sized_usize("tensor rank")?;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.sized_usize("tensor dim")?);
            }
            let offset = r.sized_usize("tensor offset")?;
            let len = r.sized_usize("tensor length")?;
            directory.push((name, shape, offset, len));
        }
        let total = r.sized_usize("payload length")?;
        let payload_bytes = r.take(total * 8)?;
        let mut payload = Vec::with_capacity(total);
        for chunk in payload_bytes.chunks_exact(8) {
            payload.push(f64::from_le_bytes(chunk.try_into().unwrap()));
        }
        let mut tensors = Vec::with_capacity(tensor_count);
        for (name, shape, offset, len) in directory {
            if offset + len > payload.len() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` points outside the payload"
                )));
            }
            let tensor = Tensor::new(shape, payload[offset..offset + len].to_vec())
                .map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            tensors.push((name, tensor));
        }

        let meta_text = r.string("metadata")?;
        let meta: CheckpointMeta = serde_json::from_str(&meta_text)
            .map_err(|e| Error::Checkpoint(format!("metadata JSON: {e}")))?;
        if r.pos != bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes after metadata",
                bytes.len() - r.pos
            )));
        }
        Ok(Self {
            config_text,
            vocab,
            tensors,
            meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Parses the embedded config and rebuilds the runnable model.
    pub fn into_model(self) -> Result<(TrainedModel, RunConfig)> {
        let run_config = RunConfig::from_toml(&self.config_text)?;
        let mut model_config = run_config.model.clone();
        model_config.vocab_size = self.vocab.len();
        let params = ModelParams::from_named(&model_config, self.tensors)?;
        Ok((
            TrainedModel {
                config: model_config,
                vocab: self.vocab,
                params,
                domains: run_config.domains.clone(),
                selected_epoch: self.meta.selected_epoch,
            },
            run_config,
        ))
    }
}
