//! Binary checkpoint format.
//!
//! ```text
//! "PMEM" | version: u32
//! count: u32 | count × (name_len: u32, name, rank: u32, dims: rank × u64, offset: u64)
//! meta_len: u64 | meta: UTF-8 JSON (vocabulary, boundaries, config, metadata)
//! payload: little-endian f64 arrays
//! crc32(payload): u32
//! ```
//!
//! All integers are little-endian; offsets are relative to the payload start.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::Vocab;
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"PMEM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Domains trained so far, in order.
    pub history: Vec<String>,
    pub seed: Option<u64>,
    #[serde(default)]
    pub notes: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct TextBlock {
    vocab: Vocab,
    boundaries: Vec<usize>,
    config: ModelConfig,
    meta: CheckpointMeta,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub arrays: Vec<(String, Tensor)>,
    pub vocab: Vocab,
    pub boundaries: Vec<usize>,
    pub config: ModelConfig,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_model(model: &Model, meta: CheckpointMeta) -> Self {
        Checkpoint {
            arrays: model
                .params
                .iter()
                .map(|p| (p.name.clone(), p.value.clone()))
                .collect(),
            vocab: model.vocab.clone(),
            boundaries: model.boundaries().to_vec(),
            config: model.config().clone(),
            meta,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        let mut offset = 0u64;
        for (name, t) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&offset.to_le_bytes());
            offset += 8 * t.len() as u64;
        }
        let text = serde_json::to_vec(&TextBlock {
            vocab: self.vocab.clone(),
            boundaries: self.boundaries.clone(),
            config: self.config.clone(),
            meta: self.meta.clone(),
        })?;
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        let start = out.len();
        for (_, t) in &self.arrays {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out[start..]);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad magic bytes".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut manifest = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| Error::Format("array name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            manifest.push((name, shape, offset));
        }
        let text_len = r.u64()? as usize;
        let text: TextBlock = serde_json::from_slice(r.take(text_len)?)
            .map_err(|e| Error::Format(format!("metadata block: {e}")))?;
        let expected = manifest
            .iter()
            .map(|(_, shape, offset)| {
                shape
                    .iter()
                    .try_fold(8usize, |n, &d| n.checked_mul(d))
                    .and_then(|n| n.checked_add(*offset))
            })
            .try_fold(0usize, |m, end| end.map(|e| m.max(e)))
            .ok_or_else(|| Error::Format("array extent overflows".into()))?;
        if bytes.len() < r.pos + 4 || bytes.len() - r.pos - 4 < expected {
            return Err(Error::Format(format!(
                "truncated payload: {} bytes, manifest needs {expected}",
                bytes.len().saturating_sub(r.pos + 4)
            )));
        }
        let payload = &bytes[r.pos..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().expect("4 bytes"));
        let computed = crc32fast::hash(payload);
        if stored != computed {
            return Err(Error::Integrity { stored, computed });
        }
        let mut arrays = Vec::with_capacity(manifest.len());
        for (name, shape, offset) in manifest {
            let n: usize = shape.iter().product();
            let end = offset
                .checked_add(8 * n)
                .filter(|&e| e <= payload.len())
                .ok_or_else(|| Error::Format(format!("array `{name}` runs past the payload")))?;
            let data = payload[offset..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            let t = Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))?;
            arrays.push((name, t));
        }
        Ok(Checkpoint {
            arrays,
            vocab: text.vocab,
            boundaries: text.boundaries,
            config: text.config,
            meta: text.meta,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Rebuilds the stored model exactly.
    pub fn into_model(self) -> Result<Model> {
        let mut params = ParamStore::new();
        for (name, t) in self.arrays {
            params.add(name, t)?;
        }
        Model::from_parts(self.config, params, self.vocab, Some(self.boundaries))
    }

    /// Copies every stored array into the leading block of the same-named
    /// parameter of `target`. The stored vocabulary must be a prefix of the
    /// target's so that token ids keep their meaning.
    pub fn load_into(&self, target: &mut Model) -> Result<()> {
        let tv = target.vocab.tokens();
        if self.vocab.len() > tv.len() || self.vocab.tokens() != &tv[..self.vocab.len()] {
            return Err(Error::InvalidArgument(
                "stored vocabulary is not a prefix of the target vocabulary".into(),
            ));
        }
        for (name, t) in &self.arrays {
            let id = target.params.id(name).ok_or_else(|| {
                Error::InvalidArgument(format!("target has no parameter `{name}`"))
            })?;
            let dst = &mut target.params.get_mut(id).value;
            let fits = t.shape().len() == dst.shape().len()
                && t.shape().iter().zip(dst.shape()).all(|(s, d)| s <= d);
            if !fits {
                return Err(Error::ShapeExceedsTarget {
                    name: name.clone(),
                    stored: t.shape().to_vec(),
                    target: dst.shape().to_vec(),
                });
            }
            t.copy_into_leading_block(dst)?;
        }
        Ok(())
    }
}

pub fn save_checkpoint(model: &Model, meta: CheckpointMeta, path: &Path) -> Result<()> {
    Checkpoint::from_model(model, meta).save(path)
}

pub fn load_checkpoint(path: &Path) -> Result<Model> {
    Checkpoint::load(path)?.into_model()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}
