//! Binary model bundles.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FKIT"  u32 version  u32 count
//! count x { u32 name_len  name  u32 rank  rank x u64 extent  numel x f32 }
//! u64 trailer_len  trailer (UTF-8 JSON)
//! ```
//!
//! The JSON trailer of a model bundle carries the model config, the
//! vocabulary and the image pipeline settings.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePipelineConfig;
use crate::model::{init_params, Model, ModelConfig};
use crate::nn::derive_rng;
use crate::tensor::Tensor;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 4] = b"FKIT";
pub const VERSION: u32 = 1;
/// Magic, version and tensor count.
pub const HEADER_LEN: usize = 12;

/// Serializes named tensors and a JSON trailer.
pub fn encode_tensors(tensors: &[(String, &Tensor<f32>)], trailer: &str) -> Vec<u8> {
    let body: usize = tensors
        .iter()
        .map(|(n, t)| 8 + n.len() + 8 * t.rank() + 4 * t.numel())
        .sum();
    let mut out = Vec::with_capacity(HEADER_LEN + body + 8 + trailer.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(trailer.as_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!(
                "bundle truncated at byte {} while reading {what}",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn len(&mut self, value: u64, what: &str) -> Result<usize> {
        usize::try_from(value)
            .ok()
            .filter(|&n| n <= self.buf.len() - self.pos)
            .ok_or_else(|| Error::Format(format!("{what} length {value} at byte {} exceeds the bundle", self.pos)))
    }
}

/// Inverse of [`encode_tensors`].
pub fn decode_tensors(bytes: &[u8]) -> Result<(Vec<(String, Tensor<f32>)>, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("not a model bundle (bad magic)".into()));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported bundle version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let n = r.u32("name length")? as u64;
        let n = r.len(n, "name")?;
        let name = std::str::from_utf8(r.take(n, "name")?)
            .map_err(|_| Error::Format(format!("tensor name before byte {} is not UTF-8", r.pos)))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        let mut numel: u64 = 1;
        for _ in 0..rank {
            let d = r.u64("extent")?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
            shape.push(d as usize);
        }
        let bytes_needed = numel
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let nbytes = r.len(bytes_needed, &format!("tensor {name}"))?;
        let data = r
            .take(nbytes, &name)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push((name, Tensor::new(shape, data)?));
    }
    let t = r.u64("trailer length")?;
    let t = r.len(t, "trailer")?;
    let trailer = std::str::from_utf8(r.take(t, "trailer")?)
        .map_err(|_| Error::Format("bundle trailer is not UTF-8".into()))?
        .to_string();
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the bundle",
            bytes.len() - r.pos
        )));
    }
    Ok((tensors, trailer))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ModelConfig,
    vocab: Vec<String>,
    pipeline: ImagePipelineConfig,
}

pub fn encode_model(model: &Model) -> Result<Vec<u8>> {
    let meta = ModelMeta {
        config: model.config.clone(),
        vocab: model.vocab.learned_tokens().to_vec(),
        pipeline: model.pipeline.clone(),
    };
    let trailer = serde_json::to_string(&meta).map_err(|e| Error::Format(e.to_string()))?;
    let mut named = Vec::new();
    model.params.visit(&mut |name, t| named.push((name, t)));
    Ok(encode_tensors(&named, &trailer))
}

pub fn decode_model(bytes: &[u8]) -> Result<Model> {
    let (tensors, trailer) = decode_tensors(bytes)?;
    let meta: ModelMeta =
        serde_json::from_str(&trailer).map_err(|e| Error::Format(format!("bundle metadata: {e}")))?;
    let vocab = Vocabulary::from_tokens(meta.vocab)?;
    if meta.config.mode.uses_text() && meta.config.text.vocab_size != vocab.len() {
        return Err(Error::Format(format!(
            "config expects {} vocabulary entries, bundle has {}",
            meta.config.text.vocab_size,
            vocab.len()
        )));
    }
    // the initial values are overwritten below; only the structure matters
    let mut params = init_params::<f32, _>(&meta.config, &mut derive_rng(0, &[]))?;
    let mut stored = tensors.into_iter();
    let mut failure = None;
    params.visit_mut(&mut |name, slot| {
        if failure.is_some() {
            return;
        }
        match stored.next() {
            Some((n, t)) if n == name && t.shape() == slot.shape() => *slot = t,
            Some((n, t)) => {
                failure = Some(format!(
                    "expected tensor {name} {:?}, found {n} {:?}",
                    slot.shape(),
                    t.shape()
                ))
            }
            None => failure = Some(format!("missing tensor {name}")),
        }
    });
    if let Some(msg) = failure {
        return Err(Error::Format(msg));
    }
    if let Some((n, _)) = stored.next() {
        return Err(Error::Format(format!("unexpected tensor {n}")));
    }
    Ok(Model {
        config: meta.config,
        params,
        vocab,
        pipeline: meta.pipeline,
    })
}

pub fn save_model(model: &Model, path: &Path) -> Result<()> {
    let bytes = encode_model(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<Model> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
