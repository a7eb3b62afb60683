//! Binary checkpoint format.
//!
//! ```text
//! magic      8 bytes  "QEDITCKP"
//! version    u32 LE   (currently 1)
//! header     u32 LE length + UTF-8 JSON {config, source_vocab, target_vocab}
//! count      u32 LE   number of parameter blobs
//! per blob:  u32 LE name length, UTF-8 name,
//!            u32 LE rank, rank × u32 LE extents,
//!            product(extents) × f32 LE values
//! ```
//!
//! Loading rebuilds the parameter layout from the config and rejects any
//! blob whose name, shape or values disagree with it.

use serde::{Deserialize, Serialize};

use super::params::{Layout, ModelParameters};
use super::{Model, ModelConfig, ModelError};
use crate::autodiff::Array;
use crate::text::Vocabulary;

pub const MAGIC: &[u8; 8] = b"QEDITCKP";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    source_vocab: Option<Vec<String>>,
    target_vocab: Vec<String>,
}

fn err(msg: impl Into<String>) -> ModelError {
    ModelError::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| err(format!("truncated checkpoint: need {n} bytes at offset {}", self.pos)))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self) -> Result<&'a str, ModelError> {
        let n = self.u32()? as usize;
        std::str::from_utf8(self.take(n)?).map_err(|_| err("invalid UTF-8 in checkpoint"))
    }
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&u32::try_from(v).expect("checkpoint field fits in u32").to_le_bytes());
}

pub fn to_bytes(model: &Model) -> Vec<u8> {
    let header = Header {
        config: model.network.config.clone(),
        source_vocab: model.source_vocab.as_ref().map(|v| v.ordinary().to_vec()),
        target_vocab: model.target_vocab.ordinary().to_vec(),
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + model.params.count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    put_u32(&mut out, json.len());
    out.extend_from_slice(&json);
    put_u32(&mut out, model.params.arrays.len());
    for (name, a) in model.params.names.iter().zip(&model.params.arrays) {
        put_u32(&mut out, name.len());
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, a.shape().len());
        for &d in a.shape() {
            put_u32(&mut out, d);
        }
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Model, ModelError> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(err("bad magic bytes"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(err(format!("unsupported checkpoint version {version}")));
    }
    let header: Header = serde_json::from_str(r.string()?).map_err(|e| err(format!("bad checkpoint header: {e}")))?;
    let layout = Layout::new(&header.config)?;
    let target_vocab = Vocabulary::from_tokens(header.target_vocab).map_err(|e| err(e.to_string()))?;
    if target_vocab.len() != header.config.target_vocab {
        return Err(err("target vocabulary size disagrees with config"));
    }
    let source_vocab = match header.source_vocab {
        Some(tokens) => {
            let v = Vocabulary::from_tokens(tokens).map_err(|e| err(e.to_string()))?;
            if header.config.mode.uses_source() && v.len() != header.config.source_vocab {
                return Err(err("source vocabulary size disagrees with config"));
            }
            Some(v)
        }
        None if header.config.mode.uses_source() => return Err(err("missing source vocabulary")),
        None => None,
    };

    let count = r.u32()? as usize;
    if count != layout.len() {
        return Err(err(format!("expected {} parameter blobs, found {count}", layout.len())));
    }
    let mut names = Vec::with_capacity(count);
    let mut arrays = Vec::with_capacity(count);
    for (expected_name, expected_shape, _) in &layout.entries {
        let name = r.string()?;
        if name != expected_name {
            return Err(err(format!("expected parameter {expected_name}, found {name}")));
        }
        let rank = r.u32()? as usize;
        if rank != expected_shape.len() {
            return Err(err(format!("parameter {name}: rank {rank}, expected {}", expected_shape.len())));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        if &shape != expected_shape {
            return Err(err(format!("parameter {name}: shape {shape:?}, expected {expected_shape:?}")));
        }
        let len: usize = shape.iter().product();
        let raw = r.take(len.checked_mul(4).ok_or_else(|| err("blob too large"))?)?;
        let data: Vec<f32> = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(err(format!("parameter {name} holds non-finite values")));
        }
        names.push(name.to_string());
        arrays.push(Array::from_vec(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(err("trailing bytes after last parameter blob"));
    }
    let params = ModelParameters { names, arrays };
    Model::from_parts(header.config, params, source_vocab, target_vocab)
}
