//! `SMCK` checkpoint files.
//!
//! Layout (little-endian): magic `SMCK`, version `u32 = 1`, header length
//! `u32`, a JSON header, then the raw `f32` payloads listed in the header's
//! tensor directory. Offsets in the directory are relative to the first
//! payload byte.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainConfig};
use crate::error::{Error, Result};
use crate::model::{model_from_tensors, Model, ModelConfig};
use crate::numerics::Tensor;

const MAGIC: &[u8; 4] = b"SMCK";
const VERSION: u32 = 1;
const PREAMBLE: usize = 12;

/// Position of a ChaCha8 stream.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte seed, hex encoded.
    pub seed: String,
    pub stream: u64,
    pub word_pos: u128,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos(),
        }
    }

    fn seed_bytes(&self) -> Option<[u8; 32]> {
        let s = self.seed.as_bytes();
        if s.len() != 64 {
            return None;
        }
        let mut out = [0u8; 32];
        for (i, pair) in s.chunks_exact(2).enumerate() {
            out[i] = u8::from_str_radix(std::str::from_utf8(pair).ok()?, 16).ok()?;
        }
        Some(out)
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed_bytes().expect("validated on load"));
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training bit-exactly.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub step: u64,
    /// Completed epochs.
    pub epoch: u32,
    pub rng: RngState,
    pub model: Model,
    pub adam: Adam,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.step == other.step
            && self.epoch == other.epoch
            && self.rng == other.rng
            && self.model.store.iter().eq(other.model.store.iter())
            && self.adam == other.adam
    }
}

impl Checkpoint {
    /// Errors unless the checkpoint's model matches `expected` in every
    /// architectural field.
    pub fn check_compatible(&self, expected: &ModelConfig) -> Result<()> {
        let got = &self.config.model;
        let mut diffs = Vec::new();
        if got.experts != expected.experts {
            diffs.push(format!("experts {} vs {}", got.experts, expected.experts));
        }
        if got.topk != expected.topk {
            diffs.push(format!("topk {} vs {}", got.topk, expected.topk));
        }
        if got.side != expected.side {
            diffs.push(format!("side {} vs {}", got.side, expected.side));
        }
        if got != expected && diffs.is_empty() {
            diffs.push("layer widths differ".into());
        }
        if diffs.is_empty() {
            Ok(())
        } else {
            Err(Error::ConfigMismatch(format!("checkpoint vs expected: {}", diffs.join(", "))))
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    length: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    step: u64,
    epoch: u32,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

fn named_tensors(ckpt: &Checkpoint) -> Vec<(String, &Tensor<f32>)> {
    let store = &ckpt.model.store;
    let mut out: Vec<(String, &Tensor<f32>)> = store.iter().map(|(n, t)| (n.to_string(), t)).collect();
    for (prefix, moments) in [("adam.m.", &ckpt.adam.m), ("adam.v.", &ckpt.adam.v)] {
        for (id, t) in store.ids().zip(moments) {
            out.push((format!("{prefix}{}", store.name(id)), t));
        }
    }
    out
}

pub fn write_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let tensors = named_tensors(ckpt);
    let mut entries = Vec::with_capacity(tensors.len());
    let mut offset = 0u64;
    for (name, t) in &tensors {
        let length = (t.len() * 4) as u64;
        entries.push(TensorEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length,
        });
        offset += length;
    }
    let header = Header {
        config: ckpt.config.clone(),
        step: ckpt.step,
        epoch: ckpt.epoch,
        adam_step: ckpt.adam.t,
        rng: ckpt.rng.clone(),
        tensors: entries,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, t) in &tensors {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn read_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < PREAMBLE {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint preamble"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(0, "bad magic, expected SMCK"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let payload = PREAMBLE + hlen;
    if bytes.len() < payload {
        return Err(Error::format(bytes.len() as u64, "truncated checkpoint header"));
    }
    let header: Header = serde_json::from_slice(&bytes[PREAMBLE..payload])
        .map_err(|e| Error::format(PREAMBLE as u64, format!("invalid header: {e}")))?;
    if header.rng.seed_bytes().is_none() {
        return Err(Error::format(PREAMBLE as u64, "invalid RNG seed"));
    }
    let layout = Model::<f32>::zeros(header.config.model.clone())
        .map_err(|e| Error::format(PREAMBLE as u64, format!("header config: {e}")))?;
    let store = &layout.store;

    let mut params = Vec::new();
    let mut m = vec![None; store.len()];
    let mut v = vec![None; store.len()];
    let mut expected_offset = 0u64;
    for e in &header.tensors {
        let at = payload as u64 + e.offset;
        let (slot, base) = if let Some(rest) = e.name.strip_prefix("adam.m.") {
            (Some(&mut m), rest)
        } else if let Some(rest) = e.name.strip_prefix("adam.v.") {
            (Some(&mut v), rest)
        } else {
            (None, e.name.as_str())
        };
        let id = store
            .id(base)
            .ok_or_else(|| Error::format(at, format!("unknown tensor {}", e.name)))?;
        if e.dtype != "f32" {
            return Err(Error::format(at, format!("tensor {}: unsupported dtype {}", e.name, e.dtype)));
        }
        if e.shape != store.get(id).shape() {
            return Err(Error::format(
                at,
                format!("tensor {}: shape {:?}, expected {:?}", e.name, e.shape, store.get(id).shape()),
            ));
        }
        let n: usize = e.shape.iter().product();
        if e.length != (n * 4) as u64 || e.offset != expected_offset {
            return Err(Error::format(at, format!("tensor {}: inconsistent offset or length", e.name)));
        }
        expected_offset += e.length;
        let start = at as usize;
        let end = start + e.length as usize;
        if end > bytes.len() {
            return Err(Error::format(bytes.len() as u64, format!("tensor {} is truncated", e.name)));
        }
        let data: Vec<f32> = bytes[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(e.shape.clone(), data)?;
        match slot {
            Some(s) => {
                if s[id.0].replace(t).is_some() {
                    return Err(Error::format(at, format!("duplicate tensor {}", e.name)));
                }
            }
            None => params.push((e.name.clone(), t)),
        }
    }
    let end = payload as u64 + expected_offset;
    if (bytes.len() as u64) != end {
        return Err(Error::format(end, "trailing bytes after the last tensor"));
    }
    let model = model_from_tensors(header.config.model.clone(), params)
        .map_err(|e| Error::format(payload as u64, e.to_string()))?;
    let take = |slot: Vec<Option<Tensor<f32>>>, what: &str| -> Result<Vec<Tensor<f32>>> {
        slot.into_iter()
            .enumerate()
            .map(|(i, t)| {
                t.ok_or_else(|| {
                    Error::format(
                        payload as u64,
                        format!("missing {what} for {}", store.name(crate::numerics::ParamId(i))),
                    )
                })
            })
            .collect()
    };
    let adam = Adam {
        config: header.config.optimizer,
        t: header.adam_step,
        m: take(m, "first moment")?,
        v: take(v, "second moment")?,
    };
    Ok(Checkpoint {
        config: header.config,
        step: header.step,
        epoch: header.epoch,
        rng: header.rng,
        model,
        adam,
    })
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = write_checkpoint(ckpt)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
