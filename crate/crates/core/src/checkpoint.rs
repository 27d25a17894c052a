//! Binary checkpoint: magic, `u32` version, `u64` header length, a JSON
//! header, then the little-endian `f64` payload.
//!
//! Every parameter contributes three arrays in the order value, Adam `m`,
//! Adam `v`; the header records each array's name, shape and byte offset
//! into the payload.

use std::io::Write;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::params::{ParamEntry, ParamStore};
use crate::tensor::Tensor;
use crate::training::RunState;

pub const MAGIC: &[u8; 8] = b"EQAGGCKP";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArrayKind {
    Value,
    M,
    V,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArrayIndex {
    pub name: String,
    pub kind: ArrayKind,
    pub shape: Vec<usize>,
    /// Byte offset from the start of the payload.
    pub offset: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    /// Seed bytes, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal encoded to stay exact past 2^53.
    pub word_pos: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub config: String,
    pub step: u64,
    pub optimizer_step: u64,
    pub rng: RngState,
    pub arrays: Vec<ArrayIndex>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub state: RunState,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn encode_rng(rng: &ChaCha8Rng) -> RngState {
    let seed: String = rng.get_seed().iter().map(|b| format!("{b:02x}")).collect();
    RngState {
        seed,
        stream: rng.get_stream(),
        word_pos: rng.get_word_pos().to_string(),
    }
}

fn decode_rng(s: &RngState) -> Result<ChaCha8Rng> {
    if s.seed.len() != 64 {
        return Err(corrupt("rng seed must be 32 bytes"));
    }
    let mut seed = [0u8; 32];
    for (i, b) in seed.iter_mut().enumerate() {
        *b = u8::from_str_radix(&s.seed[2 * i..2 * i + 2], 16)
            .map_err(|_| corrupt("rng seed is not hex"))?;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(s.stream);
    rng.set_word_pos(
        s.word_pos
            .parse()
            .map_err(|_| corrupt("rng word position is not an integer"))?,
    );
    Ok(rng)
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut arrays = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        for (name, entry) in self.state.store.iter() {
            for (kind, t) in [
                (ArrayKind::Value, &entry.value),
                (ArrayKind::M, &entry.m),
                (ArrayKind::V, &entry.v),
            ] {
                arrays.push(ArrayIndex {
                    name: name.to_string(),
                    kind,
                    shape: t.shape().to_vec(),
                    offset: payload.len() as u64,
                });
                for x in t.data() {
                    payload.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
        let header = Header {
            config: self.config.to_text(),
            step: self.state.step,
            optimizer_step: self.state.store.step,
            rng: encode_rng(&self.state.rng),
            arrays,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(corrupt(format!(
                "unsupported version {version}, expected {VERSION}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < hlen {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[..hlen])?;
        let payload = &body[hlen..];
        let config = RunConfig::parse(&header.config)?;

        let mut store = ParamStore::new();
        let mut end = 0usize;
        for triple in header.arrays.chunks(3) {
            let [value, m, v] = triple else {
                return Err(corrupt(
                    "array index is not a sequence of value/m/v triples",
                ));
            };
            if (value.kind, m.kind, v.kind) != (ArrayKind::Value, ArrayKind::M, ArrayKind::V)
                || m.name != value.name
                || v.name != value.name
            {
                return Err(corrupt(format!(
                    "array index for `{}` is malformed",
                    value.name
                )));
            }
            let mut read = |idx: &ArrayIndex| -> Result<Tensor> {
                let n: usize = idx.shape.iter().product();
                let start = idx.offset as usize;
                let stop = start + 8 * n;
                if start != end || stop > payload.len() {
                    return Err(corrupt(format!(
                        "array `{}` lies outside the payload",
                        idx.name
                    )));
                }
                end = stop;
                let data = payload[start..stop]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Ok(Tensor::new(&idx.shape, data))
            };
            let entry = ParamEntry {
                value: read(value)?,
                m: read(m)?,
                v: read(v)?,
            };
            store.insert_entry(value.name.clone(), entry);
        }
        if end != payload.len() {
            return Err(corrupt("trailing bytes after payload"));
        }
        store.step = header.optimizer_step;
        Ok(Checkpoint {
            config,
            state: RunState {
                store,
                rng: decode_rng(&header.rng)?,
                step: header.step,
            },
        })
    }

    /// Writes through a temporary sibling file so a crash never leaves a
    /// partial checkpoint at `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&self.to_bytes()?)?;
            f.sync_all()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}
