//! Binary checkpoint container: magic, little-endian `u64` header length,
//! JSON header, then raw little-endian `f32` tensor payloads.

use std::io::Read;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numeric::{AdamConfig, AdamState, ParamStore, Tensor};

pub const MAGIC: &[u8; 8] = b"OVRCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal `u128` word position.
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        let pos: u128 = self
            .word_pos
            .parse()
            .map_err(|_| Error::Checkpoint(format!("bad rng word position {:?}", self.word_pos)))?;
        rng.set_word_pos(pos);
        Ok(rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    offset: u64,
    len: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    schema_version: u32,
    step: u64,
    config: TrainConfig,
    adam: AdamConfig,
    adam_step: u64,
    rng: RngState,
    tensors: Vec<TensorRecord>,
}

/// Everything needed to resume training or render.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub params: ParamStore<f32>,
    pub adam: AdamState<f32>,
    pub rng: RngState,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload: Vec<u8> = Vec::new();
        let mut push = |name: String, t: &Tensor<f32>| {
            tensors.push(TensorRecord {
                name,
                shape: t.shape().to_vec(),
                dtype: "f32".into(),
                offset: payload.len() as u64,
                len: t.numel() as u64,
            });
            for v in t.data() {
                payload.extend_from_slice(&v.to_le_bytes());
            }
        };
        for e in self.params.entries() {
            push(e.name.clone(), &e.value);
        }
        for (e, m) in self.params.entries().iter().zip(&self.adam.m) {
            push(format!("adam.m.{}", e.name), m);
        }
        for (e, v) in self.params.entries().iter().zip(&self.adam.v) {
            push(format!("adam.v.{}", e.name), v);
        }
        let header = Header {
            schema_version: CHECKPOINT_VERSION,
            step: self.step,
            config: self.config.clone(),
            adam: self.adam.config.clone(),
            adam_step: self.adam.step,
            rng: self.rng.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let err = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(err("not a checkpoint file (bad magic)"));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + hlen).ok_or_else(|| err("truncated header"))?;
        let header: Header = serde_json::from_slice(body)?;
        if header.schema_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {}",
                header.schema_version
            )));
        }
        let payload = &bytes[16 + hlen..];
        let read = |r: &TensorRecord| -> Result<Tensor<f32>> {
            if r.dtype != "f32" {
                return Err(Error::Checkpoint(format!("{}: unsupported dtype {}", r.name, r.dtype)));
            }
            let start = r.offset as usize;
            let end = start + 4 * r.len as usize;
            let raw = payload
                .get(start..end)
                .ok_or_else(|| Error::Checkpoint(format!("{}: payload out of range", r.name)))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            Tensor::new(&r.shape, data).map_err(|e| Error::Checkpoint(format!("{}: {e}", r.name)))
        };
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for r in &header.tensors {
            let t = read(r)?;
            if r.name.starts_with("adam.m.") {
                m.push(t);
            } else if r.name.starts_with("adam.v.") {
                v.push(t);
            } else {
                params.add(r.name.clone(), t);
            }
        }
        if m.len() != params.len() || v.len() != params.len() {
            return Err(err("optimizer moments do not match parameters"));
        }
        Ok(Self {
            step: header.step,
            config: header.config,
            adam: AdamState {
                config: header.adam,
                step: header.adam_step,
                m,
                v,
            },
            params,
            rng: header.rng,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    /// Rebuilds the model and loads the stored weights into it.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model = Model::new(self.config.model.clone(), self.config.seed)?;
        model.params.load_from(&self.params)?;
        Ok(model)
    }
}
