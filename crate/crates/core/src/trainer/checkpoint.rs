//! Binary checkpoints: magic, little-endian header length, JSON header,
//! then raw little-endian `f32` data for parameters and both Adam moments.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::error::{FobaError, Result};
use crate::nn::Tensor;
use crate::trainer::StepRecord;

const MAGIC: &[u8; 8] = b"FOBACKP1";

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: RunConfig,
    step: usize,
    rng_seed: String,
    rng_stream: String,
    rng_word_pos: String,
    opt_t: u64,
    history: Vec<StepRecord>,
    tensors: Vec<TensorEntry>,
}

/// Everything needed to continue a run exactly where it stopped.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: usize,
    pub rng: ChaCha8Rng,
    pub opt_t: u64,
    pub history: Vec<StepRecord>,
    /// `(name, value)` in store order.
    pub params: Vec<(String, Tensor<f32>)>,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

fn bad(msg: impl Into<String>) -> FobaError {
    FobaError::Checkpoint(msg.into())
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            config: self.config.clone(),
            step: self.step,
            rng_seed: self.rng.get_seed().iter().map(|b| format!("{:02x}", b)).collect(),
            rng_stream: self.rng.get_stream().to_string(),
            rng_word_pos: self.rng.get_word_pos().to_string(),
            opt_t: self.opt_t,
            history: self.history.clone(),
            tensors: self
                .params
                .iter()
                .map(|(name, t)| TensorEntry {
                    name: name.clone(),
                    shape: t.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&header)?;
        let n: usize = self.params.iter().map(|(_, t)| t.numel()).sum();
        let mut out = Vec::with_capacity(16 + json.len() + 12 * n);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let params = self.params.iter().map(|(_, t)| t);
        for t in params.chain(&self.m).chain(&self.v) {
            for x in t.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file"));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(body).map_err(|e| bad(format!("header: {}", e)))?;
        let mut data = &bytes[16 + len..];
        let mut read = |shape: &[usize]| -> Result<Tensor<f32>> {
            let n: usize = shape.iter().product();
            if data.len() < 4 * n {
                return Err(bad("truncated tensor data"));
            }
            let vals = data[..4 * n]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            data = &data[4 * n..];
            Tensor::from_vec(shape, vals)
        };
        let mut params = Vec::with_capacity(header.tensors.len());
        for e in &header.tensors {
            params.push((e.name.clone(), read(&e.shape)?));
        }
        let m = header.tensors.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
        let v = header.tensors.iter().map(|e| read(&e.shape)).collect::<Result<Vec<_>>>()?;
        if !data.is_empty() {
            return Err(bad(format!("{} trailing bytes", data.len())));
        }
        let seed: Vec<u8> = (0..header.rng_seed.len() / 2)
            .map(|i| u8::from_str_radix(&header.rng_seed[2 * i..2 * i + 2], 16))
            .collect::<std::result::Result<_, _>>()
            .map_err(|_| bad("rng seed"))?;
        let seed: [u8; 32] = seed.try_into().map_err(|_| bad("rng seed length"))?;
        let mut rng = <ChaCha8Rng as rand::SeedableRng>::from_seed(seed);
        rng.set_stream(header.rng_stream.parse().map_err(|_| bad("rng stream"))?);
        rng.set_word_pos(header.rng_word_pos.parse().map_err(|_| bad("rng position"))?);
        Ok(Self {
            config: header.config,
            step: header.step,
            rng,
            opt_t: header.opt_t,
            history: header.history,
            params,
            m,
            v,
        })
    }

    /// Writes via a temporary sibling and a rename, so readers never see a partial file.
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| FobaError::io(dir, e))?;
        }
        let tmp = path.with_extension("tmp");
        let bytes = self.to_bytes()?;
        let mut f = fs::File::create(&tmp).map_err(|e| FobaError::io(&tmp, e))?;
        f.write_all(&bytes).map_err(|e| FobaError::io(&tmp, e))?;
        f.sync_all().map_err(|e| FobaError::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| FobaError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => FobaError::MissingFile(path.to_path_buf()),
            _ => FobaError::io(path, e),
        })?;
        Self::from_bytes(&bytes)
    }
}
