use std::fs;
use std::path::Path;

use candle_core::DType;
use serde::{Deserialize, Serialize};

use super::{EpochStats, TrainConfig};
use crate::error::{Error, Result};
use crate::model::EsiModel;
use crate::nn::{AdamWState, NamedTensor};
use crate::text_encoder::Vocabulary;

const MAGIC: &[u8; 8] = b"ESICKPT\0";
const VERSION: u32 = 1;

/// Batch order is a pure function of `(seed, pass)`, so this is the whole
/// sampler state.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorIndex {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Header {
    config: TrainConfig,
    vocab: Vec<String>,
    epoch: usize,
    global_step: u64,
    rng: RngState,
    history: Vec<EpochStats>,
    optimizer_steps: Vec<u64>,
    tensors: Vec<TensorIndex>,
}

/// Everything needed to resume training or run inference.
///
/// File layout: 8-byte magic, `u32` version, `u64` header length, a JSON
/// header, then all tensors as little-endian `f32` in header order.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    pub vocab: Vocabulary,
    pub epoch: usize,
    pub global_step: u64,
    pub rng: RngState,
    pub history: Vec<EpochStats>,
    pub params: Vec<NamedTensor>,
    pub adam_m: Vec<NamedTensor>,
    pub adam_v: Vec<NamedTensor>,
    pub optimizer_steps: Vec<u64>,
}

impl Checkpoint {
    pub(super) fn capture(
        config: &TrainConfig,
        vocab: &Vocabulary,
        model: &EsiModel,
        opt: &AdamWState,
        epoch: usize,
        global_step: u64,
        history: &[EpochStats],
    ) -> Result<Self> {
        let names: Vec<&str> = model.store.entries().iter().map(|e| e.name.as_str()).collect();
        let moments = |ts: &[candle_core::Tensor], prefix: &str| -> Result<Vec<NamedTensor>> {
            ts.iter()
                .zip(&names)
                .map(|(t, n)| NamedTensor::from_tensor(format!("{prefix}{n}"), t))
                .collect()
        };
        Ok(Self {
            config: config.clone(),
            vocab: vocab.clone(),
            epoch,
            global_step,
            rng: RngState {
                seed: config.seed,
                next_epoch: epoch,
            },
            history: history.to_vec(),
            params: model.store.to_named()?,
            adam_m: moments(&opt.m, "adam.m.")?,
            adam_v: moments(&opt.v, "adam.v.")?,
            optimizer_steps: opt.steps.clone(),
        })
    }

    /// Rebuilds the model (in `f32`) with the stored weights.
    pub fn model(&self) -> Result<EsiModel> {
        self.model_with_dtype(DType::F32)
    }

    pub fn model_with_dtype(&self, dtype: DType) -> Result<EsiModel> {
        let mc = self.config.model_config(self.vocab.len());
        let model = EsiModel::new(&mc, self.config.loss.init_sigma, self.config.seed, dtype)?;
        model.store.load_named(&self.params)?;
        Ok(model)
    }

    pub(super) fn optimizer_state(&self, model: &EsiModel) -> Result<AdamWState> {
        let dtype = model.dtype();
        let device = model.store.device();
        let load = |ts: &[NamedTensor]| -> Result<Vec<candle_core::Tensor>> {
            ts.iter().map(|t| t.to_tensor(dtype, device)).collect()
        };
        Ok(AdamWState {
            steps: self.optimizer_steps.clone(),
            m: load(&self.adam_m)?,
            v: load(&self.adam_v)?,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut offset = 0usize;
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            tensors.push(TensorIndex {
                name: t.name.clone(),
                shape: t.shape.clone(),
                offset,
            });
            offset += t.data.len();
        }
        let header = Header {
            config: self.config.clone(),
            vocab: self.vocab.tokens().to_vec(),
            epoch: self.epoch,
            global_step: self.global_step,
            rng: self.rng.clone(),
            history: self.history.clone(),
            optimizer_steps: self.optimizer_steps.clone(),
            tensors,
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(20 + json.len() + offset * 4);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in self.params.iter().chain(&self.adam_m).chain(&self.adam_v) {
            for v in &t.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |m: String| Error::Corrupt {
            path: path.to_path_buf(),
            message: m,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(corrupt("not a checkpoint file".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(corrupt(format!("unsupported version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let body = bytes.get(20..20 + hlen).ok_or_else(|| corrupt("truncated header".into()))?;
        let header: Header = serde_json::from_slice(body)?;
        let data = &bytes[20 + hlen..];
        let total: usize = header.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
        if data.len() != total * 4 {
            return Err(corrupt(format!("expected {} tensor bytes, found {}", total * 4, data.len())));
        }
        let mut all = Vec::with_capacity(header.tensors.len());
        for t in &header.tensors {
            let n: usize = t.shape.iter().product();
            let raw = data
                .get(t.offset * 4..(t.offset + n) * 4)
                .ok_or_else(|| corrupt(format!("tensor {} out of bounds", t.name)))?;
            all.push(NamedTensor {
                name: t.name.clone(),
                shape: t.shape.clone(),
                data: raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                    .collect(),
            });
        }
        let n_params = header.optimizer_steps.len();
        if all.len() != 3 * n_params {
            return Err(corrupt("tensor count does not match optimizer state".into()));
        }
        let adam_v = all.split_off(2 * n_params);
        let adam_m = all.split_off(n_params);
        let vocab_tsv: String = header
            .vocab
            .iter()
            .enumerate()
            .map(|(i, t)| format!("{t}\t{i}\n"))
            .collect();
        Ok(Self {
            config: header.config,
            vocab: Vocabulary::from_tsv(&vocab_tsv)?,
            epoch: header.epoch,
            global_step: header.global_step,
            rng: header.rng,
            history: header.history,
            params: all,
            adam_m,
            adam_v,
            optimizer_steps: header.optimizer_steps,
        })
    }

    /// Writes through a temporary file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}
