//! Parameter storage, initialization and the small set of layer primitives
//! the encoders and decoder are built from.
//!
//! Every layer is written against plain `candle_core` tensor ops so the same
//! code runs in `f32` for training and `f64` for gradient checking.

mod optim;

use std::collections::HashMap;

use candle_core::{DType, Device, Tensor, Var, D};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub use optim::{clip_grad_norm, AdamW, AdamWState};

pub const NORM_EPS: f64 = 1e-6;
const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Signal,
    Text,
    Decoder,
    Temperature,
    Head,
}

#[derive(Clone, Debug)]
pub struct ParamEntry {
    pub name: String,
    pub var: Var,
    /// Receives decoupled weight decay.
    pub decay: bool,
    pub group: ParamGroup,
}

/// A named tensor in serializable form.
#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedTensor {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Result<Self> {
        Ok(Self {
            name: name.into(),
            shape: t.dims().to_vec(),
            data: t.flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()?,
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_vec(self.data.clone(), self.shape.as_slice(), device)?.to_dtype(dtype)?)
    }
}

/// Ordered registry of trainable tensors. Insertion order is the
/// serialization and optimizer order.
#[derive(Clone, Debug)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    index: HashMap<String, usize>,
    dtype: DType,
    device: Device,
}

impl ParamStore {
    pub fn new(dtype: DType, device: Device) -> Self {
        Self {
            entries: Vec::new(),
            index: HashMap::new(),
            dtype,
            device,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.index.get(name).map(|&i| &self.entries[i])
    }

    pub fn num_params(&self) -> usize {
        self.entries.iter().map(|e| e.var.elem_count()).sum()
    }

    pub fn num_params_in(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.var.elem_count())
            .sum()
    }

    fn insert(&mut self, name: String, t: Tensor, decay: bool, group: ParamGroup) -> Result<Tensor> {
        if self.index.contains_key(&name) {
            return Err(Error::Validation(format!("duplicate parameter {name}")));
        }
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push(ParamEntry {
            name,
            var,
            decay,
            group,
        });
        Ok(out)
    }

    pub fn to_named(&self) -> Result<Vec<NamedTensor>> {
        self.entries
            .iter()
            .map(|e| NamedTensor::from_tensor(&e.name, e.var.as_tensor()))
            .collect()
    }

    /// Overwrites every parameter from `tensors`; names and shapes must match exactly.
    pub fn load_named(&self, tensors: &[NamedTensor]) -> Result<()> {
        if tensors.len() != self.entries.len() {
            return Err(Error::Validation(format!(
                "checkpoint has {} tensors, model has {}",
                tensors.len(),
                self.entries.len()
            )));
        }
        for nt in tensors {
            let e = self
                .get(&nt.name)
                .ok_or_else(|| Error::Validation(format!("unknown parameter {}", nt.name)))?;
            if e.var.dims() != nt.shape.as_slice() {
                return Err(Error::Shape(format!(
                    "{}: checkpoint shape {:?}, model shape {:?}",
                    nt.name,
                    nt.shape,
                    e.var.dims()
                )));
            }
            e.var.set(&nt.to_tensor(self.dtype, &self.device)?)?;
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values of one group.
    pub fn hash_group(&self, group: ParamGroup) -> Result<String> {
        let mut h = Sha256::new();
        for e in self.entries.iter().filter(|e| e.group == group) {
            h.update(e.name.as_bytes());
            for d in e.var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            let vals = e.var.as_tensor().flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
            for v in vals {
                h.update(v.to_le_bytes());
            }
        }
        Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
    }
}

/// Creates parameters under a name prefix with seeded initialization.
pub struct Init<'a> {
    store: &'a mut ParamStore,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    group: ParamGroup,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut ChaCha8Rng, group: ParamGroup) -> Self {
        Self {
            store,
            rng,
            prefix: String::new(),
            group,
        }
    }

    pub fn push(&mut self, name: &str) -> Init<'_> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        };
        Init {
            store: self.store,
            rng: self.rng,
            prefix,
            group: self.group,
        }
    }

    fn full_name(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn from_values(&self, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        Ok(Tensor::from_vec(values, shape, &self.store.device)?.to_dtype(self.store.dtype)?)
    }

    /// Truncated normal (std 0.02, cut at two standard deviations); decayed.
    pub fn weight(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let mut values = Vec::with_capacity(n);
        while values.len() < n {
            let v: f64 = normal.sample(self.rng);
            if v.abs() <= 2.0 * INIT_STD {
                values.push(v);
            }
        }
        let t = self.from_values(values, shape)?;
        let name = self.full_name(name);
        self.store.insert(name, t, true, self.group)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], value: f64) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let t = self.from_values(vec![value; n], shape)?;
        let name = self.full_name(name);
        self.store.insert(name, t, false, self.group)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        self.constant(name, shape, 0.0)
    }
}

pub fn init_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Option<Tensor>,
}

impl Linear {
    pub fn new(init: &mut Init, name: &str, in_dim: usize, out_dim: usize, bias: bool) -> Result<Self> {
        let mut p = init.push(name);
        let weight = p.weight("weight", &[out_dim, in_dim])?;
        let bias = if bias { Some(p.zeros("bias", &[out_dim])?) } else { None };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let in_dim = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        let rows = x.elem_count() / in_dim;
        let y = x.reshape((rows, in_dim))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.weight.dim(0)?;
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: Tensor,
    pub beta: Tensor,
}

impl LayerNorm {
    pub fn new(init: &mut Init, name: &str, dim: usize) -> Result<Self> {
        let mut p = init.push(name);
        Ok(Self {
            gamma: p.constant("weight", &[dim], 1.0)?,
            beta: p.zeros("bias", &[dim])?,
        })
    }

    /// Normalizes over the last dimension.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + NORM_EPS)?.sqrt()?)?;
        Ok(y.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.gelu_erf()?)
}

/// Softmax over the last dimension with max subtraction.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub fn log_softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(D::Minus1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Row-wise `x / max(||x||, eps)` over the last dimension.
pub fn l2_normalize(x: &Tensor) -> Result<Tensor> {
    let norm = x.sqr()?.sum_keepdim(D::Minus1)?.sqrt()?.maximum(NORM_EPS)?;
    Ok(x.broadcast_div(&norm)?)
}

/// Additive attention bias `[B, 1, 1, L]`: 0 for valid keys, a large
/// negative value for masked ones.
pub fn key_padding_bias(mask: &[Vec<bool>], dtype: DType, device: &Device) -> Result<Tensor> {
    let b = mask.len();
    let l = mask.first().map_or(0, Vec::len);
    let vals: Vec<f64> = mask
        .iter()
        .flat_map(|row| row.iter().map(|&m| if m { 0.0 } else { MASK_VALUE }))
        .collect();
    Ok(Tensor::from_vec(vals, (b, 1, 1, l), device)?.to_dtype(dtype)?)
}

/// `[1, 1, L, L]` bias forbidding attention to later positions.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let vals: Vec<f64> = (0..len)
        .flat_map(|i| (0..len).map(move |j| if j <= i { 0.0 } else { MASK_VALUE }))
        .collect();
    Ok(Tensor::from_vec(vals, (1, 1, len, len), device)?.to_dtype(dtype)?)
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn new(init: &mut Init, name: &str, width: usize, kv_dim: usize, heads: usize) -> Result<Self> {
        if width % heads != 0 {
            return Err(Error::Validation(format!("width {width} not divisible by {heads} heads")));
        }
        let mut p = init.push(name);
        Ok(Self {
            q: Linear::new(&mut p, "q", width, width, true)?,
            k: Linear::new(&mut p, "k", kv_dim, width, true)?,
            v: Linear::new(&mut p, "v", kv_dim, width, true)?,
            o: Linear::new(&mut p, "o", width, width, true)?,
            heads,
        })
    }

    fn split(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, w) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.heads, w / self.heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query` `[B, Lq, W]` attends over `kv` `[B, Lk, kv_dim]`; `bias` is
    /// broadcast onto the `[B, H, Lq, Lk]` scores.
    pub fn forward(&self, query: &Tensor, kv: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let (b, lq, w) = query.dims3()?;
        let dh = w / self.heads;
        let q = self.split(&self.q.forward(query)?)?;
        let k = self.split(&self.k.forward(kv)?)?;
        let v = self.split(&self.v.forward(kv)?)?;
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = softmax_last(&scores)?;
        let ctx = attn.matmul(&v)?.transpose(1, 2)?.contiguous()?.reshape((b, lq, w))?;
        self.o.forward(&ctx)
    }
}

#[derive(Clone, Debug)]
pub struct Mlp {
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Mlp {
    pub fn new(init: &mut Init, name: &str, width: usize, hidden: usize) -> Result<Self> {
        let mut p = init.push(name);
        Ok(Self {
            fc1: Linear::new(&mut p, "fc1", width, hidden, true)?,
            fc2: Linear::new(&mut p, "fc2", hidden, width, true)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        self.fc2.forward(&gelu(&self.fc1.forward(x)?)?)
    }
}

/// Flattens a `[rows, cols]` tensor into nested vectors of `f64`.
pub fn to_rows(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}
