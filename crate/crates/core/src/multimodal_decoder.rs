//! Autoregressive caption decoder. Every layer runs causal self-attention
//! over text, then cross-attention over ECG tokens, then an MLP. The output
//! layer reuses the token embedding matrix.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{causal_bias, key_padding_bias, Init, LayerNorm, Mlp, MultiHeadAttention};
use crate::text_encoder::{embed_tokens, ids_tensor, BOS, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    /// Width of the ECG tokens attended to.
    pub cross_dim: usize,
    pub mlp_ratio: f64,
}

impl DecoderConfig {
    pub fn new(vocab_size: usize, cross_dim: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            vocab_size,
            max_len: 128,
            cross_dim,
            mlp_ratio: 4.0,
        }
    }

    pub fn micro(vocab_size: usize, cross_dim: usize) -> Self {
        Self {
            layers: 2,
            width: 64,
            max_len: 64,
            ..Self::new(vocab_size, cross_dim)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.cross_dim == 0 || self.max_len == 0 {
            return Err(Error::Validation("decoder sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Validation(format!(
                "decoder width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.vocab_size <= EOS as usize {
            return Err(Error::Validation("decoder vocabulary too small".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug)]
struct DecoderLayer {
    ln1: LayerNorm,
    self_attn: MultiHeadAttention,
    ln2: LayerNorm,
    cross_attn: MultiHeadAttention,
    ln3: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct MultimodalDecoder {
    config: DecoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<DecoderLayer>,
    final_norm: LayerNorm,
}

impl MultimodalDecoder {
    pub fn new(config: &DecoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let c = config;
        let tok_emb = init.weight("tok_emb", &[c.vocab_size, c.width])?;
        let pos_emb = init.weight("pos_emb", &[c.max_len, c.width])?;
        let layers = (0..c.layers)
            .map(|i| {
                let mut p = init.push(&format!("layers.{i}"));
                Ok(DecoderLayer {
                    ln1: LayerNorm::new(&mut p, "ln1", c.width)?,
                    self_attn: MultiHeadAttention::new(&mut p, "self_attn", c.width, c.width, c.heads)?,
                    ln2: LayerNorm::new(&mut p, "ln2", c.width)?,
                    cross_attn: MultiHeadAttention::new(&mut p, "cross_attn", c.width, c.cross_dim, c.heads)?,
                    ln3: LayerNorm::new(&mut p, "ln3", c.width)?,
                    mlp: Mlp::new(&mut p, "mlp", c.width, c.hidden())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(init, "final_norm", c.width)?;
        Ok(Self {
            config: c.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    /// Teacher-forced logits `[B, L, V]`. Position `i` sees text positions
    /// `0..=i` and every ECG token. `mask`, when given, additionally hides
    /// padded text positions as keys.
    pub fn caption_logits(&self, ecg_tokens: &Tensor, ids: &[Vec<u32>], mask: Option<&[Vec<bool>]>) -> Result<Tensor> {
        let c = &self.config;
        let (b, _, w) = ecg_tokens.dims3()?;
        if w != c.cross_dim {
            return Err(Error::Shape(format!("ECG tokens have width {w}, decoder expects {}", c.cross_dim)));
        }
        if b != ids.len() {
            return Err(Error::Shape(format!("{b} ECG sequences but {} token rows", ids.len())));
        }
        let device = self.tok_emb.device();
        let dtype = self.tok_emb.dtype();
        let ids_t = ids_tensor(ids, c.vocab_size, c.max_len, device)?;
        let l = ids_t.dim(1)?;
        let mut bias = causal_bias(l, dtype, device)?;
        if let Some(mask) = mask {
            if mask.len() != b || mask.iter().any(|m| m.len() != l) {
                return Err(Error::Shape("mask does not match token ids".into()));
            }
            bias = bias.broadcast_add(&key_padding_bias(mask, dtype, device)?)?;
        }
        let mut x = embed_tokens(&self.tok_emb, &self.pos_emb, &ids_t)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(&x)?;
            x = (&x + layer.self_attn.forward(&h, &h, Some(&bias))?)?;
            x = (&x + layer.cross_attn.forward(&layer.ln2.forward(&x)?, ecg_tokens, None)?)?;
            x = (&x + layer.mlp.forward(&layer.ln3.forward(&x)?)?)?;
        }
        let h = self.final_norm.forward(&x)?;
        Ok(h.reshape((b * l, c.width))?
            .matmul(&self.tok_emb.t()?)?
            .reshape((b, l, c.vocab_size))?)
    }

    /// Greedy decoding for one ECG token sequence `[T', w]` or `[1, T', w]`.
    pub fn greedy_decode(&self, ecg_tokens: &Tensor, max_len: usize) -> Result<Vec<u32>> {
        let ecg = if ecg_tokens.rank() == 2 {
            ecg_tokens.unsqueeze(0)?
        } else {
            ecg_tokens.clone()
        };
        let max_len = max_len.min(self.config.max_len);
        let mut ids = vec![BOS];
        while ids.len() < max_len {
            let logits = self.caption_logits(&ecg, std::slice::from_ref(&ids), None)?;
            let last = logits.get(0)?.get(ids.len() - 1)?;
            let next = last.argmax(D::Minus1)?.to_scalar::<u32>()?;
            ids.push(next);
            if next == EOS {
                break;
            }
        }
        Ok(ids)
    }
}
