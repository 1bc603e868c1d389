//! Word-level tokenizer and a bidirectional transformer that maps a
//! description to a unit-norm embedding in the shared space.

mod vocab;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{key_padding_bias, l2_normalize, Init, LayerNorm, Linear, Mlp, MultiHeadAttention};

pub use vocab::{
    build_vocab, detokenize, normalize_text, split_words, tokenize, Tokenized, Vocabulary, BOS, CLS, EOS, PAD, UNK,
};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TextEncoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub width: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub mlp_ratio: f64,
}

impl TextEncoderConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            layers: 4,
            heads: 4,
            width: 128,
            max_len: 128,
            vocab_size,
            embed_dim: 256,
            mlp_ratio: 4.0,
        }
    }

    pub fn micro(vocab_size: usize) -> Self {
        Self {
            layers: 2,
            heads: 4,
            width: 64,
            max_len: 64,
            embed_dim: 64,
            ..Self::new(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.heads == 0 || self.width == 0 || self.embed_dim == 0 {
            return Err(Error::Validation("text encoder sizes must be positive".into()));
        }
        if self.width % self.heads != 0 {
            return Err(Error::Validation(format!(
                "text width {} not divisible by {} heads",
                self.width, self.heads
            )));
        }
        if self.max_len < 2 || self.vocab_size <= CLS as usize {
            return Err(Error::Validation("text max_len must be >= 2 and the vocabulary must hold the specials".into()));
        }
        Ok(())
    }

    pub fn hidden(&self) -> usize {
        (self.width as f64 * self.mlp_ratio).round() as usize
    }
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    ln1: LayerNorm,
    attn: MultiHeadAttention,
    ln2: LayerNorm,
    mlp: Mlp,
}

#[derive(Clone, Debug)]
pub struct TextEncoder {
    config: TextEncoderConfig,
    tok_emb: Tensor,
    pos_emb: Tensor,
    layers: Vec<EncoderLayer>,
    final_norm: LayerNorm,
    proj: Linear,
}

/// Validates ids against the vocabulary and packs them into a `[B, L]` tensor.
pub(crate) fn ids_tensor(ids: &[Vec<u32>], vocab_size: usize, max_len: usize, device: &Device) -> Result<Tensor> {
    let l = ids.first().map_or(0, Vec::len);
    if ids.is_empty() || l == 0 {
        return Err(Error::Argument("empty token batch".into()));
    }
    if l > max_len {
        return Err(Error::Length { len: l, max_len });
    }
    let mut flat = Vec::with_capacity(ids.len() * l);
    for row in ids {
        if row.len() != l {
            return Err(Error::Shape("token rows have different lengths".into()));
        }
        for &id in row {
            if id as usize >= vocab_size {
                return Err(Error::Range { id, vocab_size });
            }
        }
        flat.extend_from_slice(row);
    }
    Ok(Tensor::from_vec(flat, (ids.len(), l), device)?)
}

pub(crate) fn embed_tokens(tok_emb: &Tensor, pos_emb: &Tensor, ids: &Tensor) -> Result<Tensor> {
    let (b, l) = ids.dims2()?;
    let w = tok_emb.dim(1)?;
    let x = tok_emb.embedding(&ids.flatten_all()?)?.reshape((b, l, w))?;
    Ok(x.broadcast_add(&pos_emb.narrow(0, 0, l)?)?)
}

impl TextEncoder {
    pub fn new(config: &TextEncoderConfig, init: &mut Init) -> Result<Self> {
        config.validate()?;
        let c = config;
        let tok_emb = init.weight("tok_emb", &[c.vocab_size, c.width])?;
        let pos_emb = init.weight("pos_emb", &[c.max_len, c.width])?;
        let layers = (0..c.layers)
            .map(|i| {
                let mut p = init.push(&format!("layers.{i}"));
                Ok(EncoderLayer {
                    ln1: LayerNorm::new(&mut p, "ln1", c.width)?,
                    attn: MultiHeadAttention::new(&mut p, "attn", c.width, c.width, c.heads)?,
                    ln2: LayerNorm::new(&mut p, "ln2", c.width)?,
                    mlp: Mlp::new(&mut p, "mlp", c.width, c.hidden())?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let final_norm = LayerNorm::new(init, "final_norm", c.width)?;
        let proj = Linear::new(init, "proj", c.width, c.embed_dim, false)?;
        Ok(Self {
            config: c.clone(),
            tok_emb,
            pos_emb,
            layers,
            final_norm,
            proj,
        })
    }

    pub fn config(&self) -> &TextEncoderConfig {
        &self.config
    }

    /// `[B, d]` unit-norm embeddings taken from the state at position 0.
    /// Positions whose mask is false are excluded as attention keys.
    pub fn encode(&self, ids: &[Vec<u32>], mask: &[Vec<bool>]) -> Result<Tensor> {
        let c = &self.config;
        let device = self.tok_emb.device();
        let dtype: DType = self.tok_emb.dtype();
        let ids_t = ids_tensor(ids, c.vocab_size, c.max_len, device)?;
        if mask.len() != ids.len() || mask.iter().zip(ids).any(|(m, i)| m.len() != i.len()) {
            return Err(Error::Shape("mask does not match token ids".into()));
        }
        if mask.iter().any(|m| !m[0]) {
            return Err(Error::Validation("position 0 must be valid in every row".into()));
        }
        let bias = key_padding_bias(mask, dtype, device)?;
        let mut x = embed_tokens(&self.tok_emb, &self.pos_emb, &ids_t)?;
        for layer in &self.layers {
            let h = layer.ln1.forward(&x)?;
            x = (x + layer.attn.forward(&h, &h, Some(&bias))?)?;
            x = (&x + layer.mlp.forward(&layer.ln2.forward(&x)?)?)?;
        }
        let cls = x.narrow(1, 0, 1)?.squeeze(1)?;
        l2_normalize(&self.proj.forward(&self.final_norm.forward(&cls)?)?)
    }

    pub fn encode_tokenized(&self, batch: &[Tokenized]) -> Result<Tensor> {
        let ids: Vec<Vec<u32>> = batch.iter().map(|t| t.ids.clone()).collect();
        let mask: Vec<Vec<bool>> = batch.iter().map(|t| t.mask.clone()).collect();
        self.encode(&ids, &mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{init_rng, ParamGroup, ParamStore};

    fn encoder(seed: u64) -> (Vocabulary, TextEncoder) {
        let vocab = build_vocab(&["sinus rhythm with normal conduction", "right bundle branch block"], 1).unwrap();
        let mut store = ParamStore::new(DType::F32, Device::Cpu);
        let mut rng = init_rng(seed);
        let cfg = TextEncoderConfig::micro(vocab.len());
        let enc = TextEncoder::new(&cfg, &mut Init::new(&mut store, &mut rng, ParamGroup::Text)).unwrap();
        (vocab, enc)
    }

    fn rows(t: &Tensor) -> Vec<Vec<f32>> {
        t.to_vec2::<f32>().unwrap()
    }

    #[test]
    fn pad_ids_do_not_influence_output() {
        let (vocab, enc) = encoder(0);
        let t = tokenize("right bundle", &vocab, 10).unwrap();
        let a = rows(&enc.encode(&[t.ids.clone()], &[t.mask.clone()]).unwrap());
        let mut ids = t.ids.clone();
        ids[8] = 7;
        let b = rows(&enc.encode(&[ids], &[t.mask]).unwrap());
        for (x, y) in a[0].iter().zip(&b[0]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn rows_are_unit_norm_and_permutation_equivariant() {
        let (vocab, enc) = encoder(1);
        let texts = ["sinus rhythm", "right bundle branch block", "normal conduction with block"];
        let toks: Vec<Tokenized> = texts.iter().map(|t| tokenize(t, &vocab, 12).unwrap()).collect();
        let fwd = rows(&enc.encode_tokenized(&toks).unwrap());
        let rev: Vec<Tokenized> = toks.iter().rev().cloned().collect();
        let bwd = rows(&enc.encode_tokenized(&rev).unwrap());
        for (i, row) in fwd.iter().enumerate() {
            let n: f32 = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            assert!((n - 1.0).abs() < 1e-5);
            for (x, y) in row.iter().zip(&bwd[2 - i]) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_and_overlong_inputs_rejected() {
        let (vocab, enc) = encoder(2);
        let n = vocab.len() as u32;
        assert!(matches!(
            enc.encode(&[vec![BOS, n, EOS]], &[vec![true; 3]]),
            Err(Error::Range { .. })
        ));
        let long = vec![BOS; 65];
        assert!(matches!(enc.encode(&[long], &[vec![true; 65]]), Err(Error::Length { .. })));
    }

    #[test]
    fn different_descriptions_do_not_collapse() {
        for seed in 0..100 {
            let (vocab, enc) = encoder(seed);
            let a = tokenize("sinus rhythm with normal conduction", &vocab, 12).unwrap();
            let b = tokenize("right bundle branch block", &vocab, 12).unwrap();
            let e = rows(&enc.encode_tokenized(&[a, b]).unwrap());
            let cos: f32 = e[0].iter().zip(&e[1]).map(|(x, y)| x * y).sum();
            assert!(cos < 0.999, "seed {seed}: cosine {cos}");
        }
    }
}
