//! The three towers plus the learnable temperature, under one parameter store.

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::data_model::EcgRecord;
use crate::error::{Error, Result};
use crate::multimodal_decoder::{DecoderConfig, MultimodalDecoder};
use crate::nn::{init_rng, scalar, to_rows, Init, ParamGroup, ParamStore};
use crate::objectives::{captioning_loss, clamp_log_sigma, contrastive_loss, LossWeights};
use crate::signal_encoder::{records_to_tensor, ConvNeXt1DConfig, SignalEncoder};
use crate::text_encoder::{tokenize, TextEncoder, TextEncoderConfig, Tokenized, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub signal: ConvNeXt1DConfig,
    pub text: TextEncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.signal.validate()?;
        self.text.validate()?;
        self.decoder.validate()?;
        if self.signal.embed_dim != self.text.embed_dim {
            return Err(Error::Validation(format!(
                "signal embed_dim {} differs from text embed_dim {}",
                self.signal.embed_dim, self.text.embed_dim
            )));
        }
        if self.decoder.cross_dim != self.signal.out_width() {
            return Err(Error::Validation(format!(
                "decoder cross_dim {} differs from signal token width {}",
                self.decoder.cross_dim,
                self.signal.out_width()
            )));
        }
        if self.decoder.vocab_size != self.text.vocab_size {
            return Err(Error::Validation("decoder and text encoder vocabularies differ".into()));
        }
        if self.decoder.max_len + 1 < self.text.max_len {
            return Err(Error::Validation("decoder max_len must be at least text max_len - 1".into()));
        }
        Ok(())
    }
}

/// Per-batch loss terms. Terms with zero weight are not computed.
#[derive(Clone, Debug)]
pub struct LossParts {
    pub total: Tensor,
    pub con: Option<Tensor>,
    pub cap: Option<Tensor>,
}

#[derive(Clone, Debug)]
pub struct EsiModel {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub signal: SignalEncoder,
    pub text: TextEncoder,
    pub decoder: MultimodalDecoder,
    pub log_sigma: Tensor,
}

impl EsiModel {
    /// Initializes every tower from one seeded stream, in the fixed order
    /// signal, text, decoder, temperature.
    pub fn new(config: &ModelConfig, init_sigma: f64, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new(dtype, Device::Cpu);
        let mut rng = init_rng(seed);
        let signal = SignalEncoder::new(
            &config.signal,
            &mut Init::new(&mut store, &mut rng, ParamGroup::Signal).push("signal"),
        )?;
        let text = TextEncoder::new(&config.text, &mut Init::new(&mut store, &mut rng, ParamGroup::Text).push("text"))?;
        let decoder = MultimodalDecoder::new(
            &config.decoder,
            &mut Init::new(&mut store, &mut rng, ParamGroup::Decoder).push("decoder"),
        )?;
        let log_sigma = Init::new(&mut store, &mut rng, ParamGroup::Temperature).constant("log_sigma", &[1], init_sigma.ln())?;
        Ok(Self {
            config: config.clone(),
            store,
            signal,
            text,
            decoder,
            log_sigma,
        })
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn sigma(&self) -> Result<f64> {
        Ok(scalar(&clamp_log_sigma(&self.log_sigma)?.sum_all()?)?.exp())
    }

    /// Joint losses for a signal batch `[B, leads, samples]` and its tokenized
    /// descriptions. Trailing all-padding columns are trimmed first.
    pub fn losses(&self, signals: &Tensor, texts: &[Tokenized], weights: &LossWeights) -> Result<LossParts> {
        let len = texts
            .iter()
            .map(|t| t.mask.iter().filter(|&&m| m).count())
            .max()
            .unwrap_or(0);
        if len < 2 {
            return Err(Error::Validation("token sequences need BOS and EOS".into()));
        }
        let enc = self.signal.encode(signals)?;
        let con = if weights.lambda_con > 0.0 {
            let ids: Vec<Vec<u32>> = texts.iter().map(|t| t.ids[..len].to_vec()).collect();
            let mask: Vec<Vec<bool>> = texts.iter().map(|t| t.mask[..len].to_vec()).collect();
            let t_emb = self.text.encode(&ids, &mask)?;
            Some(contrastive_loss(&enc.pooled, &t_emb, &clamp_log_sigma(&self.log_sigma)?)?)
        } else {
            None
        };
        let cap = if weights.lambda_cap > 0.0 {
            let inputs: Vec<Vec<u32>> = texts.iter().map(|t| t.ids[..len - 1].to_vec()).collect();
            let in_mask: Vec<Vec<bool>> = texts.iter().map(|t| t.mask[..len - 1].to_vec()).collect();
            let targets: Vec<Vec<u32>> = texts.iter().map(|t| t.ids[1..len].to_vec()).collect();
            let valid: Vec<Vec<bool>> = texts.iter().map(|t| t.mask[1..len].to_vec()).collect();
            let logits = self.decoder.caption_logits(&enc.tokens, &inputs, Some(&in_mask))?;
            Some(captioning_loss(&logits, &targets, &valid)?)
        } else {
            None
        };
        let total = match (&con, &cap) {
            (Some(c), Some(p)) => ((c * weights.lambda_con)? + (p * weights.lambda_cap)?)?,
            (Some(c), None) => (c * weights.lambda_con)?,
            (None, Some(p)) => (p * weights.lambda_cap)?,
            (None, None) => return Err(Error::Validation("both loss weights are zero".into())),
        };
        Ok(LossParts { total, con, cap })
    }

    /// Pooled unit-norm signal embeddings, processed in chunks.
    pub fn embed_records(&self, records: &[&EcgRecord], chunk: usize) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::with_capacity(records.len());
        for part in records.chunks(chunk.max(1)) {
            let x = records_to_tensor(part, self.dtype(), self.store.device())?;
            out.extend(to_rows(&self.signal.encode(&x)?.pooled.detach())?);
        }
        Ok(out)
    }

    /// Unit-norm text embeddings.
    pub fn embed_texts(&self, texts: &[String], vocab: &Vocabulary) -> Result<Vec<Vec<f64>>> {
        let toks = texts
            .iter()
            .map(|t| tokenize(t, vocab, self.config.text.max_len))
            .collect::<Result<Vec<_>>>()?;
        Ok(to_rows(&self.text.encode_tokenized(&toks)?.detach())?)
    }
}
