//! Joint contrastive and captioning pretraining with AdamW, linear warmup,
//! step decay, global-norm clipping and resumable checkpoints.

mod checkpoint;

use candle_core::DType;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data_model::{EcgRecord, EcgTextPair};
use crate::error::{Error, Result};
use crate::model::{EsiModel, ModelConfig};
use crate::multimodal_decoder::DecoderConfig;
use crate::nn::{clip_grad_norm, scalar, AdamW, ParamEntry, ParamGroup};
use crate::objectives::{LossWeights, SIGMA_MAX, SIGMA_MIN};
use crate::signal_encoder::{records_to_tensor, ConvNeXt1DConfig};
use crate::text_encoder::{build_vocab, tokenize, TextEncoderConfig, Tokenized, Vocabulary};

pub use checkpoint::{Checkpoint, RngState};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainVariant {
    Esi,
    EsiTiny,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: TrainVariant,
    pub epochs: usize,
    pub warmup_epochs: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Count decay boundaries from epoch 0 instead of from the end of warmup.
    pub decay_from_start: bool,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    pub loss: LossWeights,
    pub freeze_text: bool,
    /// Fixed number of updates per epoch, sampling across reshuffled passes
    /// over the data. `None` means one pass per epoch.
    pub steps_per_epoch: Option<usize>,
    pub min_freq: usize,
    pub signal: ConvNeXt1DConfig,
    pub text: TextEncoderConfig,
    pub decoder: DecoderConfig,
}

impl TrainConfig {
    fn with_signal(signal: ConvNeXt1DConfig, variant: TrainVariant) -> Self {
        let text = TextEncoderConfig::new(0);
        let decoder = DecoderConfig::new(0, signal.out_width());
        Self {
            variant,
            epochs: 30,
            warmup_epochs: 5,
            base_lr: 5e-5,
            lr_decay_factor: 0.1,
            lr_decay_every: 10,
            decay_from_start: false,
            batch_size: 48,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            loss: LossWeights::default(),
            freeze_text: false,
            steps_per_epoch: None,
            min_freq: 1,
            signal,
            text,
            decoder,
        }
    }

    /// Full-size setup with the base signal tower.
    pub fn esi() -> Self {
        Self::with_signal(ConvNeXt1DConfig::base(), TrainVariant::Esi)
    }

    pub fn esi_tiny() -> Self {
        Self::with_signal(ConvNeXt1DConfig::tiny(), TrainVariant::EsiTiny)
    }

    /// Desk-scale towers and a schedule that trains in minutes on one core.
    pub fn micro() -> Self {
        let signal = ConvNeXt1DConfig::micro();
        let decoder = DecoderConfig::micro(0, signal.out_width());
        Self {
            epochs: 12,
            warmup_epochs: 1,
            base_lr: 1e-3,
            lr_decay_every: 5,
            batch_size: 32,
            text: TextEncoderConfig::micro(0),
            decoder,
            signal,
            ..Self::with_signal(ConvNeXt1DConfig::micro(), TrainVariant::EsiTiny)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Validation(m.to_string()));
        if self.epochs == 0 || self.batch_size == 0 || self.lr_decay_every == 0 {
            return bad("epochs, batch_size and lr_decay_every must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs must be smaller than epochs");
        }
        for v in [self.base_lr, self.lr_decay_factor, self.clip_norm] {
            if !(v > 0.0 && v.is_finite()) {
                return bad("base_lr, lr_decay_factor and clip_norm must be positive");
            }
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.steps_per_epoch == Some(0) {
            return bad("steps_per_epoch must be positive");
        }
        self.loss.validate()
    }

    /// Model configuration with vocabulary size and cross-attention width
    /// filled in.
    pub fn model_config(&self, vocab_size: usize) -> ModelConfig {
        let mut text = self.text.clone();
        text.vocab_size = vocab_size;
        text.embed_dim = self.signal.embed_dim;
        let mut decoder = self.decoder.clone();
        decoder.vocab_size = vocab_size;
        decoder.cross_dim = self.signal.out_width();
        decoder.max_len = decoder.max_len.max(text.max_len - 1);
        ModelConfig {
            signal: self.signal.clone(),
            text,
            decoder,
        }
    }
}

/// Learning rate before update `step` (0-based).
pub fn lr_at(step: u64, steps_per_epoch: usize, config: &TrainConfig) -> f64 {
    let spe = steps_per_epoch.max(1) as u64;
    let warmup = config.warmup_epochs as u64 * spe;
    if step < warmup {
        return config.base_lr * step as f64 / warmup as f64;
    }
    let epoch = (step / spe) as usize;
    let since = if config.decay_from_start {
        epoch
    } else {
        epoch - config.warmup_epochs
    };
    let decays = since / config.lr_decay_every;
    config.base_lr * config.lr_decay_factor.powi(decays as i32)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_con: Option<f64>,
    pub mean_cap: Option<f64>,
    pub lr_last: f64,
    pub sigma: f64,
}

/// Training state over a fixed pair set.
pub struct Trainer<'a> {
    config: TrainConfig,
    vocab: Vocabulary,
    model: EsiModel,
    opt: AdamW,
    epoch: usize,
    global_step: u64,
    history: Vec<EpochStats>,
    pairs: &'a [EcgTextPair],
    tokens: Vec<Tokenized>,
    batch_size: usize,
}

impl<'a> Trainer<'a> {
    /// Builds the vocabulary from the pair descriptions and initializes the model.
    pub fn new(pairs: &'a [EcgTextPair], config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_pairs(pairs)?;
        let texts: Vec<&str> = pairs.iter().map(|p| p.description.as_str()).collect();
        let vocab = build_vocab(&texts, config.min_freq)?;
        let mc = config.model_config(vocab.len());
        let model = EsiModel::new(&mc, config.loss.init_sigma, config.seed, DType::F32)?;
        let opt = AdamW::new(&model.store, config.weight_decay)?;
        Self::assemble(pairs, config.clone(), vocab, model, opt, 0, 0, Vec::new())
    }

    /// Continues from a checkpoint on the same pairs.
    pub fn from_checkpoint(pairs: &'a [EcgTextPair], ckpt: &Checkpoint) -> Result<Self> {
        check_pairs(pairs)?;
        let model = ckpt.model()?;
        let mut opt = AdamW::new(&model.store, ckpt.config.weight_decay)?;
        opt.set_state(ckpt.optimizer_state(&model)?)?;
        Self::assemble(
            pairs,
            ckpt.config.clone(),
            ckpt.vocab.clone(),
            model,
            opt,
            ckpt.epoch,
            ckpt.global_step,
            ckpt.history.clone(),
        )
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        pairs: &'a [EcgTextPair],
        config: TrainConfig,
        vocab: Vocabulary,
        model: EsiModel,
        opt: AdamW,
        epoch: usize,
        global_step: u64,
        history: Vec<EpochStats>,
    ) -> Result<Self> {
        let tokens = pairs
            .iter()
            .map(|p| tokenize(&p.description, &vocab, config.text.max_len))
            .collect::<Result<Vec<_>>>()?;
        let batch_size = if pairs.len() < config.batch_size {
            log::warn!(
                "only {} pairs for batch size {}; using the full set as one batch",
                pairs.len(),
                config.batch_size
            );
            pairs.len()
        } else {
            config.batch_size
        };
        Ok(Self {
            config,
            vocab,
            model,
            opt,
            epoch,
            global_step,
            history,
            pairs,
            tokens,
            batch_size,
        })
    }

    pub fn model(&self) -> &EsiModel {
        &self.model
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn history(&self) -> &[EpochStats] {
        &self.history
    }

    fn batches_per_pass(&self) -> usize {
        self.pairs.len() / self.batch_size
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.config.steps_per_epoch.unwrap_or_else(|| self.batches_per_pass())
    }

    fn pass_order(&self, pass: u64) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(pass + 1);
        let mut order: Vec<usize> = (0..self.pairs.len()).collect();
        order.shuffle(&mut rng);
        order
    }

    fn trainable(&self) -> impl Fn(&ParamEntry) -> bool {
        let freeze_text = self.config.freeze_text;
        move |e: &ParamEntry| !(freeze_text && e.group == ParamGroup::Text)
    }

    pub fn train_epoch(&mut self) -> Result<EpochStats> {
        let spe = self.steps_per_epoch();
        let per_pass = self.batches_per_pass() as u64;
        let first = self.epoch as u64 * spe as u64;
        let mut cached: Option<(u64, Vec<usize>)> = None;
        let (mut sum_total, mut sum_con, mut sum_cap) = (0.0, 0.0, 0.0);
        let mut lr = 0.0;
        for b in 0..spe {
            let g = first + b as u64;
            let pass = g / per_pass;
            if cached.as_ref().map(|c| c.0) != Some(pass) {
                cached = Some((pass, self.pass_order(pass)));
            }
            let order = &cached.as_ref().unwrap().1;
            let j = (g % per_pass) as usize;
            let idx = order[j * self.batch_size..(j + 1) * self.batch_size].to_vec();
            lr = lr_at(self.global_step, spe, &self.config);
            let (t, c, p) = self.step(&idx, lr, b)?;
            sum_total += t;
            sum_con += c.unwrap_or(0.0);
            sum_cap += p.unwrap_or(0.0);
        }
        let n = spe as f64;
        let stats = EpochStats {
            epoch: self.epoch,
            steps: spe,
            mean_total: sum_total / n,
            mean_con: (self.config.loss.lambda_con > 0.0).then_some(sum_con / n),
            mean_cap: (self.config.loss.lambda_cap > 0.0).then_some(sum_cap / n),
            lr_last: lr,
            sigma: self.model.sigma()?,
        };
        log::info!(
            "epoch {} loss {:.5} (con {:?}, cap {:?}) sigma {:.4}",
            stats.epoch,
            stats.mean_total,
            stats.mean_con,
            stats.mean_cap,
            stats.sigma
        );
        self.history.push(stats.clone());
        self.epoch += 1;
        Ok(stats)
    }

    fn step(&mut self, idx: &[usize], lr: f64, batch_no: usize) -> Result<(f64, Option<f64>, Option<f64>)> {
        let records: Vec<&EcgRecord> = idx.iter().map(|&i| self.pairs[i].record.as_ref()).collect();
        let texts: Vec<Tokenized> = idx.iter().map(|&i| self.tokens[i].clone()).collect();
        let x = records_to_tensor(&records, self.model.dtype(), self.model.store.device())?;
        let parts = self.model.losses(&x, &texts, &self.config.loss)?;
        let total = scalar(&parts.total)?;
        if !total.is_finite() {
            let record_ids: Vec<String> = records.iter().map(|r| r.record_id.clone()).collect();
            log::error!("non-finite loss at epoch {} batch {batch_no}: {record_ids:?}", self.epoch);
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch,
                batch: batch_no,
                record_ids,
            });
        }
        let con = parts.con.as_ref().map(scalar).transpose()?;
        let cap = parts.cap.as_ref().map(scalar).transpose()?;
        let mut grads = parts.total.backward()?;
        let trainable = self.trainable();
        clip_grad_norm(&self.model.store, &mut grads, &trainable, self.config.clip_norm)?;
        self.opt.step(&self.model.store, &grads, lr, &trainable)?;
        let ls = self.model.log_sigma.clamp(SIGMA_MIN.ln(), SIGMA_MAX.ln())?;
        if let Some(e) = self.model.store.get("log_sigma") {
            e.var.set(&ls)?;
        }
        self.global_step += 1;
        Ok((total, con, cap))
    }

    /// Trains until `epoch` epochs have completed in total.
    pub fn run_until(&mut self, epoch: usize) -> Result<()> {
        while self.epoch < epoch.min(self.config.epochs) {
            self.train_epoch()?;
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        Checkpoint::capture(
            &self.config,
            &self.vocab,
            &self.model,
            self.opt.state(),
            self.epoch,
            self.global_step,
            &self.history,
        )
    }
}

fn check_pairs(pairs: &[EcgTextPair]) -> Result<()> {
    if pairs.len() < 2 {
        return Err(Error::Validation(format!("pretraining needs at least 2 pairs, got {}", pairs.len())));
    }
    Ok(())
}

/// Trains from scratch for `config.epochs` epochs.
pub fn pretrain(pairs: &[EcgTextPair], config: &TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(pairs, config)?;
    trainer.run_until(config.epochs)?;
    trainer.checkpoint()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_reference_points() {
        let c = TrainConfig::esi();
        let spe = 100;
        assert_eq!(lr_at(0, spe, &c), 0.0);
        assert!((lr_at(250, spe, &c) - 2.5e-5).abs() < 1e-18);
        assert_eq!(lr_at(5 * 100, spe, &c), 5e-5);
        assert_eq!(lr_at(15 * 100 - 1, spe, &c), 5e-5);
        assert!((lr_at(15 * 100, spe, &c) - 5e-6).abs() < 1e-18);
        assert!((lr_at(25 * 100, spe, &c) - 5e-7).abs() < 1e-18);
        let from_zero = TrainConfig {
            decay_from_start: true,
            ..c
        };
        assert!((lr_at(10 * 100, spe, &from_zero) - 5e-6).abs() < 1e-18);
        assert_eq!(lr_at(9 * 100, spe, &from_zero), 5e-5);
    }

    #[test]
    fn invalid_configs_rejected() {
        let mut c = TrainConfig::micro();
        c.warmup_epochs = c.epochs;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::micro();
        c.base_lr = 0.0;
        assert!(c.validate().is_err());
        let mut c = TrainConfig::micro();
        c.loss.lambda_con = 0.0;
        c.loss.lambda_cap = 0.0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn resolved_model_config_is_consistent() {
        for c in [TrainConfig::micro(), TrainConfig::esi_tiny(), TrainConfig::esi()] {
            c.model_config(50).validate().unwrap();
        }
    }
}
