use std::sync::Arc;

use candle_core::{DType, Device, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{absent_classes, decision_for, embed, evaluate, EvalReport, ProbeConfig, ProbeLoss, Setting, TaskSpec};
use crate::data_model::EcgRecord;
use crate::error::{Error, Result};
use crate::model::EsiModel;
use crate::nn::{clip_grad_norm, init_rng, log_softmax_last, scalar, AdamW, Init, ParamGroup, ParamStore};
use crate::pretrainer::Checkpoint;
use crate::signal_encoder::records_to_tensor;

use super::probe::{train_linear_head, LinearHead};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FineTuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Learning rate of the signal encoder.
    pub lr: f64,
    pub head_lr: f64,
    pub weight_decay: f64,
    pub clip_norm: f64,
    pub seed: u64,
    /// Settings of the probe that initializes the head.
    pub probe: ProbeConfig,
}

impl Default for FineTuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 16,
            lr: 1e-4,
            head_lr: 1e-3,
            weight_decay: 0.01,
            clip_norm: 1.0,
            seed: 0,
            probe: ProbeConfig::default(),
        }
    }
}

impl FineTuneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Validation("batch_size must be positive".into()));
        }
        for v in [self.lr, self.head_lr, self.clip_norm] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Validation("learning rates and clip_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

pub struct FineTuned {
    pub model: EsiModel,
    /// Head on raw pooled embeddings (identity standardization).
    pub head: LinearHead,
    pub report: EvalReport,
    /// Mean training loss per epoch.
    pub losses: Vec<f64>,
}

fn head_loss(logits: &Tensor, targets: &Tensor, loss: ProbeLoss) -> Result<Tensor> {
    let per = match loss {
        ProbeLoss::Binary => {
            // softplus(z) - t z, stable for large |z|.
            let sp = (logits.relu()? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
            (sp - (targets * logits)?)?.sum(1)?
        }
        ProbeLoss::CrossEntropy => (targets * log_softmax_last(logits)?)?.sum(1)?.neg()?,
    };
    Ok(per.mean_all()?)
}

/// Trains the signal encoder and a linear head jointly, starting the head
/// from a converged linear probe, then evaluates on `eval_records`.
pub fn fine_tune(
    train_records: &[Arc<EcgRecord>],
    eval_records: &[Arc<EcgRecord>],
    task: &TaskSpec,
    checkpoint: &Checkpoint,
    config: &FineTuneConfig,
) -> Result<FineTuned> {
    task.validate()?;
    config.validate()?;
    let model = checkpoint.model()?;
    let train_labels = task.labels(train_records)?;
    let exclude = absent_classes(&train_labels, task);
    let loss_kind = task.probe_loss();

    let probe = train_linear_head(&embed(&model, train_records, task)?, &train_labels, loss_kind, &config.probe)?;
    let (w0, b0) = probe.raw_affine();
    let c = w0.len();
    let d = w0[0].len();
    let mut head_store = ParamStore::new(DType::F32, Device::Cpu);
    let mut rng = init_rng(config.seed);
    let (w, b) = {
        let mut root = Init::new(&mut head_store, &mut rng, ParamGroup::Head);
        let mut init = root.push("head");
        (init.weight("weight", &[c, d])?, init.zeros("bias", &[c])?)
    };
    let flat: Vec<f32> = w0.iter().flatten().map(|&v| v as f32).collect();
    head_store.entries()[0].var.set(&Tensor::from_vec(flat, (c, d), &Device::Cpu)?)?;
    let bias: Vec<f32> = b0.iter().map(|&v| v as f32).collect();
    head_store.entries()[1].var.set(&Tensor::from_vec(bias, c, &Device::Cpu)?)?;

    let segs = task.segments(train_records)?;
    let mut enc_opt = AdamW::new(&model.store, config.weight_decay)?;
    let mut head_opt = AdamW::new(&head_store, config.weight_decay)?;
    let enc_trainable = |e: &crate::nn::ParamEntry| e.group == ParamGroup::Signal;
    let batch = config.batch_size.min(segs.len());
    let mut order: Vec<usize> = (0..segs.len()).collect();
    let mut losses = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let mut shuffle = ChaCha8Rng::seed_from_u64(config.seed);
        shuffle.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle);
        let mut sum = 0.0;
        let mut steps = 0;
        for idx in order.chunks(batch) {
            let recs: Vec<&EcgRecord> = idx.iter().map(|&i| &segs[i]).collect();
            let x = records_to_tensor(&recs, DType::F32, &Device::Cpu)?;
            let t: Vec<f32> = idx
                .iter()
                .flat_map(|&i| train_labels[i].iter().map(|&l| if l { 1.0 } else { 0.0 }))
                .collect();
            let targets = Tensor::from_vec(t, (idx.len(), c), &Device::Cpu)?;
            let pooled = model.signal.encode(&x)?.pooled;
            let logits = pooled.matmul(&w.t()?)?.broadcast_add(&b)?;
            let loss = head_loss(&logits, &targets, loss_kind)?;
            let lv = scalar(&loss)?;
            if !lv.is_finite() {
                return Err(Error::Numeric(format!("fine-tuning loss is {lv} at epoch {epoch}")));
            }
            let mut grads = loss.backward()?;
            clip_grad_norm(&model.store, &mut grads, enc_trainable, config.clip_norm)?;
            enc_opt.step(&model.store, &grads, config.lr, enc_trainable)?;
            head_opt.step(&head_store, &grads, config.head_lr, |_| true)?;
            sum += lv;
            steps += 1;
        }
        losses.push(sum / steps as f64);
        log::info!("fine-tune epoch {epoch} loss {:.5}", sum / steps as f64);
    }

    let weight: Vec<Vec<f64>> = w.to_dtype(DType::F64)?.to_vec2()?;
    let bias: Vec<f64> = b.to_dtype(DType::F64)?.to_vec1()?;
    let head = LinearHead {
        weight,
        bias,
        mean: vec![0.0; d],
        scale: vec![1.0; d],
        loss: loss_kind,
        iterations: losses.len(),
        converged: true,
    };
    let eval_labels = task.labels(eval_records)?;
    let scores: Vec<Vec<f64>> = embed(&model, eval_records, task)?
        .iter()
        .map(|e| head.predict_proba(e))
        .collect();
    let report = evaluate(Setting::FineTune, &scores, &eval_labels, decision_for(task), &exclude)?;
    Ok(FineTuned {
        model,
        head,
        report,
        losses,
    })
}
