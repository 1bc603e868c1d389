//! Zero-shot classification, linear probing, fine-tuning, evaluation metrics
//! and the pretraining ablations.

pub mod ablation;
mod finetune;
mod metrics;
pub mod probe;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::data_model::EcgRecord;
use crate::error::{Error, Result};
use crate::model::EsiModel;
use crate::nn::ParamGroup;
use crate::pretrainer::Checkpoint;

pub use ablation::{run_ablation, AblationKind, AblationRow, AblationSetup, AblationTable, COMPONENTS};
pub use finetune::{fine_tune, FineTuneConfig, FineTuned};
pub use metrics::{auc_binary, macro_f1, median_bandwidth, metric_auc, mmd, AucReport};
pub use probe::{train_linear_head, LinearHead, ProbeConfig, ProbeLoss};

const EMBED_CHUNK: usize = 64;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskKind {
    MultilabelDiagnosis,
    SingleLabelIdentification,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub kind: TaskKind,
    /// Class names, or subject ids for identification.
    pub classes: Vec<String>,
    /// One prompt per class; empty when zero-shot is not used.
    pub prompts: Vec<String>,
    /// Leading segment length in seconds fed to the encoder.
    pub segment_s: f64,
}

impl TaskSpec {
    pub fn new(kind: TaskKind, classes: Vec<String>, prompts: Vec<String>, segment_s: f64) -> Result<Self> {
        let t = Self {
            kind,
            classes,
            prompts,
            segment_s,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Validation("a task needs at least 2 classes".into()));
        }
        if !self.prompts.is_empty() && self.prompts.len() != self.classes.len() {
            return Err(Error::Validation(format!(
                "{} prompts for {} classes",
                self.prompts.len(),
                self.classes.len()
            )));
        }
        if self.prompts.iter().any(|p| p.trim().is_empty()) {
            return Err(Error::Validation("prompts must be nonempty".into()));
        }
        if !(self.segment_s > 0.0 && self.segment_s.is_finite()) {
            return Err(Error::Validation("segment length must be positive".into()));
        }
        Ok(())
    }

    fn probe_loss(&self) -> ProbeLoss {
        match self.kind {
            TaskKind::MultilabelDiagnosis => ProbeLoss::Binary,
            TaskKind::SingleLabelIdentification => ProbeLoss::CrossEntropy,
        }
    }

    /// Binary label matrix from each record's label list.
    pub fn labels(&self, records: &[Arc<EcgRecord>]) -> Result<Vec<Vec<bool>>> {
        let rows: Vec<Vec<bool>> = records
            .iter()
            .map(|r| self.classes.iter().map(|c| r.labels.iter().any(|l| l == c)).collect())
            .collect();
        if self.kind == TaskKind::SingleLabelIdentification {
            if let Some((r, _)) = records
                .iter()
                .zip(&rows)
                .find(|(_, row)| row.iter().filter(|&&b| b).count() != 1)
            {
                return Err(Error::Validation(format!(
                    "record {} must match exactly one class",
                    r.record_id
                )));
            }
        }
        Ok(rows)
    }

    /// Leading `segment_s` seconds of each record.
    pub fn segments(&self, records: &[Arc<EcgRecord>]) -> Result<Vec<EcgRecord>> {
        records
            .iter()
            .map(|r| {
                if r.duration_s() + 1e-9 < self.segment_s {
                    Err(Error::Validation(format!(
                        "record {} lasts {:.2} s, shorter than the {:.2} s segment",
                        r.record_id,
                        r.duration_s(),
                        self.segment_s
                    )))
                } else {
                    r.segment(0.0, self.segment_s)
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    ZeroShot,
    LinearProbe,
    FineTune,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub per_class_auc: Vec<Option<f64>>,
    pub macro_auc: f64,
    pub macro_f1: f64,
    pub accuracy: f64,
    pub n_eval: usize,
}

/// How scores become hard predictions.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Decision {
    Argmax,
    /// Per-class probability threshold.
    Threshold(f64),
}

fn argmax(row: &[f64]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
        .0
}

/// Scores a prediction matrix. Classes flagged in `exclude` (absent from
/// training labels) are dropped from the macro averages.
pub fn evaluate(
    setting: Setting,
    scores: &[Vec<f64>],
    labels: &[Vec<bool>],
    decision: Decision,
    exclude: &[bool],
) -> Result<EvalReport> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Shape(format!("{} score rows for {} label rows", scores.len(), labels.len())));
    }
    let c = labels[0].len();
    let mut auc = metric_auc(scores, labels);
    for (k, &ex) in exclude.iter().enumerate().take(c) {
        if ex {
            auc.per_class[k] = None;
        }
    }
    let valid: Vec<f64> = auc.per_class.iter().flatten().copied().collect();
    let macro_auc = if valid.is_empty() {
        f64::NAN
    } else {
        valid.iter().sum::<f64>() / valid.len() as f64
    };
    let pred: Vec<Vec<bool>> = scores
        .iter()
        .map(|row| match decision {
            Decision::Argmax => {
                let k = argmax(row);
                (0..c).map(|i| i == k).collect()
            }
            Decision::Threshold(t) => row.iter().map(|&v| v >= t).collect(),
        })
        .collect();
    let include: Vec<bool> = (0..c)
        .map(|k| !exclude.get(k).copied().unwrap_or(false) && labels.iter().any(|l| l[k]))
        .collect();
    let accuracy = pred.iter().zip(labels).filter(|(p, l)| p == l).count() as f64 / labels.len() as f64;
    Ok(EvalReport {
        setting,
        per_class_auc: auc.per_class,
        macro_auc,
        macro_f1: macro_f1(&pred, labels, &include),
        accuracy,
        n_eval: labels.len(),
    })
}

/// Cosine similarity between every row of `a` and every row of `b`.
pub fn cosine_scores(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let unit = |v: &Vec<f64>| -> Vec<f64> {
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter().map(|x| if n > 0.0 { x / n } else { 0.0 }).collect()
    };
    let b: Vec<Vec<f64>> = b.iter().map(unit).collect();
    a.iter()
        .map(|r| {
            let r = unit(r);
            b.iter().map(|p| p.iter().zip(&r).map(|(x, y)| x * y).sum()).collect()
        })
        .collect()
}

/// Pooled signal embeddings of each record's leading segment.
pub fn embed(model: &EsiModel, records: &[Arc<EcgRecord>], task: &TaskSpec) -> Result<Vec<Vec<f64>>> {
    let segs = task.segments(records)?;
    let refs: Vec<&EcgRecord> = segs.iter().collect();
    model.embed_records(&refs, EMBED_CHUNK)
}

/// Cosine similarity between each record and each class prompt.
pub fn zero_shot_scores(records: &[Arc<EcgRecord>], task: &TaskSpec, checkpoint: &Checkpoint) -> Result<Vec<Vec<f64>>> {
    task.validate()?;
    if task.prompts.is_empty() {
        return Err(Error::Validation("zero-shot classification needs class prompts".into()));
    }
    let model = checkpoint.model()?;
    let sig = embed(&model, records, task)?;
    let txt = model.embed_texts(&task.prompts, &checkpoint.vocab)?;
    Ok(cosine_scores(&sig, &txt))
}

/// Zero-shot scores and their evaluation against the records' labels.
/// Predictions take the most similar prompt.
pub fn zero_shot_classify(
    records: &[Arc<EcgRecord>],
    task: &TaskSpec,
    checkpoint: &Checkpoint,
) -> Result<(Vec<Vec<f64>>, EvalReport)> {
    let scores = zero_shot_scores(records, task, checkpoint)?;
    let labels = task.labels(records)?;
    let report = evaluate(Setting::ZeroShot, &scores, &labels, Decision::Argmax, &[])?;
    Ok((scores, report))
}

fn decision_for(task: &TaskSpec) -> Decision {
    match task.kind {
        TaskKind::MultilabelDiagnosis => Decision::Threshold(0.5),
        TaskKind::SingleLabelIdentification => Decision::Argmax,
    }
}

fn absent_classes(labels: &[Vec<bool>], task: &TaskSpec) -> Vec<bool> {
    (0..task.classes.len())
        .map(|k| {
            let absent = !labels.iter().any(|l| l[k]);
            if absent {
                log::warn!("class {} has no training examples; excluded from macro averages", task.classes[k]);
            }
            absent
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct Probed {
    pub head: LinearHead,
    pub report: EvalReport,
    /// Signal-encoder digest before and after probing; always equal.
    pub encoder_hash: String,
}

/// Linear head on frozen pooled embeddings, evaluated on `eval_records`.
pub fn linear_probe(
    train_records: &[Arc<EcgRecord>],
    eval_records: &[Arc<EcgRecord>],
    task: &TaskSpec,
    checkpoint: &Checkpoint,
    config: &ProbeConfig,
) -> Result<Probed> {
    let model = checkpoint.model()?;
    probe_model(&model, train_records, eval_records, task, config)
}

/// [`linear_probe`] on an already loaded model.
pub fn probe_model(
    model: &EsiModel,
    train_records: &[Arc<EcgRecord>],
    eval_records: &[Arc<EcgRecord>],
    task: &TaskSpec,
    config: &ProbeConfig,
) -> Result<Probed> {
    task.validate()?;
    let before = model.store.hash_group(ParamGroup::Signal)?;
    let train_labels = task.labels(train_records)?;
    let exclude = absent_classes(&train_labels, task);
    let x = embed(model, train_records, task)?;
    let head = train_linear_head(&x, &train_labels, task.probe_loss(), config)?;
    let eval_labels = task.labels(eval_records)?;
    let scores: Vec<Vec<f64>> = embed(model, eval_records, task)?
        .iter()
        .map(|e| head.predict_proba(e))
        .collect();
    let report = evaluate(Setting::LinearProbe, &scores, &eval_labels, decision_for(task), &exclude)?;
    let after = model.store.hash_group(ParamGroup::Signal)?;
    if before != after {
        return Err(Error::Numeric("signal encoder changed during probing".into()));
    }
    Ok(Probed {
        head,
        report,
        encoder_hash: after,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_is_scale_invariant_and_self_similar() {
        let sig = vec![vec![0.3, -0.2, 0.9], vec![1.0, 0.0, 0.0]];
        let txt = vec![vec![0.0, 1.0, 0.0], vec![0.3, -0.2, 0.9], vec![-1.0, 0.5, 0.5]];
        let s = cosine_scores(&sig, &txt);
        assert!((s[0][1] - 1.0).abs() < 1e-12);
        assert_eq!(argmax(&s[0]), 1);
        let big: Vec<Vec<f64>> = sig.iter().map(|r| r.iter().map(|v| v * 10.0).collect()).collect();
        let s2 = cosine_scores(&big, &txt);
        for (a, b) in s.iter().flatten().zip(s2.iter().flatten()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn evaluate_excludes_absent_classes() {
        let scores = vec![vec![0.9, 0.1, 0.2], vec![0.2, 0.8, 0.7], vec![0.1, 0.3, 0.9]];
        let labels = vec![
            vec![true, false, false],
            vec![false, true, false],
            vec![false, false, true],
        ];
        let r = evaluate(Setting::LinearProbe, &scores, &labels, Decision::Argmax, &[false, false, true]).unwrap();
        assert_eq!(r.per_class_auc[2], None);
        assert_eq!(r.macro_auc, 1.0);
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.n_eval, 3);
        let t = evaluate(Setting::LinearProbe, &scores, &labels, Decision::Threshold(0.5), &[]).unwrap();
        assert!((t.accuracy - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn task_validation() {
        let c = vec!["a".to_string(), "b".to_string()];
        assert!(TaskSpec::new(TaskKind::MultilabelDiagnosis, c[..1].to_vec(), vec![], 5.0).is_err());
        assert!(TaskSpec::new(TaskKind::MultilabelDiagnosis, c.clone(), vec!["x".into()], 5.0).is_err());
        assert!(TaskSpec::new(TaskKind::MultilabelDiagnosis, c.clone(), vec!["x".into(), " ".into()], 5.0).is_err());
        assert!(TaskSpec::new(TaskKind::SingleLabelIdentification, c, vec![], 4.0).is_ok());
    }
}
