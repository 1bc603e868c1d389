//! Cardio Query Assistant: knowledge-base construction, retrieval and
//! retrieval-augmented description generation.
//!
//! Embedding and text generation sit behind [`Embedder`] and
//! [`GenerationClient`]. The defaults ([`HashEmbedder`], [`MockClient`]) are
//! local and deterministic; [`ExternalEmbedder`] and [`ExternalClient`] talk to
//! OpenAI-compatible HTTP endpoints.

mod chunk;
mod client;
mod corpus;
mod embed;
mod kb;

use serde::{Deserialize, Serialize};

use crate::data_model::{EcgRecord, Sex};
use crate::error::{Error, Result};

pub use chunk::{chunk_document, join_chunks};
pub use client::{ExternalClient, GenerationClient, GenerationRequest, LabelEvidence, MockClient};
pub use corpus::{expand_label, seed_documents};
pub use embed::{embed_text, Embedder, ExternalEmbedder, HashEmbedder};
pub use kb::{retrieve, KnowledgeBase, KnowledgeChunk};

pub const DEFAULT_K: usize = 4;
pub const DEFAULT_CHUNK_CHARS: usize = 800;
pub const DEFAULT_OVERLAP_CHARS: usize = 100;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct QueryContext {
    pub labels: Vec<String>,
    pub age_years: Option<u32>,
    pub sex: Option<Sex>,
    pub machine_report: Option<String>,
}

impl QueryContext {
    pub fn from_record(rec: &EcgRecord) -> Self {
        Self {
            labels: rec.labels.clone(),
            age_years: rec.age_years,
            sex: rec.sex,
            machine_report: rec.machine_report.clone(),
        }
    }

    fn report(&self) -> Option<&str> {
        self.machine_report.as_deref().map(str::trim).filter(|r| !r.is_empty())
    }

    /// Labels trimmed, empties dropped, duplicates removed in first-seen order.
    fn distinct_labels(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for l in &self.labels {
            let l = l.trim();
            if !l.is_empty() && !out.iter().any(|o| o == l) {
                out.push(l.to_string());
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.distinct_labels().is_empty() && self.report().is_none() {
            return Err(Error::Argument("query context needs labels or a machine report".into()));
        }
        Ok(())
    }
}

/// `"<age>-year-old <sex> patient."`, or `None` when neither field is known.
/// `Sex::Unknown` counts as absent.
pub fn demographics_sentence(age: Option<u32>, sex: Option<Sex>) -> Option<String> {
    let sex = sex.filter(|s| *s != Sex::Unknown);
    match (age, sex) {
        (Some(a), Some(s)) => Some(format!("{a}-year-old {s} patient.")),
        (Some(a), None) => Some(format!("{a}-year-old patient.")),
        (None, Some(s)) => {
            let s = s.to_string();
            let mut c = s.chars();
            let first = c.next().map(|f| f.to_uppercase().collect::<String>()).unwrap_or_default();
            Some(format!("{first}{} patient.", c.as_str()))
        }
        (None, None) => None,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedDescription {
    pub text: String,
    pub retrieved_chunk_ids: Vec<usize>,
    pub prompt: String,
    /// False when nothing could be retrieved and the text rests on labels
    /// and demographics alone.
    pub grounded: bool,
}

fn label_query(label: &str) -> String {
    match expand_label(label) {
        Some(name) => format!("{label} {name}"),
        None => label.to_string(),
    }
}

/// Text up to and including the first sentence terminator followed by
/// whitespace (or the whole text).
pub fn first_sentence(text: &str) -> &str {
    let t = text.trim();
    let bytes = t.as_bytes();
    for (i, &b) in bytes.iter().enumerate() {
        if matches!(b, b'.' | b'!' | b'?') && bytes.get(i + 1).is_none_or(|n| n.is_ascii_whitespace()) {
            return &t[..=i];
        }
    }
    t
}

fn build_prompt(
    demographics: Option<&str>,
    labels: &[String],
    report: Option<&str>,
    chunks: &[&KnowledgeChunk],
) -> String {
    let mut p = String::from(
        "You are a cardiology assistant. Using only the reference material, describe the waveform \
         features expected on this 12-lead ECG, naming the leads where each feature appears.\n",
    );
    p.push_str(&format!("Patient: {}\n", demographics.unwrap_or("demographics not provided.")));
    p.push_str(&format!(
        "Conditions: {}\n",
        if labels.is_empty() { "none listed".to_string() } else { labels.join(", ") }
    ));
    p.push_str(&format!("Machine report: {}\n", report.unwrap_or("none")));
    p.push_str("Reference material:\n");
    if chunks.is_empty() {
        p.push_str("(none retrieved)\n");
    }
    for (i, c) in chunks.iter().enumerate() {
        p.push_str(&format!("[{}] ({}) {}\n", i + 1, c.source, c.text));
    }
    p.push_str(
        "Start with the patient sentence, then write one sentence per condition in the form \
         \"<condition>: <expected waveform features>\".",
    );
    p
}

/// Retrieves evidence for every label (one query per label, results
/// unioned) and for the machine report, then asks `client` for the text.
pub fn generate_description(
    context: &QueryContext,
    kb: &KnowledgeBase,
    embedder: &dyn Embedder,
    client: &dyn GenerationClient,
    k: usize,
) -> Result<GeneratedDescription> {
    context.validate()?;
    let labels = context.distinct_labels();
    let report = context.report();
    let demographics = demographics_sentence(context.age_years, context.sex);

    let mut ids: Vec<usize> = Vec::new();
    let mut collect = |hits: &[(&KnowledgeChunk, f64)]| {
        for (c, _) in hits {
            if !ids.contains(&c.chunk_id) {
                ids.push(c.chunk_id);
            }
        }
    };

    let mut evidence = Vec::with_capacity(labels.len());
    for label in &labels {
        let hits = if kb.is_empty() { Vec::new() } else { retrieve(&label_query(label), k, kb, embedder)? };
        collect(&hits);
        evidence.push(LabelEvidence {
            label: label.clone(),
            best_chunk: hits.first().map(|(c, _)| c.text.clone()),
        });
    }
    let report_evidence = match report {
        Some(r) if !kb.is_empty() => {
            let hits = retrieve(r, k, kb, embedder)?;
            collect(&hits);
            hits.first().map(|(c, _)| c.text.clone())
        }
        _ => None,
    };

    let chunks: Vec<&KnowledgeChunk> = ids.iter().filter_map(|&i| kb.get(i)).collect();
    let prompt = build_prompt(demographics.as_deref(), &labels, report, &chunks);
    let request = GenerationRequest {
        prompt: prompt.clone(),
        demographics,
        labels: evidence,
        machine_report: report.map(str::to_string),
        report_chunk: report_evidence,
    };
    let text = client.generate(&request).map_err(|e| match e {
        Error::Generation { .. } => e,
        other => Error::Generation {
            message: other.to_string(),
            prompt: prompt.clone(),
        },
    })?;
    if text.trim().is_empty() {
        return Err(Error::Generation {
            message: "client returned empty text".into(),
            prompt,
        });
    }
    Ok(GeneratedDescription {
        text,
        grounded: !ids.is_empty(),
        retrieved_chunk_ids: ids,
        prompt,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seeded() -> (KnowledgeBase, HashEmbedder) {
        let e = HashEmbedder::default();
        (KnowledgeBase::build(seed_documents(), &e, DEFAULT_CHUNK_CHARS, DEFAULT_OVERLAP_CHARS).unwrap(), e)
    }

    fn rbbb_context() -> QueryContext {
        QueryContext {
            labels: vec!["RBBB".into()],
            age_years: Some(67),
            sex: Some(Sex::Male),
            machine_report: None,
        }
    }

    #[test]
    fn rbbb_description_has_demographics_and_waveform() {
        let (kb, e) = seeded();
        let d = generate_description(&rbbb_context(), &kb, &e, &MockClient, DEFAULT_K).unwrap();
        assert!(d.text.contains("67-year-old male"), "{}", d.text);
        assert!(d.text.contains("prolonged QRS duration"), "{}", d.text);
        assert!(d.grounded);
        assert!(d.retrieved_chunk_ids.iter().all(|&i| i < kb.len()));
        assert!(d.prompt.contains("RBBB"));
    }

    #[test]
    fn deterministic_with_mock() {
        let (kb, e) = seeded();
        let a = generate_description(&rbbb_context(), &kb, &e, &MockClient, 4).unwrap();
        let b = generate_description(&rbbb_context(), &kb, &e, &MockClient, 4).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn report_only_context_uses_report_retrieval() {
        let (kb, e) = seeded();
        let ctx = QueryContext {
            labels: vec![],
            age_years: None,
            sex: None,
            machine_report: Some("sinus tachycardia, fast heart rate".into()),
        };
        let d = generate_description(&ctx, &kb, &e, &MockClient, 2).unwrap();
        let oracle: Vec<usize> = retrieve("sinus tachycardia, fast heart rate", 2, &kb, &e)
            .unwrap()
            .iter()
            .map(|(c, _)| c.chunk_id)
            .collect();
        assert_eq!(d.retrieved_chunk_ids, oracle);
        assert!(d.text.contains("fast heart rate above 100"), "{}", d.text);
        assert!(!d.text.contains("patient."));
    }

    #[test]
    fn empty_context_rejected() {
        let (kb, e) = seeded();
        let ctx = QueryContext::default();
        assert!(matches!(
            generate_description(&ctx, &kb, &e, &MockClient, 4),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn empty_kb_gives_ungrounded_description() {
        let e = HashEmbedder::default();
        let kb = KnowledgeBase::empty(e.dim());
        let d = generate_description(&rbbb_context(), &kb, &e, &MockClient, 4).unwrap();
        assert!(!d.grounded);
        assert!(d.retrieved_chunk_ids.is_empty());
        assert!(d.text.starts_with("67-year-old male patient."));
    }

    struct Failing;
    impl GenerationClient for Failing {
        fn generate(&self, _: &GenerationRequest) -> Result<String> {
            Err(Error::Retryable("connection reset".into()))
        }
    }

    #[test]
    fn client_failure_carries_prompt() {
        let (kb, e) = seeded();
        match generate_description(&rbbb_context(), &kb, &e, &Failing, 4).unwrap_err() {
            Error::Generation { prompt, message } => {
                assert!(prompt.contains("Conditions: RBBB"));
                assert!(message.contains("connection reset"));
            }
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn demographics_phrasing() {
        assert_eq!(demographics_sentence(Some(67), Some(Sex::Male)).unwrap(), "67-year-old male patient.");
        assert_eq!(demographics_sentence(Some(5), None).unwrap(), "5-year-old patient.");
        assert_eq!(demographics_sentence(None, Some(Sex::Female)).unwrap(), "Female patient.");
        assert_eq!(demographics_sentence(None, Some(Sex::Unknown)), None);
        assert_eq!(demographics_sentence(None, None), None);
    }

    #[test]
    fn first_sentence_stops_at_terminator() {
        assert_eq!(first_sentence("A b. C d."), "A b.");
        assert_eq!(first_sentence("QRS 0.12 s wide. Next."), "QRS 0.12 s wide.");
        assert_eq!(first_sentence("no stop"), "no stop");
    }

    mod props {
        use proptest::prelude::*;

        use super::*;

        fn label() -> impl Strategy<Value = String> {
            prop::sample::select(vec![
                "NORM", "SBRAD", "STACH", "RBBB", "LBBB", "AFIB", "1AVB", "IMI", "LVH", "PVC", "XYZ", "block",
            ])
            .prop_map(str::to_string)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(64))]
            #[test]
            fn every_label_introduces_exactly_one_sentence(
                labels in prop::collection::vec(label(), 1..5),
                age in prop::option::of(18u32..95),
                sex in prop::option::of(prop::sample::select(vec![Sex::Male, Sex::Female])),
            ) {
                let (kb, e) = seeded();
                let ctx = QueryContext { labels: labels.clone(), age_years: age, sex, machine_report: None };
                let d = generate_description(&ctx, &kb, &e, &MockClient, 4).unwrap();
                let sentences: Vec<&str> = d.text.split_inclusive(". ").collect();
                for l in &labels {
                    let prefix = format!("{l}: ");
                    let n = sentences.iter().filter(|s| s.trim_start().starts_with(&prefix)).count();
                    prop_assert_eq!(n, 1, "label {} in {}", l, d.text);
                }
                prop_assert_eq!(d.text.contains("patient."), age.is_some() || sex.is_some());
                let again = generate_description(&ctx, &kb, &e, &MockClient, 4).unwrap();
                prop_assert_eq!(again, d);
            }
        }
    }
}
