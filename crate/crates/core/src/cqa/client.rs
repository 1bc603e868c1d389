use serde_json::json;

use super::first_sentence;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct LabelEvidence {
    pub label: String,
    /// Text of the top-ranked chunk for this label's query.
    pub best_chunk: Option<String>,
}

/// Everything a client may use. Remote clients only read `prompt`; the
/// structured fields let local clients work without a language model.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationRequest {
    pub prompt: String,
    pub demographics: Option<String>,
    pub labels: Vec<LabelEvidence>,
    pub machine_report: Option<String>,
    pub report_chunk: Option<String>,
}

pub trait GenerationClient: Send + Sync {
    fn generate(&self, request: &GenerationRequest) -> Result<String>;
}

/// Template filler: demographics sentence, then `"<label>: <first sentence of
/// best chunk>"` per label. Without labels the report and its best chunk are
/// used instead.
#[derive(Clone, Copy, Debug, Default)]
pub struct MockClient;

impl GenerationClient for MockClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        let mut parts: Vec<String> = Vec::new();
        if let Some(d) = &req.demographics {
            parts.push(d.clone());
        }
        for ev in &req.labels {
            let body = ev
                .best_chunk
                .as_deref()
                .map(first_sentence)
                .unwrap_or("no reference waveform description retrieved.");
            parts.push(format!("{}: {}", ev.label, body));
        }
        if req.labels.is_empty() {
            if let Some(report) = &req.machine_report {
                let report = report.trim_end_matches('.');
                parts.push(format!("Machine report: {report}."));
                if let Some(c) = &req.report_chunk {
                    parts.push(first_sentence(c).to_string());
                }
            }
        }
        Ok(parts.join(" "))
    }
}

/// OpenAI-compatible chat-completions client. Reads `ESI_LLM_API_KEY`,
/// `ESI_LLM_BASE_URL` and `ESI_LLM_MODEL`.
#[derive(Clone, Debug)]
pub struct ExternalClient {
    base_url: String,
    api_key: String,
    model: String,
}

impl ExternalClient {
    pub fn new(base_url: impl Into<String>, api_key: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            base_url: base_url.into(),
            api_key: api_key.into(),
            model: model.into(),
        }
    }

    pub fn from_env() -> Result<Self> {
        let key = std::env::var("ESI_LLM_API_KEY")
            .map_err(|_| Error::Argument("ESI_LLM_API_KEY must be set for the external client".into()))?;
        let base = std::env::var("ESI_LLM_BASE_URL").unwrap_or_else(|_| "https://api.openai.com/v1".into());
        let model = std::env::var("ESI_LLM_MODEL").unwrap_or_else(|_| "gpt-3.5-turbo".into());
        Ok(Self::new(base, key, model))
    }
}

impl GenerationClient for ExternalClient {
    fn generate(&self, req: &GenerationRequest) -> Result<String> {
        let fail = |message: String| Error::Generation {
            message,
            prompt: req.prompt.clone(),
        };
        let url = format!("{}/chat/completions", self.base_url.trim_end_matches('/'));
        let resp = ureq::post(&url)
            .set("Authorization", &format!("Bearer {}", self.api_key))
            .send_json(json!({
                "model": self.model,
                "temperature": 0,
                "messages": [{ "role": "user", "content": req.prompt }],
            }))
            .map_err(|e| fail(e.to_string()))?;
        let body: serde_json::Value = resp.into_json().map_err(|e| fail(e.to_string()))?;
        body["choices"][0]["message"]["content"]
            .as_str()
            .map(|s| s.trim().to_string())
            .ok_or_else(|| fail(format!("malformed completion response: {body}")))
    }
}
