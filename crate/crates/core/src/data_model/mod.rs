//! ECG records, text pairs, the on-disk manifest format and batching.
//!
//! Signals live in memory as lead-major `f32` and are stored on disk as raw
//! little-endian `f32` files, one per record, referenced from a JSON-lines
//! manifest.

mod batch;
mod manifest;
mod misalign;
mod synth;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use batch::{batch_iterator, Batches};
pub use manifest::{
    load_manifest, read_descriptions, save_manifest, write_descriptions, ManifestEntry,
};
pub use misalign::{inject_misalignment, Misaligned};
pub use synth::{synthesize_ecg, SyntheticSpec, WaveParams};

pub const DEFAULT_SAMPLING_RATE_HZ: u32 = 500;

/// Dense lead-major signal matrix in millivolts.
#[derive(Clone, Debug, PartialEq)]
pub struct Signal {
    n_leads: usize,
    n_samples: usize,
    data: Vec<f32>,
}

impl Signal {
    pub fn new(n_leads: usize, n_samples: usize, data: Vec<f32>) -> Result<Self> {
        if n_leads == 0 || n_samples == 0 {
            return Err(Error::Shape(format!(
                "signal must have at least one lead and one sample, got {n_leads}x{n_samples}"
            )));
        }
        if data.len() != n_leads * n_samples {
            return Err(Error::Shape(format!(
                "signal buffer holds {} values, expected {n_leads}x{n_samples}",
                data.len()
            )));
        }
        Ok(Self {
            n_leads,
            n_samples,
            data,
        })
    }

    pub fn n_leads(&self) -> usize {
        self.n_leads
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn lead(&self, i: usize) -> &[f32] {
        &self.data[i * self.n_samples..(i + 1) * self.n_samples]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Samples `[start, start + len)` of every lead.
    pub fn window(&self, start: usize, len: usize) -> Result<Signal> {
        if len == 0 || start + len > self.n_samples {
            return Err(Error::Argument(format!(
                "window [{start}, {}) outside signal of {} samples",
                start + len,
                self.n_samples
            )));
        }
        let mut data = Vec::with_capacity(self.n_leads * len);
        for l in 0..self.n_leads {
            data.extend_from_slice(&self.lead(l)[start..start + len]);
        }
        Signal::new(self.n_leads, len, data)
    }

    /// Integer-factor decimation by block averaging.
    pub fn decimate(&self, factor: usize) -> Result<Signal> {
        if factor == 0 {
            return Err(Error::Argument("decimation factor must be positive".into()));
        }
        let n = self.n_samples / factor;
        if n == 0 {
            return Err(Error::Argument(format!(
                "decimation by {factor} leaves no samples of {}",
                self.n_samples
            )));
        }
        let mut data = Vec::with_capacity(self.n_leads * n);
        for l in 0..self.n_leads {
            let lead = self.lead(l);
            for i in 0..n {
                let block = &lead[i * factor..(i + 1) * factor];
                let sum: f64 = block.iter().map(|&v| v as f64).sum();
                data.push((sum / factor as f64) as f32);
            }
        }
        Signal::new(self.n_leads, n, data)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Sex {
    Male,
    Female,
    Unknown,
}

impl fmt::Display for Sex {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Sex::Male => "male",
            Sex::Female => "female",
            Sex::Unknown => "unknown",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EcgRecord {
    pub record_id: String,
    pub signal: Signal,
    pub sampling_rate_hz: u32,
    pub age_years: Option<u32>,
    pub sex: Option<Sex>,
    pub labels: Vec<String>,
    pub machine_report: Option<String>,
}

impl EcgRecord {
    pub fn new(record_id: impl Into<String>, signal: Signal, sampling_rate_hz: u32) -> Self {
        Self {
            record_id: record_id.into(),
            signal,
            sampling_rate_hz,
            age_years: None,
            sex: None,
            labels: Vec::new(),
            machine_report: None,
        }
    }

    pub fn duration_s(&self) -> f64 {
        self.signal.n_samples() as f64 / self.sampling_rate_hz as f64
    }

    pub fn validate(&self) -> Result<()> {
        if self.record_id.is_empty() {
            return Err(Error::Validation("record_id must be nonempty".into()));
        }
        if self.sampling_rate_hz == 0 {
            return Err(Error::Validation(format!(
                "record {}: sampling rate must be positive",
                self.record_id
            )));
        }
        if !self.signal.is_finite() {
            return Err(Error::Validation(format!(
                "record {}: signal contains non-finite values",
                self.record_id
            )));
        }
        Ok(())
    }

    /// Fixed-length segment starting `offset_s` seconds into the recording.
    /// Identification benchmarks use the leading segment (offset 0).
    pub fn segment(&self, offset_s: f64, length_s: f64) -> Result<EcgRecord> {
        let fs = self.sampling_rate_hz as f64;
        let start = (offset_s * fs).round() as usize;
        let len = (length_s * fs).round() as usize;
        let mut out = self.clone();
        out.signal = self.signal.window(start, len)?;
        Ok(out)
    }

    pub fn decimate(&self, factor: usize) -> Result<EcgRecord> {
        if self.sampling_rate_hz as usize % factor != 0 {
            return Err(Error::Argument(format!(
                "sampling rate {} not divisible by {factor}",
                self.sampling_rate_hz
            )));
        }
        let mut out = self.clone();
        out.signal = self.signal.decimate(factor)?;
        out.sampling_rate_hz = self.sampling_rate_hz / factor as u32;
        Ok(out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceTag {
    CqaGenerated,
    Manual,
    Synthetic,
}

/// Unit of pretraining. The record is shared so that reshuffled pair lists
/// do not copy signal buffers.
#[derive(Clone, Debug)]
pub struct EcgTextPair {
    pub record: Arc<EcgRecord>,
    pub description: String,
    pub source_tag: SourceTag,
}

impl EcgTextPair {
    pub fn new(record: Arc<EcgRecord>, description: impl Into<String>, source_tag: SourceTag) -> Result<Self> {
        let description = description.into();
        if description.trim().is_empty() {
            return Err(Error::Validation(format!(
                "record {}: description must be nonempty",
                record.record_id
            )));
        }
        Ok(Self {
            record,
            description,
            source_tag,
        })
    }
}
