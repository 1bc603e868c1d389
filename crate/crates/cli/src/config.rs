//! Experiment configuration: preset defaults, then the TOML file, then
//! `--set` and dedicated flags.

use std::path::Path;

use anyhow::{bail, Context, Result};
use clap::ValueEnum;
use serde::{Deserialize, Serialize};

use esi_core::benchmark::{AcquisitionProfile, BenchmarkConfig};
use esi_core::cqa::{HashEmbedder, DEFAULT_CHUNK_CHARS, DEFAULT_K, DEFAULT_OVERLAP_CHARS};
use esi_core::downstream::{FineTuneConfig, ProbeConfig, TaskKind};
use esi_core::pretrainer::TrainConfig;

use crate::Invalid;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    /// Desk-scale towers, minutes on one core.
    Micro,
    EsiTiny,
    Esi,
}

impl Preset {
    fn train(self) -> TrainConfig {
        match self {
            Preset::Micro => TrainConfig::micro(),
            Preset::EsiTiny => TrainConfig::esi_tiny(),
            Preset::Esi => TrainConfig::esi(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub task: TaskKind,
    /// Empty: the benchmark classes, or the sorted labels of the manifest.
    pub classes: Vec<String>,
    /// Empty: one generated prompt per class.
    pub prompts: Vec<String>,
    /// Segment length in seconds; unset means the benchmark record length.
    pub segment_s: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationOptions {
    /// Training seeds averaged per grid point. Empty means the run seed.
    pub seeds: Vec<u64>,
    pub mmd_samples: usize,
    /// Acquisition profile of the held-out split.
    pub test_profile: AcquisitionProfile,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CqaOptions {
    pub k: usize,
    pub chunk_chars: usize,
    pub overlap_chars: usize,
    pub embed_dim: usize,
}

/// Everything an experiment reads. The top-level `seed` overrides the
/// per-section seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub preset: Preset,
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
    pub probe: ProbeConfig,
    pub finetune: FineTuneConfig,
    pub eval: EvalOptions,
    pub ablation: AblationOptions,
    pub cqa: CqaOptions,
}

impl ExperimentConfig {
    pub fn for_preset(preset: Preset) -> Self {
        Self {
            seed: 0,
            preset,
            train: preset.train(),
            benchmark: BenchmarkConfig::default(),
            probe: ProbeConfig::default(),
            finetune: FineTuneConfig::default(),
            eval: EvalOptions {
                task: TaskKind::MultilabelDiagnosis,
                classes: Vec::new(),
                prompts: Vec::new(),
                segment_s: None,
            },
            ablation: AblationOptions {
                seeds: Vec::new(),
                mmd_samples: 512,
                test_profile: AcquisitionProfile::shifted(),
            },
            cqa: CqaOptions {
                k: DEFAULT_K,
                chunk_chars: DEFAULT_CHUNK_CHARS,
                overlap_chars: DEFAULT_OVERLAP_CHARS,
                embed_dim: HashEmbedder::DEFAULT_DIM,
            },
        }
    }

    /// Layers `file` and then `sets` (`dotted.key=value`) over the preset
    /// defaults. The preset comes from `preset`, else the file, else micro.
    pub fn load(file: Option<&Path>, preset: Option<Preset>, sets: &[String], seed: Option<u64>) -> Result<Self> {
        let mut user = toml::Table::new();
        if let Some(path) = file {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
            user = text
                .parse::<toml::Table>()
                .map_err(|e| Invalid(format!("config {}: {e}", path.display())))?;
        }
        for s in sets {
            let (key, value) = s
                .split_once('=')
                .ok_or_else(|| Invalid(format!("--set expects key=value, got {s:?}")))?;
            set_dotted(&mut user, key.trim(), parse_value(value.trim()))?;
        }
        let preset = match preset {
            Some(p) => p,
            None => match user.get("preset") {
                Some(v) => Preset::deserialize(v.clone()).map_err(|e| Invalid(format!("preset: {e}")))?,
                None => Preset::Micro,
            },
        };
        let mut base = toml::Table::try_from(Self::for_preset(preset)).context("serializing defaults")?;
        merge(&mut base, user.clone());
        base.insert("preset".into(), toml::Value::try_from(preset)?);
        let mut cfg: Self = toml::Value::Table(base)
            .try_into()
            .map_err(|e: toml::de::Error| Invalid(format!("config: {e}")))?;
        if let Some(s) = seed {
            cfg.seed = s;
        }
        check_known(&user, &toml::Table::try_from(&cfg)?, "")?;
        cfg.propagate_seed();
        cfg.validate()?;
        Ok(cfg)
    }

    fn propagate_seed(&mut self) {
        self.train.seed = self.seed;
        self.benchmark.seed = self.seed;
        self.finetune.seed = self.seed;
    }

    pub fn ablation_seeds(&self) -> Vec<u64> {
        if self.ablation.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.ablation.seeds.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate().map_err(|e| Invalid(e.to_string()))?;
        self.benchmark.validate().map_err(|e| Invalid(e.to_string()))?;
        self.finetune.validate().map_err(|e| Invalid(e.to_string()))?;
        if self.cqa.k == 0 || self.cqa.embed_dim == 0 || self.cqa.chunk_chars <= self.cqa.overlap_chars {
            bail!(Invalid("cqa: k and embed_dim must be positive and chunk_chars > overlap_chars".into()));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // Anything that is not a TOML literal is taken as a bare string.
    match format!("v = {raw}").parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").expect("parsed key"),
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts.pop().filter(|k| !k.is_empty()).ok_or_else(|| Invalid(format!("empty key in --set {key}")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur.entry(p.to_string()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Invalid(format!("--set {key}: {p} is not a table")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

/// Rejects keys of `user` that did not survive deserialization.
fn check_known(user: &toml::Table, resolved: &toml::Table, prefix: &str) -> Result<()> {
    for (k, v) in user {
        let path = format!("{prefix}{k}");
        match (resolved.get(k), v) {
            (None, _) => bail!(Invalid(format!("unknown config key {path}"))),
            (Some(toml::Value::Table(r)), toml::Value::Table(u)) => check_known(u, r, &format!("{path}."))?,
            _ => {}
        }
    }
    Ok(())
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}
