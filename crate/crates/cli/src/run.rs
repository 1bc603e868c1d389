use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::SystemTime;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;

pub const RUN_MANIFEST: &str = "run.json";
pub const CONFIG_SNAPSHOT: &str = "config.toml";

/// Provenance of one experiment directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    /// Subcommand path, e.g. `ablate misalignment`.
    pub command: String,
    pub argv: Vec<String>,
    pub config: ExperimentConfig,
    pub seeds: Vec<u64>,
    pub source_revision: String,
    pub started_at: String,
    pub ended_at: String,
    /// Files written by the run, relative to its directory.
    pub outputs: Vec<String>,
}

impl RunManifest {
    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(RUN_MANIFEST);
        let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        Ok(serde_json::from_str(&text)?)
    }
}

pub fn source_revision() -> String {
    format!("{} ({})", env!("CARGO_PKG_VERSION"), env!("ESI_SOURCE_REV"))
}

pub fn timestamp(t: SystemTime) -> String {
    chrono::DateTime::<chrono::Utc>::from(t).to_rfc3339_opts(chrono::SecondsFormat::Secs, true)
}

/// Writes through a temporary file in the same directory and renames it
/// into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).with_context(|| format!("creating temp file in {}", dir.display()))?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

/// An experiment directory being filled by one command.
pub struct Run {
    pub dir: PathBuf,
    command: String,
    argv: Vec<String>,
    config: ExperimentConfig,
    seeds: Vec<u64>,
    started: SystemTime,
    outputs: Vec<String>,
}

impl Run {
    pub fn start(dir: &Path, command: &str, config: &ExperimentConfig, seeds: Vec<u64>) -> Result<Self> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let mut run = Self {
            dir: dir.to_path_buf(),
            command: command.to_string(),
            argv: std::env::args().collect(),
            config: config.clone(),
            seeds,
            started: SystemTime::now(),
            outputs: Vec::new(),
        };
        run.write(CONFIG_SNAPSHOT, config.to_toml()?.as_bytes())?;
        Ok(run)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    /// Records a file that something else already wrote.
    pub fn record(&mut self, name: &str) {
        if !self.outputs.iter().any(|o| o == name) {
            self.outputs.push(name.to_string());
        }
    }

    pub fn write(&mut self, name: &str, bytes: &[u8]) -> Result<()> {
        write_atomic(&self.path(name), bytes)?;
        self.record(name);
        Ok(())
    }

    pub fn write_json<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        let mut text = serde_json::to_string_pretty(value)?;
        text.push('\n');
        self.write(name, text.as_bytes())
    }

    /// Writes the manifest last so its presence marks a complete run.
    pub fn finish(self) -> Result<RunManifest> {
        let manifest = RunManifest {
            command: self.command,
            argv: self.argv,
            config: self.config,
            seeds: self.seeds,
            source_revision: source_revision(),
            started_at: timestamp(self.started),
            ended_at: timestamp(SystemTime::now()),
            outputs: self.outputs,
        };
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        write_atomic(&self.dir.join(RUN_MANIFEST), text.as_bytes())?;
        Ok(manifest)
    }
}
