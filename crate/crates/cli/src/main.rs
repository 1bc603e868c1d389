mod commands;
mod config;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use config::Preset;

/// Input problem (bad flag, malformed file, failed validation); exit code 1.
#[derive(Debug)]
pub struct Invalid(pub String);

impl std::fmt::Display for Invalid {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Invalid {}

#[derive(Parser, Debug)]
#[command(name = "esi", version, about = "ECG-text pretraining experiments")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalOpts,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct GlobalOpts {
    /// TOML experiment config; flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub preset: Option<Preset>,
    /// Override any config key, e.g. `--set train.epochs=4`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Log level: error, warn, info, debug, trace.
    #[arg(long, global = true, default_value = "info")]
    pub log: String,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Synthetic labelled records: manifest, signal files and descriptions.
    SynthData(SynthArgs),
    /// Knowledge base and description generation.
    #[command(subcommand)]
    Cqa(CqaCommand),
    /// Contrastive plus captioning pretraining.
    Pretrain(PretrainArgs),
    /// Downstream evaluation of a checkpoint.
    Eval(EvalArgs),
    /// Pretrain-then-probe sweeps.
    Ablate(AblateArgs),
    /// SVG chart of an ablation table.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 512)]
    pub n: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, value_enum, default_value_t = ProfileName::Standard)]
    pub profile: ProfileName,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum ProfileName {
    Standard,
    Shifted,
}

#[derive(Subcommand, Debug)]
pub enum CqaCommand {
    /// Chunks and embeds a directory of text documents.
    BuildKb {
        /// Directory of .txt/.md files; the built-in reference corpus when omitted.
        #[arg(long)]
        docs: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Writes `record_id<TAB>description` for every manifest record.
    Generate {
        #[arg(long)]
        kb: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value_t = ClientName::Mock)]
        client: ClientName,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientName {
    Mock,
    /// OpenAI-compatible endpoint configured through ESI_LLM_* variables.
    External,
}

#[derive(Args, Debug)]
pub struct PretrainArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Pretraining records; the synthetic benchmark when omitted.
    #[arg(long, requires = "descriptions")]
    pub manifest: Option<PathBuf>,
    #[arg(long, requires = "manifest")]
    pub descriptions: Option<PathBuf>,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalSetting {
    Zeroshot,
    Probe,
    Finetune,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(value_enum)]
    pub setting: EvalSetting,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Labelled training records for probe and finetune.
    #[arg(long)]
    pub train: Option<PathBuf>,
    /// Held-out records. Without --test the synthetic benchmark splits are used.
    #[arg(long)]
    pub test: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(value_enum)]
    pub kind: AblateKind,
    /// Comma-separated grid values; the kind's default grid when omitted.
    #[arg(long, value_delimiter = ',')]
    pub grid: Option<Vec<f64>>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum AblateKind {
    Misalignment,
    Datasize,
    Components,
}

#[derive(Args, Debug)]
pub struct PlotArgs {
    /// Ablation table, or a run directory containing table.tsv.
    #[arg(long)]
    pub table: PathBuf,
    /// Needed when the table has no run manifest next to it.
    #[arg(long, value_enum)]
    pub kind: Option<AblateKind>,
    #[arg(long)]
    pub out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    let invalid = err.chain().any(|e| {
        e.is::<Invalid>()
            || e.downcast_ref::<esi_core::Error>().is_some_and(esi_core::Error::is_validation)
            || e.is::<toml::de::Error>()
    });
    if invalid {
        1
    } else {
        2
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(1),
            };
        }
    };
    env_logger::Builder::new()
        .parse_filters(&cli.global.log)
        .format_timestamp_secs()
        .init();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
