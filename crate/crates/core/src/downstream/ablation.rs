//! Pretrain-then-probe sweeps over description misalignment, pretraining
//! set size and loss components.

use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{embed, mmd, probe_model, ProbeConfig, TaskKind, TaskSpec};
use crate::benchmark::{synth_records, Benchmark, BenchmarkConfig, DescriptionPipeline};
use crate::data_model::{inject_misalignment, EcgRecord, EcgTextPair};
use crate::error::{Error, Result};
use crate::model::EsiModel;
use crate::pretrainer::{TrainConfig, Trainer};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AblationKind {
    /// Grid values are misalignment ratios in [0, 1].
    Misalignment,
    /// Grid values are pretraining pair counts; 0 means no pretraining.
    Datasize,
    /// Grid values index [`COMPONENTS`].
    Components,
}

impl AblationKind {
    pub fn name(self) -> &'static str {
        match self {
            Self::Misalignment => "misalignment",
            Self::Datasize => "datasize",
            Self::Components => "components",
        }
    }

    pub fn default_grid(self) -> Vec<f64> {
        match self {
            Self::Misalignment => vec![0.0, 0.5, 1.0],
            Self::Datasize => vec![0.0, 1000.0, 4000.0, 16000.0],
            Self::Components => vec![0.0, 1.0, 2.0],
        }
    }
}

/// Loss configurations of the component ablation.
pub const COMPONENTS: [&str; 3] = ["full", "no-contrastive", "no-captioning"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationSetup {
    pub benchmark: BenchmarkConfig,
    pub train: TrainConfig,
    pub probe: ProbeConfig,
    /// Records per side for the datasize MMD.
    pub mmd_samples: usize,
    /// Training seeds; each grid point reports the mean over them.
    pub seeds: Vec<u64>,
}

impl AblationSetup {
    pub fn new(benchmark: BenchmarkConfig, train: TrainConfig) -> Self {
        Self {
            benchmark,
            seeds: vec![train.seed],
            train,
            probe: ProbeConfig::default(),
            mmd_samples: 512,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub value: f64,
    /// Mean over seeds.
    pub auc: Option<f64>,
    pub auc_per_seed: Vec<f64>,
    pub mmd: Option<f64>,
    pub final_loss: Option<f64>,
    /// Wall time of one seed's run, averaged.
    pub seconds: f64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub kind: AblationKind,
    pub rows: Vec<AblationRow>,
    /// Probe AUC of the untrained encoder, mean over seeds.
    pub random_init_auc: Option<f64>,
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"))
}

impl AblationTable {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("label\tvalue\tauc\tauc_per_seed\tmmd\tfinal_loss\tseconds\terror\n");
        for r in &self.rows {
            let per_seed: Vec<String> = r.auc_per_seed.iter().map(|a| format!("{a:.6}")).collect();
            let _ = writeln!(
                out,
                "{}\t{}\t{}\t{}\t{}\t{}\t{:.2}\t{}",
                r.label,
                r.value,
                fmt_opt(r.auc),
                if per_seed.is_empty() { "NA".to_string() } else { per_seed.join(",") },
                fmt_opt(r.mmd),
                fmt_opt(r.final_loss),
                r.seconds,
                r.error.as_deref().unwrap_or("").replace(['\t', '\n'], " ")
            );
        }
        let _ = writeln!(out, "random-init\tNA\t{}\tNA\tNA\tNA\t0.00\t", fmt_opt(self.random_init_auc));
        out
    }

    /// Reads a table written by [`AblationTable::to_tsv`].
    pub fn from_tsv(kind: AblationKind, text: &str) -> Result<Self> {
        let parse = |s: &str| -> Result<Option<f64>> {
            if s == "NA" {
                Ok(None)
            } else {
                s.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Validation(format!("bad number {s:?} in ablation table")))
            }
        };
        let mut rows = Vec::new();
        let mut random_init_auc = None;
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() < 7 {
                return Err(Error::Validation(format!("ablation table row has {} fields", f.len())));
            }
            if f[0] == "random-init" {
                random_init_auc = parse(f[2])?;
                continue;
            }
            let auc_per_seed = if f[3] == "NA" {
                Vec::new()
            } else {
                f[3].split(',').map(|v| Ok(parse(v)?.unwrap_or(f64::NAN))).collect::<Result<Vec<f64>>>()?
            };
            rows.push(AblationRow {
                label: f[0].to_string(),
                value: parse(f[1])?.unwrap_or(f64::NAN),
                auc: parse(f[2])?,
                auc_per_seed,
                mmd: parse(f[4])?,
                final_loss: parse(f[5])?,
                seconds: parse(f[6])?.unwrap_or(0.0),
                error: f.get(7).filter(|s| !s.is_empty()).map(|s| s.to_string()),
            });
        }
        Ok(Self {
            kind,
            rows,
            random_init_auc,
        })
    }

    /// `(series name, [(x, y)])` for each measured quantity, skipping failed points.
    pub fn series(&self) -> Vec<(String, Vec<(f64, f64)>)> {
        let auc: Vec<(f64, f64)> = self.rows.iter().filter_map(|r| Some((r.value, r.auc?))).collect();
        let mut out = vec![("auc".to_string(), auc)];
        let m: Vec<(f64, f64)> = self.rows.iter().filter_map(|r| Some((r.value, r.mmd?))).collect();
        if !m.is_empty() {
            out.push(("mmd".to_string(), m));
        }
        out
    }

    pub fn aucs(&self) -> Vec<Option<f64>> {
        self.rows.iter().map(|r| r.auc).collect()
    }
}

struct Context {
    bench: Benchmark,
    task: TaskSpec,
}

impl Context {
    fn probe_auc(&self, model: &EsiModel, probe: &ProbeConfig) -> Result<f64> {
        Ok(probe_model(model, &self.bench.probe, &self.bench.test, &self.task, probe)?
            .report
            .macro_auc)
    }
}

fn train(pairs: &[EcgTextPair], config: &TrainConfig) -> Result<(EsiModel, Option<f64>)> {
    let mut trainer = Trainer::new(pairs, config)?;
    trainer.run_until(config.epochs)?;
    let loss = trainer.history().last().map(|s| s.mean_total);
    Ok((trainer.checkpoint()?.model()?, loss))
}

/// Runs every grid point as pretrain then linear probe on the benchmark's
/// probe and held-out splits. A failing point is recorded and skipped.
pub fn run_ablation(kind: AblationKind, grid: &[f64], setup: &AblationSetup) -> Result<AblationTable> {
    setup.train.validate()?;
    if grid.is_empty() {
        return Err(Error::Argument("ablation grid is empty".into()));
    }
    let bench = Benchmark::build(&setup.benchmark)?;
    let task = TaskSpec::new(
        TaskKind::MultilabelDiagnosis,
        bench.classes(),
        bench.prompts.clone(),
        setup.benchmark.duration_s,
    )?;
    let ctx = Context { bench, task };
    if setup.seeds.is_empty() {
        return Err(Error::Argument("ablation needs at least one seed".into()));
    }
    let configs: Vec<TrainConfig> = setup
        .seeds
        .iter()
        .map(|&seed| TrainConfig { seed, ..setup.train.clone() })
        .collect();

    let mut random = Vec::with_capacity(configs.len());
    for cfg in &configs {
        let untrained = Trainer::new(&ctx.bench.pretrain, cfg)?.checkpoint()?.model()?;
        match ctx.probe_auc(&untrained, &setup.probe) {
            Ok(a) => random.push(a),
            Err(e) => log::error!("random-init probe failed for seed {}: {e}", cfg.seed),
        }
    }
    let random_init_auc = (random.len() == configs.len()).then(|| mean(&random));
    log::info!("{} ablation: random-init probe AUC {random_init_auc:?}", kind.name());

    let mut datasize = None;
    if kind == AblationKind::Datasize {
        datasize = Some(DatasizeData::build(grid, setup)?);
    }

    let mut rows = Vec::with_capacity(grid.len());
    for &value in grid {
        let start = Instant::now();
        let label = match kind {
            AblationKind::Components => COMPONENTS.get(value as usize).copied().unwrap_or("invalid").to_string(),
            _ => format!("{value}"),
        };
        let result = configs
            .iter()
            .map(|cfg| match kind {
                AblationKind::Misalignment => misalignment_point(&ctx, value, cfg, setup),
                AblationKind::Datasize => datasize_point(&ctx, value, cfg, setup, datasize.as_ref().expect("built above")),
                AblationKind::Components => components_point(&ctx, value, cfg, setup),
            })
            .collect::<Result<Vec<Point>>>();
        let seconds = start.elapsed().as_secs_f64() / configs.len() as f64;
        let row = match result {
            Ok(points) => {
                let aucs: Vec<f64> = points.iter().map(|p| p.auc).collect();
                let mmds: Option<Vec<f64>> = points.iter().map(|p| p.mmd).collect();
                let losses: Option<Vec<f64>> = points.iter().map(|p| p.final_loss).collect();
                AblationRow {
                    label,
                    value,
                    auc: Some(mean(&aucs)),
                    auc_per_seed: aucs,
                    mmd: mmds.map(|m| mean(&m)),
                    final_loss: losses.map(|l| mean(&l)),
                    seconds,
                    error: None,
                }
            }
            Err(e) => {
                log::error!("{} grid point {value} failed: {e}", kind.name());
                AblationRow {
                    label,
                    value,
                    auc: None,
                    auc_per_seed: Vec::new(),
                    mmd: None,
                    final_loss: None,
                    seconds,
                    error: Some(e.to_string()),
                }
            }
        };
        log::info!(
            "{} {}: auc {:?} mmd {:?} ({:.1} s)",
            kind.name(),
            row.label,
            row.auc,
            row.mmd,
            row.seconds
        );
        rows.push(row);
    }
    Ok(AblationTable {
        kind,
        rows,
        random_init_auc,
    })
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

struct Point {
    auc: f64,
    mmd: Option<f64>,
    final_loss: Option<f64>,
}

fn misalignment_point(ctx: &Context, ratio: f64, cfg: &TrainConfig, setup: &AblationSetup) -> Result<Point> {
    let mis = inject_misalignment(&ctx.bench.pretrain, ratio, cfg.seed)?;
    let (model, final_loss) = train(&mis.pairs, cfg)?;
    Ok(Point {
        auc: ctx.probe_auc(&model, &setup.probe)?,
        mmd: None,
        final_loss,
    })
}

fn components_point(ctx: &Context, index: f64, cfg: &TrainConfig, setup: &AblationSetup) -> Result<Point> {
    let mut cfg = cfg.clone();
    match COMPONENTS.get(index as usize).copied() {
        Some("full") => {}
        Some("no-contrastive") => cfg.loss.lambda_con = 0.0,
        Some("no-captioning") => cfg.loss.lambda_cap = 0.0,
        _ => return Err(Error::Argument(format!("component index {index} out of range"))),
    }
    let (model, final_loss) = train(&ctx.bench.pretrain, &cfg)?;
    Ok(Point {
        auc: ctx.probe_auc(&model, &setup.probe)?,
        mmd: None,
        final_loss,
    })
}

/// Shared inputs of the datasize sweep: the largest pair pool (smaller
/// sizes take prefixes) and fixed reference and held-out samples for the MMD.
struct DatasizeData {
    pool: Vec<EcgTextPair>,
    reference: Vec<Arc<EcgRecord>>,
    held_out: Vec<Arc<EcgRecord>>,
    steps_per_epoch: usize,
}

impl DatasizeData {
    fn build(grid: &[f64], setup: &AblationSetup) -> Result<Self> {
        let max = grid.iter().fold(0.0f64, |a, &b| a.max(b));
        if !(max >= 0.0 && max.is_finite()) || grid.iter().any(|v| *v < 0.0 || v.fract() != 0.0) {
            return Err(Error::Argument("datasize grid values must be non-negative integers".into()));
        }
        let b = &setup.benchmark;
        let pipeline = DescriptionPipeline::seeded()?;
        let records = synth_records(max as usize, b.seed, b, &b.pretrain_profile)?;
        let pool = pipeline.pairs(&records)?;
        let reference = synth_records(setup.mmd_samples.max(1), b.seed ^ 0x5EED_0003, b, &b.pretrain_profile)?;
        let held_out = synth_records(setup.mmd_samples.max(1), b.seed ^ 0x5EED_0004, b, &b.test_profile)?;
        // The update budget is fixed across sizes so only data volume varies.
        let steps_per_epoch = setup
            .train
            .steps_per_epoch
            .unwrap_or_else(|| (b.n_pretrain / setup.train.batch_size).max(1));
        Ok(Self {
            pool,
            reference,
            held_out,
            steps_per_epoch,
        })
    }
}

fn datasize_point(
    ctx: &Context,
    size: f64,
    cfg: &TrainConfig,
    setup: &AblationSetup,
    data: &DatasizeData,
) -> Result<Point> {
    let n = size as usize;
    let (model, final_loss) = if n == 0 {
        (Trainer::new(&ctx.bench.pretrain, cfg)?.checkpoint()?.model()?, None)
    } else {
        let mut cfg = cfg.clone();
        cfg.steps_per_epoch = Some(data.steps_per_epoch);
        train(&data.pool[..n.min(data.pool.len())], &cfg)?
    };
    let x = embed(&model, &data.reference, &ctx.task)?;
    let y = embed(&model, &data.held_out, &ctx.task)?;
    Ok(Point {
        auc: ctx.probe_auc(&model, &setup.probe)?,
        mmd: Some(mmd(&x, &y)),
        final_loss,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tsv_round_trip() {
        let t = AblationTable {
            kind: AblationKind::Datasize,
            rows: vec![
                AblationRow {
                    label: "0".into(),
                    value: 0.0,
                    auc: Some(0.61),
                    auc_per_seed: vec![0.6, 0.62],
                    mmd: Some(0.2),
                    final_loss: None,
                    seconds: 1.5,
                    error: None,
                },
                AblationRow {
                    label: "1000".into(),
                    value: 1000.0,
                    auc: None,
                    auc_per_seed: Vec::new(),
                    mmd: None,
                    final_loss: None,
                    seconds: 0.25,
                    error: Some("boom".into()),
                },
            ],
            random_init_auc: Some(0.6),
        };
        let back = AblationTable::from_tsv(AblationKind::Datasize, &t.to_tsv()).unwrap();
        assert_eq!(back, t);
        assert_eq!(back.series()[0].1, vec![(0.0, 0.61)]);
    }
}
