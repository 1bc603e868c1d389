use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{bail, Context, Result};

use esi_core::benchmark::{synth_records_with_classes, AcquisitionProfile, Benchmark, CLASSES};
use esi_core::cqa::{
    generate_description, seed_documents, ExternalClient, GenerationClient, HashEmbedder, KnowledgeBase, MockClient,
    QueryContext,
};
use esi_core::data_model::{
    load_manifest, read_descriptions, save_manifest, write_descriptions, EcgRecord, EcgTextPair, SourceTag,
};
use esi_core::downstream::{
    fine_tune, linear_probe, run_ablation, zero_shot_classify, AblationKind, AblationSetup, AblationTable, TaskSpec,
};
use esi_core::pretrainer::{Checkpoint, Trainer};

use crate::config::ExperimentConfig;
use crate::run::{write_atomic, Run, RunManifest};
use crate::{
    AblateArgs, AblateKind, Cli, ClientName, Command, CqaCommand, EvalArgs, EvalSetting, Invalid, PlotArgs,
    PretrainArgs, ProfileName, SynthArgs,
};

pub const TABLE: &str = "table.tsv";

pub fn dispatch(cli: &Cli) -> Result<()> {
    if let Command::Plot(args) = &cli.command {
        return plot(args);
    }
    let g = &cli.global;
    let mut cfg = ExperimentConfig::load(g.config.as_deref(), g.preset, &g.sets, g.seed)?;
    match &cli.command {
        Command::SynthData(a) => synth_data(a, &cfg),
        Command::Cqa(CqaCommand::BuildKb { docs, out }) => build_kb(docs.as_deref(), out, &cfg),
        Command::Cqa(CqaCommand::Generate {
            kb,
            manifest,
            out,
            client,
        }) => generate(kb, manifest, out, *client, &cfg),
        Command::Pretrain(a) => {
            if let Some(e) = a.epochs {
                cfg.train.epochs = e;
            }
            if let Some(b) = a.batch_size {
                cfg.train.batch_size = b;
            }
            if let Some(lr) = a.lr {
                cfg.train.base_lr = lr;
            }
            cfg.validate()?;
            pretrain(a, &cfg)
        }
        Command::Eval(a) => eval(a, &cfg),
        Command::Ablate(a) => ablate(a, &cfg),
        Command::Plot(_) => unreachable!("handled above"),
    }
}

fn knowledge_base(cfg: &ExperimentConfig) -> Result<(KnowledgeBase, HashEmbedder)> {
    let embedder = HashEmbedder::new(cfg.cqa.embed_dim);
    let kb = KnowledgeBase::build(seed_documents(), &embedder, cfg.cqa.chunk_chars, cfg.cqa.overlap_chars)?;
    Ok((kb, embedder))
}

fn describe_all(
    records: &[Arc<EcgRecord>],
    kb: &KnowledgeBase,
    embedder: &HashEmbedder,
    client: &dyn GenerationClient,
    k: usize,
) -> Result<Vec<String>> {
    records
        .iter()
        .map(|r| {
            let ctx = QueryContext::from_record(r);
            generate_description(&ctx, kb, embedder, client, k)
                .map(|d| d.text)
                .with_context(|| format!("describing record {}", r.record_id))
        })
        .collect()
}

fn profile(name: ProfileName) -> AcquisitionProfile {
    match name {
        ProfileName::Standard => AcquisitionProfile::standard(),
        ProfileName::Shifted => AcquisitionProfile::shifted(),
    }
}

fn synth_data(args: &SynthArgs, cfg: &ExperimentConfig) -> Result<()> {
    if args.classes == 0 || args.classes > CLASSES.len() {
        bail!(Invalid(format!("--classes must be between 1 and {}", CLASSES.len())));
    }
    let records = synth_records_with_classes(args.n, args.classes, cfg.seed, &cfg.benchmark, &profile(args.profile))?;
    let mut run = Run::start(&args.out, "synth-data", cfg, vec![cfg.seed])?;
    let owned: Vec<EcgRecord> = records.iter().map(|r| (**r).clone()).collect();
    save_manifest(&run.path("manifest.jsonl"), &owned)?;
    run.record("manifest.jsonl");
    run.record("signals/");
    let (kb, embedder) = knowledge_base(cfg)?;
    let texts = describe_all(&records, &kb, &embedder, &MockClient, cfg.cqa.k)?;
    write_descriptions(
        &run.path("descriptions.tsv"),
        records.iter().zip(&texts).map(|(r, t)| (r.record_id.as_str(), t.as_str())),
    )?;
    run.record("descriptions.tsv");
    run.finish()?;
    println!("wrote {} records to {}", records.len(), args.out.display());
    Ok(())
}

fn build_kb(docs: Option<&Path>, out: &Path, cfg: &ExperimentConfig) -> Result<()> {
    let embedder = HashEmbedder::new(cfg.cqa.embed_dim);
    let kb = match docs {
        None => knowledge_base(cfg)?.0,
        Some(dir) => {
            let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
                .with_context(|| format!("reading {}", dir.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|p| p.is_file() && matches!(p.extension().and_then(|e| e.to_str()), Some("txt" | "md")))
                .collect();
            files.sort();
            if files.is_empty() {
                bail!(Invalid(format!("no .txt or .md documents in {}", dir.display())));
            }
            let mut texts = Vec::with_capacity(files.len());
            for f in &files {
                let name = f.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
                let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
                texts.push((name, text));
            }
            KnowledgeBase::build(
                texts.iter().map(|(n, t)| (n.as_str(), t.as_str())),
                &embedder,
                cfg.cqa.chunk_chars,
                cfg.cqa.overlap_chars,
            )?
        }
    };
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    kb.save(out)?;
    println!("knowledge base with {} chunks written to {}", kb.len(), out.display());
    Ok(())
}

fn generate(kb_path: &Path, manifest: &Path, out: &Path, client: ClientName, cfg: &ExperimentConfig) -> Result<()> {
    let kb = KnowledgeBase::load(kb_path)?;
    let embedder = HashEmbedder::new(kb.dim());
    let client: Box<dyn GenerationClient> = match client {
        ClientName::Mock => Box::new(MockClient),
        ClientName::External => Box::new(ExternalClient::from_env()?),
    };
    let records: Vec<Arc<EcgRecord>> = load_manifest(manifest)?.into_iter().map(Arc::new).collect();
    let texts = describe_all(&records, &kb, &embedder, client.as_ref(), cfg.cqa.k)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_descriptions(out, records.iter().zip(&texts).map(|(r, t)| (r.record_id.as_str(), t.as_str())))?;
    println!("{} descriptions written to {}", texts.len(), out.display());
    Ok(())
}

fn load_pairs(manifest: &Path, descriptions: &Path) -> Result<Vec<EcgTextPair>> {
    let records = load_manifest(manifest)?;
    let texts = read_descriptions(descriptions)?;
    records
        .into_iter()
        .map(|r| {
            let text = texts
                .get(&r.record_id)
                .ok_or_else(|| Invalid(format!("no description for record {}", r.record_id)))?;
            Ok(EcgTextPair::new(Arc::new(r), text.clone(), SourceTag::CqaGenerated)?)
        })
        .collect()
}

fn history_tsv(ckpt: &Checkpoint) -> String {
    let opt = |v: Option<f64>| v.map_or_else(|| "NA".to_string(), |x| format!("{x:.6}"));
    let mut out = String::from("epoch\tsteps\tloss\tcontrastive\tcaptioning\tlr\tsigma\n");
    for s in &ckpt.history {
        let _ = writeln!(
            out,
            "{}\t{}\t{:.6}\t{}\t{}\t{:.3e}\t{:.5}",
            s.epoch,
            s.steps,
            s.mean_total,
            opt(s.mean_con),
            opt(s.mean_cap),
            s.lr_last,
            s.sigma
        );
    }
    out
}

fn pretrain(args: &PretrainArgs, cfg: &ExperimentConfig) -> Result<()> {
    let pairs = match (&args.manifest, &args.descriptions) {
        (Some(m), Some(d)) => load_pairs(m, d)?,
        _ => Benchmark::build(&cfg.benchmark)?.pretrain,
    };
    let resume = args.resume.as_deref().map(Checkpoint::load).transpose()?;
    let mut trainer = match &resume {
        Some(ckpt) => {
            if ckpt.config != cfg.train {
                log::warn!("resuming with the training config stored in the checkpoint");
            }
            Trainer::from_checkpoint(&pairs, ckpt)?
        }
        None => Trainer::new(&pairs, &cfg.train)?,
    };
    let mut run_cfg = cfg.clone();
    run_cfg.train = trainer.config().clone();
    let mut run = Run::start(&args.out, "pretrain", &run_cfg, vec![run_cfg.train.seed])?;
    let ckpt_path = run.path("checkpoint.esi");
    log::info!(
        "pretraining on {} pairs, {} steps per epoch, epochs {}..{}",
        pairs.len(),
        trainer.steps_per_epoch(),
        trainer.epoch(),
        trainer.config().epochs
    );
    while trainer.epoch() < trainer.config().epochs {
        trainer.train_epoch()?;
        trainer.checkpoint()?.save(&ckpt_path)?;
    }
    let ckpt = trainer.checkpoint()?;
    ckpt.save(&ckpt_path)?;
    run.record("checkpoint.esi");
    run.write("history.tsv", history_tsv(&ckpt).as_bytes())?;
    run.finish()?;
    if let Some(last) = ckpt.history.last() {
        println!("final loss {:.6} after {} epochs", last.mean_total, ckpt.epoch);
    }
    Ok(())
}

fn load_records(path: &Path) -> Result<Vec<Arc<EcgRecord>>> {
    Ok(load_manifest(path)?.into_iter().map(Arc::new).collect())
}

fn eval(args: &EvalArgs, cfg: &ExperimentConfig) -> Result<()> {
    let ckpt = Checkpoint::load(&args.checkpoint)?;
    let needs_train = args.setting != EvalSetting::Zeroshot;
    let (train, test, default_classes) = match (&args.train, &args.test) {
        (_, Some(test)) => {
            let test = load_records(test)?;
            let train = match &args.train {
                Some(t) => load_records(t)?,
                None if needs_train => bail!(Invalid("--train is required with --test for probe and finetune".into())),
                None => Vec::new(),
            };
            let labels: BTreeSet<String> = train.iter().chain(&test).flat_map(|r| r.labels.iter().cloned()).collect();
            (train, test, labels.into_iter().collect::<Vec<_>>())
        }
        (Some(_), None) => bail!(Invalid("--train needs --test".into())),
        (None, None) => {
            let bench = Benchmark::build(&cfg.benchmark)?;
            let classes = bench.classes();
            (bench.probe, bench.test, classes)
        }
    };
    let classes = if cfg.eval.classes.is_empty() {
        default_classes
    } else {
        cfg.eval.classes.clone()
    };
    let prompts = if !cfg.eval.prompts.is_empty() {
        cfg.eval.prompts.clone()
    } else if args.setting == EvalSetting::Zeroshot {
        let (kb, embedder) = knowledge_base(cfg)?;
        let ctx = |c: &String| QueryContext {
            labels: vec![c.clone()],
            ..QueryContext::default()
        };
        classes
            .iter()
            .map(|c| {
                let d = generate_description(&ctx(c), &kb, &embedder, &MockClient, cfg.cqa.k)?;
                Ok(format!("ECG showing {}", d.text))
            })
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    let segment = cfg.eval.segment_s.unwrap_or(cfg.benchmark.duration_s);
    let task = TaskSpec::new(cfg.eval.task, classes, prompts, segment)?;

    let command = match args.setting {
        EvalSetting::Zeroshot => "eval zeroshot",
        EvalSetting::Probe => "eval probe",
        EvalSetting::Finetune => "eval finetune",
    };
    let mut run = Run::start(&args.out, command, cfg, vec![cfg.seed])?;
    run.write_json("task.json", &task)?;
    let report = match args.setting {
        EvalSetting::Zeroshot => {
            let (scores, report) = zero_shot_classify(&test, &task, &ckpt)?;
            let mut tsv = format!("record_id\t{}\n", task.classes.join("\t"));
            for (r, row) in test.iter().zip(&scores) {
                let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
                let _ = writeln!(tsv, "{}\t{}", r.record_id, cells.join("\t"));
            }
            run.write("scores.tsv", tsv.as_bytes())?;
            report
        }
        EvalSetting::Probe => {
            let probed = linear_probe(&train, &test, &task, &ckpt, &cfg.probe)?;
            run.write_json("head.json", &probed.head)?;
            probed.report
        }
        EvalSetting::Finetune => {
            let tuned = fine_tune(&train, &test, &task, &ckpt, &cfg.finetune)?;
            run.write_json("head.json", &tuned.head)?;
            let mut tsv = String::from("epoch\tloss\n");
            for (i, l) in tuned.losses.iter().enumerate() {
                let _ = writeln!(tsv, "{i}\t{l:.6}");
            }
            run.write("finetune_losses.tsv", tsv.as_bytes())?;
            tuned.report
        }
    };
    run.write_json("report.json", &report)?;
    run.finish()?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn core_kind(k: AblateKind) -> AblationKind {
    match k {
        AblateKind::Misalignment => AblationKind::Misalignment,
        AblateKind::Datasize => AblationKind::Datasize,
        AblateKind::Components => AblationKind::Components,
    }
}

fn check_grid(kind: AblationKind, grid: &[f64]) -> Result<()> {
    let ok = |v: f64| match kind {
        AblationKind::Misalignment => (0.0..=1.0).contains(&v),
        AblationKind::Datasize => v >= 0.0 && v.fract() == 0.0 && v.is_finite(),
        AblationKind::Components => v >= 0.0 && v.fract() == 0.0 && (v as usize) < 3,
    };
    if grid.is_empty() {
        bail!(Invalid("--grid is empty".into()));
    }
    if let Some(bad) = grid.iter().find(|v| !ok(**v)) {
        bail!(Invalid(format!("grid value {bad} is invalid for the {} ablation", kind.name())));
    }
    Ok(())
}

fn ablate(args: &AblateArgs, cfg: &ExperimentConfig) -> Result<()> {
    let kind = core_kind(args.kind);
    let grid = args.grid.clone().unwrap_or_else(|| kind.default_grid());
    check_grid(kind, &grid)?;
    let mut benchmark = cfg.benchmark.clone();
    benchmark.test_profile = cfg.ablation.test_profile.clone();
    let mut setup = AblationSetup::new(benchmark, cfg.train.clone());
    setup.probe = cfg.probe.clone();
    setup.mmd_samples = cfg.ablation.mmd_samples;
    setup.seeds = cfg.ablation_seeds();

    let mut run = Run::start(&args.out, &format!("ablate {}", kind.name()), cfg, setup.seeds.clone())?;
    let table = run_ablation(kind, &grid, &setup)?;
    run.write(TABLE, table.to_tsv().as_bytes())?;
    run.write("ablation.svg", crate::plot::render(&table).as_bytes())?;
    run.finish()?;
    print!("{}", table.to_tsv());
    let failed = table.rows.iter().filter(|r| r.error.is_some()).count();
    if failed > 0 {
        bail!("{failed} of {} grid points failed; see {}", table.rows.len(), args.out.join(TABLE).display());
    }
    Ok(())
}

fn plot(args: &PlotArgs) -> Result<()> {
    let (table_path, dir) = if args.table.is_dir() {
        (args.table.join(TABLE), args.table.clone())
    } else {
        let dir = args.table.parent().map(Path::to_path_buf).unwrap_or_default();
        (args.table.clone(), dir)
    };
    let kind = match args.kind {
        Some(k) => core_kind(k),
        None => {
            let m = RunManifest::load(&dir).map_err(|_| Invalid("--kind is required without a run manifest".into()))?;
            match m.command.strip_prefix("ablate ") {
                Some("misalignment") => AblationKind::Misalignment,
                Some("datasize") => AblationKind::Datasize,
                Some("components") => AblationKind::Components,
                _ => bail!(Invalid(format!("run manifest command {:?} is not an ablation", m.command))),
            }
        }
    };
    let text = std::fs::read_to_string(&table_path).with_context(|| format!("reading {}", table_path.display()))?;
    let table = AblationTable::from_tsv(kind, &text)?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_atomic(&args.out, crate::plot::render(&table).as_bytes())?;
    println!("wrote {}", args.out.display());
    Ok(())
}
