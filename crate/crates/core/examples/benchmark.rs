//! Pretrains the micro configuration on the synthetic benchmark and reports
//! zero-shot, linear-probe and fine-tuning results.
//!
//! `cargo run --release -p esi-core --example benchmark -- [seed] [epochs]`

use std::time::Instant;

use esi_core::benchmark::{Benchmark, BenchmarkConfig};
use esi_core::downstream::{fine_tune, linear_probe, zero_shot_classify, FineTuneConfig, ProbeConfig, TaskKind, TaskSpec};
use esi_core::pretrainer::{TrainConfig, Trainer};

fn main() -> esi_core::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let seed: u64 = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut train = TrainConfig::micro();
    train.seed = seed;
    if let Some(e) = args.get(2).and_then(|s| s.parse().ok()) {
        train.epochs = e;
    }
    let env = |k: &str| std::env::var(k).ok().and_then(|v| v.parse::<f64>().ok());
    if let Some(v) = env("LR") {
        train.base_lr = v;
    }
    if let Some(v) = env("BATCH") {
        train.batch_size = v as usize;
    }
    if let Some(v) = env("DECAY_EVERY") {
        train.lr_decay_every = v as usize;
    }
    if let Some(v) = env("WARMUP") {
        train.warmup_epochs = v as usize;
    }
    let bcfg = BenchmarkConfig {
        seed,
        ..BenchmarkConfig::default()
    };
    let t0 = Instant::now();
    let bench = Benchmark::build(&bcfg)?;
    println!("built benchmark in {:.1} s", t0.elapsed().as_secs_f64());
    let task = TaskSpec::new(TaskKind::MultilabelDiagnosis, bench.classes(), bench.prompts.clone(), bcfg.duration_s)?;

    let mut trainer = Trainer::new(&bench.pretrain, &train)?;
    let random = trainer.checkpoint()?;
    let t1 = Instant::now();
    while trainer.epoch() < train.epochs {
        let s = trainer.train_epoch()?;
        println!(
            "epoch {:2} loss {:.4} con {:?} cap {:?} sigma {:.4} ({:.0} s)",
            s.epoch,
            s.mean_total,
            s.mean_con,
            s.mean_cap,
            s.sigma,
            t1.elapsed().as_secs_f64()
        );
    }
    let ckpt = trainer.checkpoint()?;
    let (_, zs) = zero_shot_classify(&bench.test, &task, &ckpt)?;
    println!("zero-shot  auc {:.4} f1 {:.4} acc {:.4} {:?}", zs.macro_auc, zs.macro_f1, zs.accuracy, zs.per_class_auc);
    let pc = ProbeConfig::default();
    let lp = linear_probe(&bench.probe, &bench.test, &task, &ckpt, &pc)?;
    println!("probe      auc {:.4} f1 {:.4} acc {:.4}", lp.report.macro_auc, lp.report.macro_f1, lp.report.accuracy);
    let rp = linear_probe(&bench.probe, &bench.test, &task, &random, &pc)?;
    println!("random     auc {:.4} f1 {:.4} acc {:.4}", rp.report.macro_auc, rp.report.macro_f1, rp.report.accuracy);
    let t2 = Instant::now();
    let ft = fine_tune(&bench.probe, &bench.test, &task, &ckpt, &FineTuneConfig::default())?;
    println!(
        "fine-tune  auc {:.4} f1 {:.4} acc {:.4} ({:.0} s)",
        ft.report.macro_auc,
        ft.report.macro_f1,
        ft.report.accuracy,
        t2.elapsed().as_secs_f64()
    );
    Ok(())
}
