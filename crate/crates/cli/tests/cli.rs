use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const SMALL: &str = r#"
[train]
epochs = 2
warmup_epochs = 1
batch_size = 8

[benchmark]
n_pretrain = 32
probe_per_class = 2
n_test = 16

[ablation]
mmd_samples = 16
"#;

fn esi(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_esi"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("spawn esi")
}

fn ok(args: &[&str]) -> Output {
    let out = esi(args);
    assert!(
        out.status.success(),
        "esi {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) -> PathBuf {
    let p = dir.join("small.toml");
    std::fs::write(&p, SMALL).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn lines(p: &Path) -> usize {
    std::fs::read_to_string(p).unwrap().lines().filter(|l| !l.is_empty()).count()
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(esi(&[]).status.code(), Some(1));
    assert_eq!(esi(&["pretrain", "--bogus"]).status.code(), Some(1));
    assert_eq!(esi(&["--help"]).status.code(), Some(0));
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("x");
    let bad = esi(&["ablate", "misalignment", "--grid", "0,2", "--out", s(&out)]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = esi(&["pretrain", "--out", s(&out), "--set", "train.epochs=0"]);
    assert_eq!(bad.status.code(), Some(1));
    let bad = esi(&["pretrain", "--out", s(&out), "--set", "train.nonsense=3"]);
    assert_eq!(bad.status.code(), Some(1));
}

#[test]
fn missing_checkpoint_is_a_runtime_failure() {
    let dir = tempfile::tempdir().unwrap();
    let r = esi(&[
        "eval",
        "zeroshot",
        "--checkpoint",
        s(&dir.path().join("none.esi")),
        "--out",
        s(&dir.path().join("e")),
    ]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn synth_data_writes_manifest_signals_and_descriptions() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth-data", "--classes", "4", "--n", "12", "--out", s(&d), "--seed", "5"]);
    assert_eq!(lines(&d.join("manifest.jsonl")), 12);
    assert_eq!(std::fs::read_dir(d.join("signals")).unwrap().count(), 12);
    assert_eq!(lines(&d.join("descriptions.tsv")), 12);
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "synth-data");
    assert_eq!(run["seeds"][0], 5);
    assert!(d.join("config.toml").exists());
}

#[test]
fn cqa_pipeline_from_the_command_line() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().join("d");
    ok(&["synth-data", "--n", "4", "--out", s(&d)]);
    let kb = dir.path().join("kb.bin");
    ok(&["cqa", "build-kb", "--out", s(&kb)]);
    let desc = dir.path().join("desc.tsv");
    ok(&[
        "cqa",
        "generate",
        "--kb",
        s(&kb),
        "--manifest",
        s(&d.join("manifest.jsonl")),
        "--out",
        s(&desc),
    ]);
    let text = std::fs::read_to_string(&desc).unwrap();
    assert_eq!(text.lines().count(), 4);
    let rbbb = text.lines().find(|l| l.starts_with("syn-rbbb")).expect("an RBBB record");
    assert!(rbbb.contains("prolonged QRS duration"), "{rbbb}");
    // Same corpus and settings as synth-data, so identical text.
    assert_eq!(text, std::fs::read_to_string(d.join("descriptions.tsv")).unwrap());

    let docs = dir.path().join("docs");
    std::fs::create_dir(&docs).unwrap();
    std::fs::write(docs.join("a.txt"), "Sinus bradycardia is a regular rhythm below 60 beats per minute.").unwrap();
    ok(&["cqa", "build-kb", "--docs", s(&docs), "--out", s(&dir.path().join("kb2.bin"))]);
    let empty = dir.path().join("empty");
    std::fs::create_dir(&empty).unwrap();
    let r = esi(&["cqa", "build-kb", "--docs", s(&empty), "--out", s(&dir.path().join("kb3.bin"))]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn pretrain_is_reproducible_and_checkpoints_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let data = dir.path().join("data");
    ok(&["synth-data", "--n", "32", "--out", s(&data)]);
    let manifest = data.join("manifest.jsonl");
    let descriptions = data.join("descriptions.tsv");
    let mut histories = Vec::new();
    for run in ["a", "b"] {
        let out = dir.path().join(run);
        ok(&[
            "pretrain",
            "--config",
            s(&cfg),
            "--manifest",
            s(&manifest),
            "--descriptions",
            s(&descriptions),
            "--out",
            s(&out),
            "--seed",
            "11",
        ]);
        assert!(out.join("checkpoint.esi").exists());
        assert!(out.join("run.json").exists());
        histories.push(std::fs::read_to_string(out.join("history.tsv")).unwrap());
    }
    assert_eq!(histories[0], histories[1]);
    assert_eq!(histories[0].lines().count(), 3);

    let ckpt = dir.path().join("a").join("checkpoint.esi");
    let test = dir.path().join("test");
    ok(&["synth-data", "--n", "16", "--out", s(&test), "--seed", "99"]);
    let probe = dir.path().join("probe");
    ok(&[
        "eval",
        "probe",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--train",
        s(&manifest),
        "--test",
        s(&test.join("manifest.jsonl")),
        "--out",
        s(&probe),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(probe.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["setting"], "linear-probe");
    assert_eq!(report["n_eval"], 16);
    let auc = report["macro_auc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));

    let zs = dir.path().join("zs");
    ok(&[
        "eval",
        "zeroshot",
        "--config",
        s(&cfg),
        "--checkpoint",
        s(&ckpt),
        "--test",
        s(&test.join("manifest.jsonl")),
        "--out",
        s(&zs),
    ]);
    assert_eq!(lines(&zs.join("scores.tsv")), 17);
    let r = esi(&["eval", "probe", "--checkpoint", s(&ckpt), "--test", s(&test.join("manifest.jsonl")), "--out", s(&zs)]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn misalignment_ablation_writes_table_manifest_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path());
    let out = dir.path().join("abl");
    ok(&["ablate", "misalignment", "--grid", "0,0.5,1.0", "--config", s(&cfg), "--out", s(&out)]);
    let table = std::fs::read_to_string(out.join("table.tsv")).unwrap();
    let rows: Vec<&str> = table.lines().skip(1).collect();
    assert_eq!(rows.len(), 4, "{table}");
    assert!(rows[..3].iter().all(|r| r.split('\t').nth(7) == Some("")));
    assert!(rows[3].starts_with("random-init"));
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["command"], "ablate misalignment");
    assert!(run["outputs"].as_array().unwrap().iter().any(|o| o == "table.tsv"));

    let svg = dir.path().join("fig.svg");
    ok(&["plot", "--table", s(&out), "--out", s(&svg)]);
    let text = std::fs::read_to_string(&svg).unwrap();
    assert!(text.starts_with("<svg") && text.contains("<polyline"));
    let orphan = dir.path().join("t.tsv");
    std::fs::copy(out.join("table.tsv"), &orphan).unwrap();
    assert_eq!(esi(&["plot", "--table", s(&orphan), "--out", s(&svg)]).status.code(), Some(1));
    ok(&["plot", "--table", s(&orphan), "--kind", "misalignment", "--out", s(&svg)]);
}
