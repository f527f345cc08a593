//! Runs the `ralf` binary end to end on a tiny synthetic dataset.

use std::path::Path;
use std::process::{Command, Output};

use ralf::cli::{GeneratedRecord, RunManifest};
use ralf::metrics::MetricReport;

fn ralf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ralf"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("RALF_SEED")
        .output()
        .expect("spawn ralf")
}

fn ok(args: &[&str]) {
    let out = ralf(args);
    assert!(
        out.status.success(),
        "ralf {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn pipeline_runs_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path();
    let (data, enc, db, model, gen, report, svg) = (
        d.join("data"),
        d.join("enc.ckpt"),
        d.join("train.db"),
        d.join("model.ckpt"),
        d.join("gen"),
        d.join("report.json"),
        d.join("svg"),
    );
    ok(&["--seed", "4", "synth", "--out", p(&data), "--train", "30", "--val", "2", "--test", "6", "--height", "40", "--width", "28"]);
    assert!(data.join("schema.json").exists());
    assert_eq!(RunManifest::read(&data.join("manifest.json")).unwrap().seed, 4);

    ok(&["pretrain-encoder", "--data", p(&data), "--out", p(&enc), "--steps", "3", "--batch-size", "4"]);
    ok(&["build-db", "--data", p(&data), "--encoder", p(&enc), "--out", p(&db)]);

    let cfg = d.join("train.json");
    std::fs::write(&cfg, r#"{"steps": 2, "batch_size": 2, "k": 4, "lr": 0.001}"#).unwrap();
    ok(&["train", "--config", p(&cfg), "--data", p(&data), "--db", p(&db), "--out", p(&model)]);
    let m = RunManifest::read(&d.join("model.ckpt.manifest.json")).unwrap();
    assert_eq!(m.config["steps"], 2);
    assert!(m.stamps.contains_key("generator") && m.stamps.contains_key("layout_encoder"));

    ok(&["generate", "--data", p(&data), "--model", p(&model), "--db", p(&db), "--out", p(&gen), "--trials", "2", "--task", "c_to_sp"]);
    for t in 0..2 {
        let text = std::fs::read_to_string(gen.join(format!("trial{t}.jsonl"))).unwrap();
        let recs: Vec<GeneratedRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
        assert_eq!(recs.len(), 6);
        assert!(recs.iter().all(|r| r.trial == t && !r.layout.is_empty()));
    }

    ok(&["evaluate", "--data", p(&data), "--generated", p(&gen), "--encoder", p(&enc), "--out", p(&report)]);
    let r: MetricReport = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.fid.is_finite());

    ok(&["render", "--data", p(&data), "--layouts", p(&gen.join("trial0.jsonl")), "--out", p(&svg), "--limit", "2"]);
    let svgs = std::fs::read_dir(&svg).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "svg")).count();
    assert_eq!(svgs, 2);
}

#[test]
fn same_seed_gives_identical_synthetic_data() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for dir in [&a, &b] {
        ok(&["--seed", "9", "synth", "--out", p(dir), "--train", "5", "--val", "1", "--test", "1", "--height", "20", "--width", "14"]);
    }
    for f in ["train.jsonl", "test.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
    }
}

#[test]
fn failures_print_one_error_line() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("nope.ckpt");
    let out = ralf(&["generate", "--data", p(tmp.path()), "--model", p(&missing), "--out", p(tmp.path())]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error["), "{err}");

    let out = ralf(&["train", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.starts_with("error[usage]"), "{err}");
}
