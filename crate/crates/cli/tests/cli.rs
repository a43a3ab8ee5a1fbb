use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::Value;

fn tesr(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tesr")).args(args).output().expect("spawn tesr")
}

fn ok(args: &[&str]) -> Output {
    let out = tesr(args);
    assert!(
        out.status.success(),
        "tesr {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    tesr(args).status.code().expect("exit code")
}

const SYNTH: &[&str] = &[
    "--set", "synth.samples=12",
    "--set", "synth.lr_size=8",
    "--set", "synth.min_len=3",
    "--set", "synth.max_len=5",
    "--set", "synth.block_size=2",
];

const TINY: &[&str] = &[
    "--set", "model.base_channels=8",
    "--set", "model.growth_channels=4",
    "--set", "model.n_rrdb_blocks=1",
    "--set", "model.encoder_layers=1",
    "--set", "model.encoding.c_e=8",
    "--set", "model.encoding.heads=2",
    "--set", "steps=3",
    "--set", "batch_size=1",
    "--set", "crop=8",
    "--set", "val_every=2",
    "--set", "val_subset=2",
];

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A synthetic dataset and a trained L-TAE checkpoint shared by the tests.
fn fixture() -> &'static (tempfile::TempDir, PathBuf, PathBuf) {
    static FIXTURE: OnceLock<(tempfile::TempDir, PathBuf, PathBuf)> = OnceLock::new();
    FIXTURE.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        let mut args = vec!["synth", "--out", s(&data), "--seed", "5"];
        args.extend_from_slice(SYNTH);
        ok(&args);
        let run = dir.path().join("run");
        let mut args = vec!["train", "--data", s(&data), "--out", s(&run), "--kind", "highresnet_ltae"];
        args.extend_from_slice(TINY);
        ok(&args);
        let ckpt = run.join("checkpoints/final.ckpt");
        (dir, data, ckpt)
    })
}

fn first_sample(data: &Path) -> PathBuf {
    let manifest: Value = serde_json::from_str(&fs::read_to_string(data.join("manifest.json")).unwrap()).unwrap();
    data.join(manifest["records"][0]["path"].as_str().unwrap())
}

#[test]
fn synth_writes_dataset_layout_deterministically() {
    let (_dir, data, _) = fixture();
    for f in ["manifest.json", "norm_stats.json", "config.resolved.json", "samples/000000/lr.npy"] {
        assert!(data.join(f).is_file(), "{f}");
    }
    for d in ["checkpoints", "reports", "figures"] {
        assert!(data.join(d).is_dir(), "{d}");
    }
    let again = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--out", s(again.path()), "--seed", "5"];
    args.extend_from_slice(SYNTH);
    ok(&args);
    for f in ["manifest.json", "norm_stats.json", "config.resolved.json", "samples/000007/lr.npy", "samples/000007/hr.npy"] {
        assert_eq!(fs::read(data.join(f)).unwrap(), fs::read(again.path().join(f)).unwrap(), "{f}");
    }
}

#[test]
fn train_writes_checkpoint_log_and_resolved_config() {
    let (dir, _, ckpt) = fixture();
    assert!(ckpt.is_file());
    let run = dir.path().join("run");
    let log = fs::read_to_string(run.join("reports/train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "step,loss,lr,val_MAE");
    assert_eq!(lines.len(), 4);
    assert!(!lines[2].ends_with(','), "validation logged at step 2");
    let cfg: Value = serde_json::from_str(&fs::read_to_string(run.join("config.resolved.json")).unwrap()).unwrap();
    assert_eq!(cfg["model"]["kind"], "highresnet_ltae");
    assert_eq!(cfg["steps"], 3);
}

#[test]
fn resumed_training_matches_the_straight_run() {
    let (dir, data, ckpt) = fixture();
    let short = dir.path().join("short");
    let mut args = vec!["train", "--data", s(data), "--out", s(&short), "--kind", "highresnet_ltae"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "steps=1"]);
    ok(&args);
    let resumed = dir.path().join("resumed");
    let first = short.join("checkpoints/final.ckpt");
    ok(&["train", "--data", s(data), "--out", s(&resumed), "--resume", s(&first), "--set", "steps=3"]);
    assert_eq!(fs::read(resumed.join("checkpoints/final.ckpt")).unwrap(), fs::read(ckpt).unwrap());
}

#[test]
fn eval_and_report_produce_tables_and_boxplot() {
    let (dir, data, ckpt) = fixture();
    let ev = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(ckpt), "--data", s(data), "--out", s(&ev),
        "--series-length", "3", "--series-length", "2", "--series-length", "1", "--no-perceptual"]);
    let report = ev.join("reports/report.json");
    let bundle: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(bundle["runs"].as_array().unwrap().len(), 3);
    let rep = dir.path().join("report");
    ok(&["report", "--report", s(&report), "--out", s(&rep)]);
    let svg = fs::read_to_string(rep.join("figures/mae_by_gap.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    let ablation = fs::read_to_string(rep.join("reports/series_length_ablation.csv")).unwrap();
    assert_eq!(ablation.lines().count(), 4);
    let table = fs::read_to_string(rep.join("reports/metrics_table.csv")).unwrap();
    assert!(table.starts_with("model,series_length,group"));
}

#[test]
fn super_resolve_follows_the_requested_date() {
    let (dir, data, ckpt) = fixture();
    let sample = first_sample(data);
    let meta: Value = serde_json::from_str(&fs::read_to_string(sample.join("meta.json")).unwrap()).unwrap();
    let t_ref = meta["t_ref"].as_i64().unwrap();
    let run = |name: &str, date: Option<i64>| {
        let out = dir.path().join(name);
        let date_s = date.map(|d| d.to_string());
        let mut args = vec!["super-resolve", "--checkpoint", s(ckpt), "--series", s(&sample), "--out", s(&out)];
        if let Some(d) = &date_s {
            args.extend_from_slice(&["--at-date", d]);
        }
        ok(&args);
        out
    };
    let default = run("sr_default", None);
    let same = run("sr_same", Some(t_ref));
    let later = run("sr_later", Some(t_ref + 40));
    let bytes = |d: &Path| fs::read(d.join("reports/sr.npy")).unwrap();
    assert_eq!(bytes(&default), bytes(&same));
    assert_ne!(bytes(&default), bytes(&later));
    assert!(default.join("figures/sr.png").is_file());
    assert!(default.join("reports/attention.npy").is_file());
    assert!(default.join("figures/attention_h0_t0.png").is_file());
}

#[test]
fn usage_failures_exit_with_two() {
    let (dir, data, ckpt) = fixture();
    let out = dir.path().join("bad");
    let sample = first_sample(data);
    assert_eq!(code(&["super-resolve", "--checkpoint", "/nonexistent.ckpt", "--series", s(&sample), "--out", s(&out)]), 2);
    assert_eq!(code(&["super-resolve", "--checkpoint", s(ckpt), "--series", s(&sample), "--out", s(&out), "--at-date", "1990-01-01"]), 2);
    assert_eq!(code(&["train", "--data", s(data), "--out", s(&out), "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["train", "--data", s(data), "--out", s(&out), "--kind", "nope"]), 2);
    assert_eq!(code(&["train", "--data", "/nonexistent", "--out", s(&out)]), 2);
    assert_eq!(code(&["frobnicate"]), 2);
    let junk = dir.path().join("junk.json");
    fs::write(&junk, "{\"runs\": 7}").unwrap();
    assert_eq!(code(&["report", "--report", s(&junk), "--out", s(&out)]), 2);
}

#[test]
fn sisr_checkpoint_rejects_series() {
    let (dir, data, _) = fixture();
    let run = dir.path().join("sisr");
    let mut args = vec!["train", "--data", s(data), "--out", s(&run), "--kind", "rrdb_sisr"];
    args.extend_from_slice(TINY);
    args.extend_from_slice(&["--set", "steps=1", "--set", "val_every=100"]);
    ok(&args);
    let out = dir.path().join("sisr_sr");
    let ckpt = run.join("checkpoints/final.ckpt");
    assert_eq!(code(&["super-resolve", "--checkpoint", s(&ckpt), "--series", s(&first_sample(data)), "--out", s(&out)]), 2);
}

#[test]
fn describe_lists_every_kind() {
    let out = ok(&["describe", "--set", "base_channels=8", "--set", "growth_channels=4", "--set", "n_rrdb_blocks=1"]);
    let v: Value = serde_json::from_slice(&out.stdout).unwrap();
    let kinds: Vec<&str> = v.as_array().unwrap().iter().map(|d| d["kind"].as_str().unwrap()).collect();
    assert_eq!(kinds.len(), 7);
    assert!(kinds.contains(&"srdiff_highresnet_ltae"));
    let one = ok(&["describe", "--kind", "rrdb_sisr"]);
    let v: Value = serde_json::from_slice(&one.stdout).unwrap();
    assert_eq!(v[0]["parameters"], 6_091_267);
}
