use std::path::Path;
use std::process::{Command, Output};

use cowclip::harness::report::{from_json, CSV_COLUMNS};
use cowclip::harness::ExperimentConfig;

fn cowclip(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cowclip")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tiny_config(dir: &Path) -> String {
    let mut c = ExperimentConfig::default();
    c.data.n_samples = 2000;
    c.data.vocab_sizes = vec![60; 3];
    c.model.hidden = vec![8];
    c.model.embed_dim = 4;
    c.epochs = 2;
    c.batch_size = 64;
    c.base.base_batch = 64;
    c.base.lr_dense = 1e-2;
    c.base.lr_embed = 1e-2;
    let p = dir.join("tiny.cfg");
    std::fs::write(&p, c.to_pairs_text()).unwrap();
    p.to_str().unwrap().to_string()
}

#[test]
fn train_writes_all_report_formats() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out_dir = dir.path().join("out");
    let o = cowclip(&["train", "--config", &cfg, "--set", &format!("output.dir={}", out_dir.display()), "--format", "json"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let records = from_json(&stdout(&o)).unwrap();
    assert_eq!(records.len(), 1);
    assert_eq!(records[0].epochs.len(), 3);

    let stem = &records[0].run_id;
    let saved = from_json(&std::fs::read_to_string(out_dir.join(format!("{stem}.json"))).unwrap()).unwrap();
    assert_eq!(saved, records);
    let csv = std::fs::read_to_string(out_dir.join(format!("{stem}.csv"))).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), CSV_COLUMNS.join(","));
    assert_eq!(lines.count(), 3);
    assert!(out_dir.join(format!("{stem}.txt")).exists());
}

#[test]
fn sweep_csv_has_one_row_per_epoch() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = cowclip(&["sweep", "--config", &cfg, "--batch-sizes", "64,128", "--rules", "none,sqrt,cowclip", "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    // 6 runs of (initial evaluation + 2 epochs)
    assert_eq!(text.lines().count(), 1 + 6 * 3);
}

#[test]
fn divergence_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let o = cowclip(&[
        "train", "--config", &cfg, "--set", "clip.variant=none", "--set", "opt.lr_dense=1e300", "--set", "opt.lr_embed=1e300", "--set",
        "train.epochs=5",
    ]);
    assert_eq!(o.status.code(), Some(2), "{}", stdout(&o));
}

#[test]
fn errors_exit_one() {
    assert_eq!(cowclip(&["verify", "no-such-suite"]).status.code(), Some(1));
    assert_eq!(cowclip(&["train", "--set", "no.such.key=1"]).status.code(), Some(1));
    assert_eq!(cowclip(&["train", "--config", "/nonexistent/x.cfg"]).status.code(), Some(1));
    assert_eq!(cowclip(&["scale", "--rule", "bogus"]).status.code(), Some(1));
    assert_eq!(cowclip(&["no-such-command"]).status.code(), Some(1));
}

#[test]
fn verify_passes_selected_suites() {
    let o = cowclip(&["verify", "adam-equivalence", "sgd-equivalence", "cowclip-contract", "update-frequency"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
}

#[test]
fn scale_prints_rule_values() {
    let o = cowclip(&["scale", "--rule", "cowclip", "--base-batch", "1024", "--target-batch", "8192"]);
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("l2            8.000000e-4"), "{text}");
    assert!(text.contains("lr_embed      1.000000e-4"), "{text}");
}

#[test]
fn gen_data_round_trips_through_analyze() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let data = dir.path().join("d.bin");
    let o = cowclip(&["gen-data", "--config", &cfg, "--out", data.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    let o = cowclip(&["analyze-freq", "--data", data.to_str().unwrap(), "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["samples"], 2000);
}
