use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ddfnet::synth::{audit_dataset, Dataset};

const SMALL: &str = r#"
[training.warmup]
epochs = 2
[training.gen]
epochs = 1
[training.attr]
epochs = 1
[training.afm]
epochs = 1
[training.efm]
epochs = 1
[scene]
frames = 6
"#;

fn ddfnet(out: &Path, args: &[&str]) -> Output {
    let cfg = out.parent().unwrap().join("small.toml");
    if !cfg.exists() {
        fs::write(&cfg, SMALL).unwrap();
    }
    Command::new(env!("CARGO_BIN_EXE_ddfnet"))
        .args(["--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()])
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
}

fn json(p: &Path) -> serde_json::Value {
    serde_json::from_slice(&fs::read(p).unwrap()).unwrap()
}

#[test]
fn generate_is_complete_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&ddfnet(&a, &["generate"]));
    ok(&ddfnet(&b, &["generate", "--split", "train"]));
    for split in ["train", "val", "test"] {
        let ds = Dataset::load(&a.join("data").join(split)).unwrap();
        assert_eq!(ds.index.subsets.len(), 6);
        audit_dataset(&ds).unwrap();
    }
    let digest = |root: &Path| json(&root.join("data/train/meta.json"))["index_digest"].clone();
    assert_eq!(digest(&a), digest(&b));
    assert_eq!(fs::read(a.join("data/train/index.json")).unwrap(), fs::read(b.join("data/train/index.json")).unwrap());
}

#[test]
fn stage_two_without_stage_one_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&ddfnet(&out, &["generate", "--split", "train"]));
    let o = ddfnet(&out, &["train", "--stage", "2"]);
    assert_eq!(o.status.code(), Some(6));
    assert!(String::from_utf8_lossy(&o.stderr).contains("error[lineage]"));
    assert!(!out.join("checkpoints").exists());
}

#[test]
fn bad_inputs_exit_with_their_category() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(ddfnet(&out, &["--profile", "huge", "config"]).status.code(), Some(5));
    assert_eq!(ddfnet(&out, &["train", "--stage", "1-ATTR-GEN"]).status.code(), Some(5));
    // Missing data directory.
    assert_eq!(ddfnet(&out, &["train", "--stage", "1-GEN"]).status.code(), Some(7));
}

#[test]
fn output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("env-out");
    let o = Command::new(env!("CARGO_BIN_EXE_ddfnet"))
        .args(["generate", "--split", "val"])
        .env("DDFNET_OUT", &out)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap();
    ok(&o);
    assert!(out.join("data/val/index.json").exists());
}

#[test]
fn full_stage_sequence_eval_trace_and_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    ok(&ddfnet(&out, &["generate"]));
    for stage in ["1-GEN", "1-ATTR-EI", "1-ATTR-TC", "1-ATTR-OCC", "1-ATTR-LR", "1-ATTR-SA", "2", "3"] {
        ok(&ddfnet(&out, &["train", "--stage", stage]));
        assert!(out.join("checkpoints").join(format!("{stage}.json")).exists());
    }
    let log = fs::read_to_string(out.join("train_log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "stage,epoch,iterations,loss,cls_loss,reg_loss");
    // 2 warmup + 1 GEN + 5 x 1 ATTR + 1 + 1 epochs.
    assert_eq!(lines.len(), 1 + 10);
    assert!(lines.iter().any(|l| l.starts_with("1-ATTR-OCC,1,")));

    // Evaluation: default and overridden threshold, unit range, rerun determinism.
    ok(&ddfnet(&out, &["eval"]));
    let report = out.join("eval/test/report.json");
    let first = fs::read(&report).unwrap();
    let r = json(&report);
    assert_eq!(r["threshold"], 20.0);
    assert_eq!(r["stage"], "3");
    assert!(r["config_digest"].as_str().unwrap().len() == 64);
    for m in ["pr", "sr", "npr"] {
        let v = r["report"]["overall"][m].as_f64().unwrap();
        assert!((0.0..=1.0).contains(&v), "{m} = {v}");
    }
    assert_eq!(r["report"]["per_attribute"].as_object().unwrap().len(), 6);
    for f in ["curves.csv", "attributes.csv", "precision.svg", "success.svg"] {
        assert!(out.join("eval/test").join(f).exists());
    }
    ok(&ddfnet(&out, &["eval"]));
    assert_eq!(fs::read(&report).unwrap(), first);
    ok(&ddfnet(&out, &["eval", "--threshold", "5"]));
    let r5 = json(&report);
    assert_eq!(r5["threshold"], 5.0);
    assert!(r5["report"]["overall"]["pr"].as_f64().unwrap() <= r["report"]["overall"]["pr"].as_f64().unwrap());
    let traj = fs::read_to_string(out.join("eval/test/trajectories/test-OCC-000.txt")).unwrap();
    assert_eq!(traj.lines().count(), 6);

    // Structure trace.
    ok(&ddfnet(&out, &["trace", "--clip", "test-TC-000"]));
    let tdir = out.join("trace/test-TC-000");
    for attr in ["EI", "TC", "OCC", "LR", "SA", "GEN"] {
        let csv = fs::read_to_string(tdir.join(format!("gates_l2_{attr}.csv"))).unwrap();
        let rows: Vec<&str> = csv.lines().skip(1).collect();
        assert_eq!(rows.len(), 6);
        for row in rows {
            for v in row.split(',').skip(1) {
                let v: f64 = v.parse().unwrap();
                assert!((0.0..1.0).contains(&v));
            }
        }
    }
    let heatmaps = fs::read_dir(tdir.join("heatmaps")).unwrap().count();
    assert_eq!(heatmaps, 3 * 9);
    assert!(fs::read_to_string(tdir.join("segments.csv")).unwrap().lines().count() > 1);
    let o = ddfnet(&out, &["trace", "--clip", "test-TC-000", "--branch", "XYZ"]);
    assert_eq!(o.status.code(), Some(5));
    ok(&ddfnet(&out, &["trace", "--clip", "test-TC-000", "--branch", "OCC"]));

    // Ablation harness.
    ok(&ddfnet(&out, &["ablate", "--iterations", "1"]));
    let csv = fs::read_to_string(out.join("ablation/ablation.csv")).unwrap();
    let labels: Vec<&str> = csv.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(labels, ["baseline", "1", "1+2", "1+2+3"]);
}
