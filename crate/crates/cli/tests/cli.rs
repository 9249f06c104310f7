//! End-to-end runs of the `erasing` binary on tiny synthetic configs.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use erasing_cli::config::{RunConfig, OUTPUT_ROOT_ENV};

fn tiny_config(dir: &Path) -> PathBuf {
    let mut cfg = RunConfig::default();
    cfg.synth.canvas_size = 32;
    cfg.synth_train_count = 24;
    cfg.synth_eval_count = 6;
    cfg.hp.crop = 32;
    cfg.hp.epochs = 1;
    cfg.hp.batch_size = 8;
    cfg.hp.phase_length = 1;
    cfg.checkpoint_every = 2;
    let path = dir.join("tiny.cfg");
    std::fs::write(&path, cfg.to_text()).unwrap();
    path
}

fn erasing(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_erasing"))
        .args(args)
        .env_remove(OUTPUT_ROOT_ENV)
        .output()
        .unwrap()
}

fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout:\n{}\nstderr:\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn train(dir: &Path, out: &Path, extra: &[&str]) {
    let cfg = tiny_config(dir);
    let mut args = vec!["train", "--config", s(&cfg), "--output-dir", s(out)];
    args.extend_from_slice(extra);
    ok(&erasing(&args));
}

fn log_fields(line: &str) -> HashMap<&str, &str> {
    line.split_whitespace().filter_map(|kv| kv.split_once('=')).collect()
}

#[test]
fn train_writes_checkpoints_log_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    train(dir.path(), &out, &[]);
    let checkpoints: Vec<_> = std::fs::read_dir(out.join("checkpoints")).unwrap().collect();
    // 3 steps with checkpoints every 2: step 2 and the final step 3
    assert_eq!(checkpoints.len(), 2);
    assert!(out.join("checkpoint.json").is_file());
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let miou = report["mean_iou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(out.join("config.cfg").is_file());
}

#[test]
fn zero_alpha_and_beta_leave_only_the_classification_loss() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    train(dir.path(), &out, &["--alpha", "0", "--beta", "0"]);
    let log = std::fs::read_to_string(out.join("train.log")).unwrap();
    let mut localizer_lines = 0;
    for line in log.lines() {
        let f = log_fields(line);
        if f["phase"] == "localizer" {
            localizer_lines += 1;
            assert_eq!(f["total"], f["loc"], "{line}");
            // the mining term is still measured, just not weighted in
            assert_ne!(f["am"].parse::<f64>().unwrap(), 0.0);
        }
    }
    assert!(localizer_lines > 0);
}

#[test]
fn output_root_variable_moves_outputs_and_flag_beats_it() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let root = dir.path().join("env_root");
    let out = Command::new(env!("CARGO_BIN_EXE_erasing"))
        .args(["export-dataset", "--config", s(&cfg), "--split", "eval"])
        .env(OUTPUT_ROOT_ENV, &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(root.join("dataset/splits/eval.txt").is_file());

    let flagged = dir.path().join("flagged");
    let out = Command::new(env!("CARGO_BIN_EXE_erasing"))
        .args(["export-dataset", "--config", s(&cfg), "--output-dir", s(&flagged)])
        .env(OUTPUT_ROOT_ENV, &root)
        .output()
        .unwrap();
    ok(&out);
    assert!(flagged.join("dataset/splits/train.txt").is_file());
}

#[test]
fn make_seg_then_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    train(dir.path(), &run, &[]);
    let ck = run.join("checkpoint.json");

    for unlabeled in [false, true] {
        let mut args = vec![
            "make-seg",
            "--config",
            s(&cfg),
            "--output-dir",
            s(&run),
            "--checkpoint",
            s(&ck),
            "--split",
            "eval",
        ];
        if unlabeled {
            args.push("--unlabeled");
        }
        ok(&erasing(&args));
        let seg = run.join("seg_eval");
        let manifest = std::fs::read_to_string(seg.join("manifest.txt")).unwrap();
        assert_eq!(manifest.lines().count(), 6);
        for entry in std::fs::read_dir(seg.join("masks")).unwrap() {
            let img = image::open(entry.unwrap().path()).unwrap().to_luma8();
            assert!(img.pixels().all(|p| p[0] <= 3), "mask values must be class indices");
        }
    }

    // ground truth of the same split, exported next to it
    let gt = dir.path().join("gt");
    ok(&erasing(&["export-dataset", "--config", s(&cfg), "--split", "eval", "--dest", s(&gt)]));
    let eval_out = dir.path().join("scored");
    let manifest = run.join("seg_eval/manifest.txt");
    let out = erasing(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&eval_out),
        "--pred-manifest",
        s(&manifest),
        "--gt-root",
        s(&gt),
    ]);
    ok(&out);
    assert!(eval_out.join("report.txt").is_file());

    // scoring the ground truth against itself is perfect
    let self_manifest = dir.path().join("self.txt");
    let ids: Vec<String> = std::fs::read_to_string(gt.join("splits/eval.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let copies = dir.path().join("copies");
    std::fs::create_dir_all(&copies).unwrap();
    let mut text = String::new();
    for id in &ids {
        let p = copies.join(format!("{id}.png"));
        std::fs::copy(gt.join("masks").join(format!("{id}.png")), &p).unwrap();
        text.push_str(&format!("{id} {}\n", p.display()));
    }
    std::fs::write(&self_manifest, text).unwrap();
    let self_out = dir.path().join("self");
    ok(&erasing(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&self_out),
        "--pred-manifest",
        s(&self_manifest),
        "--gt-root",
        s(&gt),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(self_out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["mean_iou"].as_f64().unwrap(), 1.0);
    assert_eq!(report["recall"]["macro"].as_f64().unwrap(), 1.0);

    // a manifest naming an id with no ground truth is a runtime failure
    std::fs::remove_file(gt.join("masks").join(format!("{}.png", ids[0]))).unwrap();
    let out = erasing(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&self_out),
        "--pred-manifest",
        s(&self_manifest),
        "--gt-root",
        s(&gt),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&ids[0]));
}

#[test]
fn all_background_prediction_scores_background_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let gt = dir.path().join("gt");
    ok(&erasing(&["export-dataset", "--config", s(&cfg), "--split", "eval", "--dest", s(&gt)]));
    let ids: Vec<String> = std::fs::read_to_string(gt.join("splits/eval.txt"))
        .unwrap()
        .lines()
        .map(String::from)
        .collect();
    let preds = dir.path().join("preds");
    std::fs::create_dir_all(&preds).unwrap();
    let (mut bg, mut total) = (0u64, 0u64);
    let mut manifest = String::new();
    for id in &ids {
        let truth = image::open(gt.join("masks").join(format!("{id}.png"))).unwrap().to_luma8();
        bg += truth.pixels().filter(|p| p[0] == 0).count() as u64;
        total += truth.pixels().filter(|p| p[0] != 255).count() as u64;
        let p = preds.join(format!("{id}.png"));
        image::GrayImage::new(truth.width(), truth.height()).save(&p).unwrap();
        manifest.push_str(&format!("{id} {}\n", p.display()));
    }
    let manifest_path = dir.path().join("bg.txt");
    std::fs::write(&manifest_path, manifest).unwrap();
    let out_dir = dir.path().join("scored");
    ok(&erasing(&[
        "evaluate",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&out_dir),
        "--pred-manifest",
        s(&manifest_path),
        "--gt-root",
        s(&gt),
    ]));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out_dir.join("report.json")).unwrap()).unwrap();
    let per_class = &report["per_class_iou"];
    assert_eq!(per_class["background"].as_f64().unwrap(), bg as f64 / total as f64);
    for c in ["shape0", "shape1", "shape2"] {
        assert!(per_class[c].as_f64().unwrap_or(0.0) == 0.0, "{c}");
    }
    assert_eq!(report["recall"]["macro"].as_f64().unwrap(), 0.0);
    assert_eq!(report["precision"]["micro"].as_f64().unwrap(), 0.0);
}

#[test]
fn visualize_writes_four_panels_per_class() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let run = dir.path().join("run");
    train(dir.path(), &run, &[]);
    // first evaluation image follows the 24 training images
    let id = "synth_000024";
    ok(&erasing(&[
        "visualize",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&run),
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--ids",
        id,
    ]));
    let sheet = image::open(run.join("visualize").join(format!("{id}.png"))).unwrap();
    assert_eq!(sheet.width(), 4 * 32);
    assert_eq!(sheet.height() % 32, 0);
    assert!(sheet.height() >= 32);

    let out = erasing(&[
        "visualize",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&run),
        "--checkpoint",
        s(&run.join("checkpoint.json")),
        "--ids",
        "no_such_image",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn export_dataset_writes_voc_layout() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let dest = dir.path().join("export");
    let out = erasing(&["export-dataset", "--config", s(&cfg), "--dest", s(&dest)]);
    ok(&out);
    let ids = std::fs::read_to_string(dest.join("splits/train.txt")).unwrap();
    assert_eq!(ids.lines().count(), 24);
    let labels = std::fs::read_to_string(dest.join("labels.txt")).unwrap();
    assert_eq!(labels.lines().count(), 24);
    for id in ids.lines() {
        assert!(dest.join("images").join(format!("{id}.png")).is_file());
        assert!(dest.join("masks").join(format!("{id}.png")).is_file());
    }
}

#[test]
fn ablation_table_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("sweep");
    ok(&erasing(&[
        "ablate-alpha",
        "--config",
        s(&cfg),
        "--output-dir",
        s(&out),
        "--alphas",
        "0,0.05,0.1",
        "--seeds",
        "0,1",
    ]));
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    assert_eq!(table.lines().count(), 1 + 3);
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out.join("ablation.json")).unwrap()).unwrap();
    assert_eq!(json["runs"].as_array().unwrap().len(), 6);
    let plot = image::open(out.join("recall_vs_alpha.png")).unwrap();
    assert!(plot.width() > 0 && plot.height() > 0);
    assert!(out.join("alpha_0.05/seed_1/checkpoint.json").is_file());
}

#[test]
fn usage_and_runtime_errors_have_distinct_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(erasing(&[]).status.code(), Some(1));
    assert_eq!(erasing(&["train", "--epochs", "zero"]).status.code(), Some(1));
    assert_eq!(erasing(&["train", "--config", "/no/such/file.cfg"]).status.code(), Some(1));
    let bad = dir.path().join("bad.cfg");
    std::fs::write(&bad, "alpha = 0.1\nno_such_key = 3\n").unwrap();
    let out = erasing(&["train", "--config", s(&bad)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let cfg = tiny_config(dir.path());
    let missing = dir.path().join("missing.json");
    let out = erasing(&["make-seg", "--config", s(&cfg), "--checkpoint", s(&missing)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(erasing(&["--help"]).status.success());
}
