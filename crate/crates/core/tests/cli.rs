mod common;

use std::collections::HashSet;
use std::fs;
use std::path::Path;

use common::runs::{mmsfe_output, read_log, read_report};
use mmsfe::cli::{outline_pixels, GT_OUTLINE, PRED_OUTLINE};
use mmsfe::config::RunConfig;
use mmsfe::phantom::{decode_pgm, read_pgm, DatasetManifest};
use mmsfe::train::load_model;

fn ok(cwd: &Path, args: &[&str]) -> String {
    let (code, out, err) = mmsfe_output(cwd, args);
    assert_eq!(code, 0, "mmsfe {}\nstdout:\n{out}\nstderr:\n{err}", args.join(" "));
    out
}

fn small_dataset(cwd: &Path, name: &str, seed: &str) {
    ok(cwd, &["gen-data", "--seed", seed, "--train", "24", "--test", "8", "--out", name]);
}

fn files_under(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn gen_data_is_deterministic() {
    let t = tempfile::tempdir().unwrap();
    let out = ok(t.path(), &["gen-data", "--seed", "3", "--train", "12", "--test", "4", "--out", "a"]);
    assert!(out.contains("split train: 12 images"), "{out}");
    ok(t.path(), &["gen-data", "--seed", "3", "--train", "12", "--test", "4", "--out", "b"]);
    ok(t.path(), &["gen-data", "--seed", "4", "--train", "12", "--test", "4", "--out", "c"]);
    let (a, b, c) = (files_under(&t.path().join("a")), files_under(&t.path().join("b")), files_under(&t.path().join("c")));
    assert_eq!(a, b);
    assert_ne!(a, c);
    let m = DatasetManifest::load(&t.path().join("a")).unwrap();
    assert_eq!(m.record_count(), 16);
    assert!(a.iter().any(|(p, _)| p == "annotations/train.jsonl"));
}

#[test]
fn cluster_anchors_patches_config() {
    let t = tempfile::tempdir().unwrap();
    small_dataset(t.path(), "data", "5");
    let out = ok(t.path(), &["cluster-anchors", "--data", "data", "--k", "3", "--seed", "2", "--patch-config", "cfg.txt"]);
    assert!(out.contains("iterations:"), "{out}");
    assert_eq!(out.matches("centroid ").count(), 3, "{out}");
    let cfg = RunConfig::load(&t.path().join("cfg.txt")).unwrap();
    assert_eq!(cfg.anchor_ratios.len(), 3);
    assert!(cfg.anchor_ratios.windows(2).all(|w| w[0] <= w[1]));
    assert!(cfg.anchor_ratios.iter().all(|r| *r > 0.2 && *r < 5.0));
    let again = ok(t.path(), &["cluster-anchors", "--data", "data", "--k", "3", "--seed", "2"]);
    assert_eq!(
        out.lines().filter(|l| l.starts_with("anchor_ratios")).collect::<Vec<_>>(),
        again.lines().filter(|l| l.starts_with("anchor_ratios")).collect::<Vec<_>>()
    );
}

#[test]
fn train_eval_predict_round_trip() {
    let t = tempfile::tempdir().unwrap();
    let cwd = t.path();
    small_dataset(cwd, "data", "6");
    ok(
        cwd,
        &["train", "--data", "data", "--out", "run", "--epochs", "1", "--max-train-images", "10", "--batch-size", "4"],
    );
    for f in ["best.ckpt", "last.ckpt", "config.txt", "train_log.jsonl", "report.json"] {
        assert!(cwd.join("run").join(f).is_file(), "missing {f}");
    }
    let log = read_log(&cwd.join("run"));
    assert_eq!(log.len(), 1);
    assert!(log[0].total.is_finite() && log[0].epoch == 1);

    // The checkpoint reproduces the metrics computed right after training.
    ok(cwd, &["eval", "--checkpoint", "run/best.ckpt", "--data", "data", "--json", "eval.json", "--overlay-dir", "ov", "--overlay-min-score", "0"]);
    let trained = read_report(&cwd.join("run/report.json"));
    let evaluated = read_report(&cwd.join("eval.json"));
    assert_eq!(trained.metrics, evaluated.metrics);
    assert_eq!(trained.config, evaluated.config);
    let (cfg, _) = load_model(&cwd.join("run/best.ckpt")).unwrap();
    assert_eq!(cfg.to_text(), fs::read_to_string(cwd.join("run/config.txt")).unwrap());
    assert_eq!((cfg.epochs, cfg.max_train_images, cfg.batch_size), (1, 10, 4));

    // Overlays only touch outline pixels, which carry the outline shades.
    let shades: HashSet<u8> = [GT_OUTLINE, PRED_OUTLINE].iter().map(|v| (v * 255.0).round() as u8).collect();
    let ann = mmsfe::phantom::read_annotations(&cwd.join("data/annotations/test.jsonl")).unwrap();
    for rec in &ann {
        let (w, h, src) = read_pgm(&cwd.join("data").join(&rec.image)).unwrap();
        let name = Path::new(&rec.image).file_name().unwrap();
        let (_, _, ov) = decode_pgm(&fs::read(cwd.join("ov").join(name)).unwrap()).unwrap();
        let gt_outline: HashSet<(usize, usize)> = outline_pixels(&rec.bbox(), w, h).into_iter().collect();
        for y in 0..h {
            for x in 0..w {
                let (a, b) = (src[y * w + x], ov[y * w + x]);
                if gt_outline.contains(&(x, y)) {
                    assert!(shades.contains(&((b * 255.0).round() as u8)));
                } else if a != b {
                    assert!(shades.contains(&((b * 255.0).round() as u8)), "stray pixel at {x},{y}");
                }
            }
        }
    }

    let img = format!("data/{}", ann[0].image);
    ok(cwd, &["predict", "--checkpoint", "run/best.ckpt", "--image", &img, "--out", "pred.json", "--overlay", "pred.pgm", "--overlay-min-score", "0"]);
    let pred: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("pred.json")).unwrap()).unwrap();
    let dets = pred["detections"].as_array().unwrap();
    for d in dets {
        assert!(d["score"].as_f64().unwrap() >= 0.05);
        assert!(d["class_id"].as_u64().unwrap() < 2);
    }
    let (_, _, src) = read_pgm(&cwd.join(&img)).unwrap();
    let (_, _, ov) = read_pgm(&cwd.join("pred.pgm")).unwrap();
    let changed = src.iter().zip(&ov).filter(|(a, b)| a != b).count();
    assert_eq!(changed > 0, !dets.is_empty());
}

#[test]
fn lambda_sweep_writes_table() {
    let t = tempfile::tempdir().unwrap();
    let cwd = t.path();
    small_dataset(cwd, "data", "8");
    let out = ok(cwd, &["train", "--data", "data", "--out", "sweep", "--epochs", "1", "--max-train-images", "8", "--lambda", "1,2,5"]);
    assert!(out.contains("lambda      mAP  mean_IoU  mAPxIoU"), "{out}");
    for l in ["1", "2", "5"] {
        assert!(cwd.join(format!("sweep/lambda_{l}/best.ckpt")).is_file());
        let cfg = RunConfig::load(&cwd.join(format!("sweep/lambda_{l}/config.txt"))).unwrap();
        assert_eq!(cfg.lambda.to_string(), l);
    }
    let rows: serde_json::Value = serde_json::from_str(&fs::read_to_string(cwd.join("sweep/lambda_sweep.json")).unwrap()).unwrap();
    assert_eq!(rows.as_array().unwrap().len(), 3);
    assert!(fs::read_to_string(cwd.join("sweep/lambda_sweep.txt")).unwrap().lines().count() >= 4);
}

#[test]
fn usage_and_runtime_errors_have_distinct_codes() {
    let t = tempfile::tempdir().unwrap();
    let cwd = t.path();
    let (code, _, err) = mmsfe_output(cwd, &["train", "--data", "nowhere"]);
    assert_eq!(code, 2);
    assert!(err.contains("gen-data"), "{err}");
    let (code, _, _) = mmsfe_output(cwd, &["gen-data", "--train", "0", "--out", "x"]);
    assert_eq!(code, 2);
    let (code, _, _) = mmsfe_output(cwd, &["train", "--set", "lambda=0"]);
    assert_eq!(code, 2);
    fs::write(cwd.join("bad.txt"), "no_such_key = 1\n").unwrap();
    let (code, _, err) = mmsfe_output(cwd, &["train", "--config", "bad.txt"]);
    assert_eq!(code, 2);
    assert!(err.contains("no_such_key"), "{err}");

    small_dataset(cwd, "data", "9");
    fs::write(cwd.join("broken.ckpt"), b"MMSF garbage").unwrap();
    let (code, _, _) = mmsfe_output(cwd, &["eval", "--checkpoint", "broken.ckpt", "--data", "data"]);
    assert_eq!(code, 1);
    let (code, _, _) = mmsfe_output(cwd, &["eval", "--checkpoint", "missing.ckpt", "--data", "data"]);
    assert_eq!(code, 1);
}

#[test]
fn non_finite_loss_stops_with_diagnostic() {
    let t = tempfile::tempdir().unwrap();
    let cwd = t.path();
    small_dataset(cwd, "data", "10");
    let (code, _, err) = mmsfe_output(
        cwd,
        &["train", "--data", "data", "--out", "run", "--epochs", "2", "--max-train-images", "16", "--lr", "1e12",
          "--set", "clip_grad_norm=0", "--set", "warmup_steps=0"],
    );
    assert_eq!(code, 1, "{err}");
    assert!(err.contains("non-finite"), "{err}");
    let diag = fs::read_to_string(cwd.join("run/diagnostic.txt")).unwrap();
    assert!(diag.contains("learning_rate = 1000000000000"), "{diag}");
}

/// Full default data and config for five epochs: the epoch-5 loss is below
/// the epoch-1 loss.
#[test]
fn default_training_reduces_loss() {
    let t = tempfile::tempdir().unwrap();
    let cwd = t.path();
    ok(cwd, &["gen-data", "--seed", "7", "--out", "data"]);
    ok(cwd, &["train", "--data", "data", "--out", "run", "--epochs", "5"]);
    let log = read_log(&cwd.join("run"));
    assert_eq!(log.len(), 5);
    assert!(log[4].total < log[0].total, "epoch 1 {} vs epoch 5 {}", log[0].total, log[4].total);
}
