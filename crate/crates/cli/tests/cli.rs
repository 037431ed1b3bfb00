use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use stainseg::checkpoint::{load_segmentation_model, read_manifest};
use stainseg::commands::RunManifest;

fn stainseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stainseg"))
        .args(args)
        .env_remove("STAINSEG_OUT_ROOT")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = stainseg(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn small_dataset(dir: &Path) {
    let d = dir.to_str().unwrap();
    let sizes = ["--patch-size", "32", "--train-a", "2", "--train-b", "2", "--test", "2", "--validation", "2"];
    let mut args = vec!["synth", "--seed", "7", "--out", d];
    args.extend(sizes);
    ok(&args);
}

/// All files below `dir`, relative, sorted.
fn tree(dir: &Path) -> Vec<PathBuf> {
    let mut files = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path.strip_prefix(dir).unwrap().to_path_buf());
            }
        }
    }
    files.sort();
    files
}

/// Effective config, a versioned run manifest and every declared output.
fn assert_run_schema(dir: &Path, command: &str) {
    let config: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.join("config.json")).unwrap()).unwrap();
    assert!(config.is_object());
    let manifest: RunManifest = serde_json::from_str(&fs::read_to_string(dir.join("format.json")).unwrap()).unwrap();
    assert_eq!((manifest.format.as_str(), manifest.version, manifest.command.as_str()), ("stainseg-run", 1, command));
    for output in &manifest.outputs {
        let path = dir.join(output);
        if output.ends_with('/') {
            assert!(path.is_dir() && fs::read_dir(&path).unwrap().next().is_some(), "{output} missing or empty");
        } else {
            assert!(path.is_file(), "{output} missing");
        }
    }
}

#[test]
fn synth_is_byte_identical_across_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    small_dataset(&a);
    small_dataset(&b);
    let files = tree(&a);
    assert_eq!(files, tree(&b));
    assert!(files.len() > 10);
    for f in files {
        assert_eq!(fs::read(a.join(&f)).unwrap(), fs::read(b.join(&f)).unwrap(), "{} differs", f.display());
    }
    assert_run_schema(&a, "synth");
}

#[test]
fn different_seeds_give_different_data() {
    let tmp = tempfile::tempdir().unwrap();
    small_dataset(&tmp.path().join("a"));
    let other = tmp.path().join("b");
    ok(&[
        "synth",
        "--seed",
        "8",
        "--patch-size",
        "32",
        "--train-a",
        "2",
        "--train-b",
        "2",
        "--test",
        "2",
        "--validation",
        "2",
        "--out",
        other.to_str().unwrap(),
    ]);
    let f = Path::new("images/train-a-00000.png");
    assert_ne!(fs::read(tmp.path().join("a").join(f)).unwrap(), fs::read(other.join(f)).unwrap());
}

#[test]
fn evaluate_rejects_mismatched_shapes() {
    let tmp = tempfile::tempdir().unwrap();
    let (pred, truth) = (tmp.path().join("pred"), tmp.path().join("truth"));
    fs::create_dir_all(&pred).unwrap();
    fs::create_dir_all(&truth).unwrap();
    image::GrayImage::new(8, 8).save(pred.join("x.png")).unwrap();
    image::GrayImage::new(8, 6).save(truth.join("x.png")).unwrap();
    let out = stainseg(&[
        "evaluate",
        "--pred",
        pred.to_str().unwrap(),
        "--truth",
        truth.to_str().unwrap(),
        "--out",
        tmp.path().join("e").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr(&out);
    assert_eq!(err.lines().count(), 1);
    assert!(err.starts_with("error: shape-mismatch:"), "{err}");
}

#[test]
fn usage_errors_exit_with_two() {
    let out = stainseg(&["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).starts_with("error: usage:"));
    assert_eq!(stderr(&out).lines().count(), 1);

    let out = stainseg(&["synth", "--seed", "1", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));

    // no --out and no output root
    let out = stainseg(&["synth", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("STAINSEG_OUT_ROOT"));
}

#[test]
fn output_root_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_stainseg"))
        .args(["synth", "--patch-size", "32", "--train-a", "1", "--train-b", "1", "--test", "1", "--validation", "1"])
        .env("STAINSEG_OUT_ROOT", tmp.path())
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(tmp.path().join("synth").join("manifest.json").is_file());
}

#[test]
fn missing_input_is_a_domain_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = stainseg(&[
        "train",
        "--data",
        tmp.path().join("nope").to_str().unwrap(),
        "--out",
        tmp.path().join("t").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).starts_with("error: io:"));
}

#[test]
fn ck_segment_writes_both_variants() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let input = tmp.path().join("b");
    fs::create_dir_all(&input).unwrap();
    for name in ["train-b-00000.png", "train-b-00001.png"] {
        fs::copy(data.join("images").join(name), input.join(name)).unwrap();
    }
    let out = tmp.path().join("ck");
    ok(&["ck-segment", "--input", input.to_str().unwrap(), "--out", out.to_str().unwrap(), "--close-radius", "1"]);
    assert_run_schema(&out, "ck-segment");
    for name in ["train-b-00000.png", "train-b-00001.png"] {
        let neg = image::open(out.join("negative").join(name)).unwrap().to_luma8();
        let pos = image::open(out.join("positive").join(name)).unwrap().to_luma8();
        assert!(neg.pixels().all(|p| p[0] <= 1));
        assert!(pos.pixels().all(|p| p[0] == 0 || p[0] == 2));
        assert!(neg.pixels().zip(pos.pixels()).all(|(n, p)| (n[0] == 1) == (p[0] == 2)));
        assert!(neg.pixels().any(|p| p[0] == 1), "synthetic CK patch has epithelium");
    }
    let cfg: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("config.json")).unwrap()).unwrap();
    assert_eq!(cfg["close_radius"], 1);
}

#[test]
fn train_predict_score_evaluate() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--mode",
        "dasgan",
        "--iterations",
        "10",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
        "--seed",
        "1",
    ]);
    assert_run_schema(&run, "train");

    let log = fs::read_to_string(run.join("train_log.jsonl")).unwrap();
    let records: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(records.len(), 10);
    for (i, r) in records.iter().enumerate() {
        assert_eq!(r["iteration"], i as u64 + 1);
        for key in ["gan_ab", "gan_ba", "cycle", "seg", "total", "wall_time_s"] {
            assert!(r[key].as_f64().is_some_and(f64::is_finite), "{key} in {r}");
        }
    }

    let ckpt = run.join("checkpoints").join("iter-00000010");
    let manifest = read_manifest(&ckpt).unwrap();
    assert_eq!(manifest.iteration, 10);
    assert_eq!(manifest.networks.len(), 4);
    let model = load_segmentation_model(&ckpt).unwrap();
    let d_a = manifest.networks.iter().find(|n| n.name == "d_a").expect("d_a stored");
    assert_eq!(model.store.count(), d_a.scalars);
    let selection: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(run.join("selection.json")).unwrap()).unwrap();
    assert_eq!(selection["checkpoint"], "checkpoints/iter-00000010");

    let images = tmp.path().join("test-images");
    fs::create_dir_all(&images).unwrap();
    for name in ["test-00000.png", "test-00001.png"] {
        fs::copy(data.join("images").join(name), images.join(name)).unwrap();
    }
    let pred = tmp.path().join("pred");
    ok(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        images.to_str().unwrap(),
        "--out",
        pred.to_str().unwrap(),
        "--tile",
        "24",
        "--overlap",
        "8",
    ]);
    assert_run_schema(&pred, "predict");
    let mask = image::open(pred.join("masks").join("test-00000.png")).unwrap().to_luma8();
    assert_eq!(mask.dimensions(), (32, 32));
    assert!(mask.pixels().all(|p| p[0] <= 2));

    let scored = tmp.path().join("score");
    ok(&["score", "--masks", pred.join("masks").to_str().unwrap(), "--out", scored.to_str().unwrap()]);
    assert_run_schema(&scored, "score");
    let scores = fs::read_to_string(scored.join("scores.csv")).unwrap();
    assert_eq!(scores.lines().next(), Some("id,tc_cnn,tc_true,status"));
    assert_eq!(scores.lines().count(), 3);

    let eval = tmp.path().join("eval");
    ok(&[
        "evaluate",
        "--pred",
        pred.join("masks").to_str().unwrap(),
        "--truth",
        data.join("masks").to_str().unwrap(),
        "--out",
        eval.to_str().unwrap(),
    ]);
    assert_run_schema(&eval, "evaluate");
    let f1 = fs::read_to_string(eval.join("f1.csv")).unwrap();
    assert_eq!(f1.lines().count(), 4);
    assert!(f1.lines().last().unwrap().starts_with("pooled,"));
    let bins = fs::read_to_string(eval.join("bins.csv")).unwrap();
    assert_eq!(bins.lines().count(), 13);
}

#[test]
fn predict_checks_tile_against_stride() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    small_dataset(&data);
    let run = tmp.path().join("run");
    ok(&[
        "train",
        "--mode",
        "seg-real",
        "--iterations",
        "2",
        "--data",
        data.to_str().unwrap(),
        "--out",
        run.to_str().unwrap(),
    ]);
    let ckpt = run.join("checkpoints").join("iter-00000002");
    let out = stainseg(&[
        "predict",
        "--checkpoint",
        ckpt.to_str().unwrap(),
        "--input",
        data.join("images").to_str().unwrap(),
        "--out",
        tmp.path().join("p").to_str().unwrap(),
        "--tile",
        "30",
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
}
