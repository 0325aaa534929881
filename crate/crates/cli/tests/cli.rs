use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn stylegraph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stylegraph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn make_data(dir: &Path, n: &str, seed: &str) -> Output {
    stylegraph(&[
        "make-toy-data",
        "--out-dir",
        p(dir),
        "--n",
        n,
        "--seed",
        seed,
        "--resolution",
        "16",
        "--force",
    ])
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A 16x16 model trained for two steps, shared by the translate/evaluate tests.
fn tiny_model(root: &Path) -> (PathBuf, PathBuf) {
    let data = root.join("data");
    assert!(make_data(&data, "12", "1").status.success());
    let run = root.join("run");
    let out = stylegraph(&[
        "train",
        "--data-dir",
        p(&data),
        "--out-dir",
        p(&run),
        "--override",
        "iterations=2",
        "resolution=16",
        "base_width=4",
        "max_width=8",
        "style_dim=8",
        "z_dim=4",
        "mapping_hidden=8",
        "batch_size=2",
        "extractor_steps=2",
        "feature_dim=8",
        "gcn_hidden=8",
        "gcn_out=4",
        "ndb_k=3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    (data, run.join("checkpoint.sgc"))
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = stylegraph(&["make-toy-data", "--out-dir", "x", "--bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_out_dir_is_a_usage_error() {
    let out = stylegraph(&["make-toy-data", "--n", "3"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn toy_data_is_reproducible_and_records_classes() {
    let tmp = TempDir::new().unwrap();
    let a = tmp.path().join("a");
    assert!(make_data(&a, "5", "7").status.success());
    let first = tree(&a);
    assert!(make_data(&a, "5", "7").status.success());
    assert_eq!(first, tree(&a));
    let b = tmp.path().join("b");
    assert!(make_data(&b, "5", "7").status.success());
    assert_eq!(first, tree(&b));

    let manifest: serde_json::Value = serde_json::from_slice(&fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["n_object_classes"], 4);
    assert_eq!(first.iter().filter(|(f, _)| f.extension().is_some_and(|e| e == "png")).count(), 20);
}

#[test]
fn non_empty_out_dir_needs_force() {
    let tmp = TempDir::new().unwrap();
    fs::write(tmp.path().join("keep.txt"), "x").unwrap();
    let out = stylegraph(&["make-toy-data", "--out-dir", p(tmp.path()), "--n", "2", "--resolution", "16"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(tmp.path().join("keep.txt").exists());
}

#[test]
fn invalid_config_key_lists_valid_keys() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(make_data(&data, "4", "0").status.success());
    let out = stylegraph(&[
        "train",
        "--data-dir",
        p(&data),
        "--out-dir",
        p(&tmp.path().join("run")),
        "--override",
        "lambda_spatoi=0",
    ]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("lambda_spatio") && err.contains("r1_gamma"), "{err}");
}

#[test]
fn missing_dataset_is_a_data_error() {
    let tmp = TempDir::new().unwrap();
    let out = stylegraph(&[
        "train",
        "--data-dir",
        p(&tmp.path().join("nowhere")),
        "--out-dir",
        p(&tmp.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn train_translate_evaluate() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = tiny_model(tmp.path());
    let run = ckpt.parent().unwrap();
    assert_eq!(fs::read_to_string(run.join("metrics.jsonl")).unwrap().lines().count(), 2);
    let snapshot = fs::read_to_string(run.join("config.txt")).unwrap();
    assert!(snapshot.contains("iterations = 2"));

    let input = data.join("domainA").join("img_00000.png");
    let reference = data.join("domainB").join("img_00001.png");

    // Latent mode is a pure function of the seed.
    let out1 = tmp.path().join("l1.png");
    let out2 = tmp.path().join("l2.png");
    for o in [&out1, &out2] {
        let r = stylegraph(&[
            "translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--mode", "latent", "--seed", "3",
            "--output", p(o),
        ]);
        assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
        assert!(r.stdout.is_empty());
    }
    assert_eq!(fs::read(&out1).unwrap(), fs::read(&out2).unwrap());

    let out3 = tmp.path().join("r.png");
    let r = stylegraph(&[
        "translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--mode", "reference", "--reference",
        p(&reference), "--output", p(&out3),
    ]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let (a, b) = (fs::read(&input).unwrap(), fs::read(&out3).unwrap());
    let dims = |png: &[u8]| (png[16..20].to_vec(), png[20..24].to_vec());
    assert_eq!(dims(&a), dims(&b));

    let r = stylegraph(&[
        "translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--mode", "reference", "--output",
        p(&out3),
    ]);
    assert_eq!(r.status.code(), Some(2));
    let r = stylegraph(&[
        "translate", "--checkpoint", p(&ckpt), "--input", p(&input), "--domain", "2", "--output", p(&out3),
    ]);
    assert_eq!(r.status.code(), Some(2));

    let eval = |extra: &[&str]| {
        let mut args = vec!["evaluate", "--checkpoint", p(&ckpt), "--data-dir", p(&data), "--n-samples", "6"];
        args.extend_from_slice(extra);
        stylegraph(&args)
    };
    let r1 = eval(&[]);
    assert!(r1.status.success(), "{}", String::from_utf8_lossy(&r1.stderr));
    let report: serde_json::Value = serde_json::from_slice(&r1.stdout).unwrap();
    let mut keys: Vec<&str> = report.as_object().unwrap().keys().map(String::as_str).collect();
    keys.sort();
    assert_eq!(keys, ["extractor_name", "fid", "jsd", "k", "lpips", "n_generated", "n_real", "ndb"]);
    assert_eq!(report["n_generated"], 6);
    assert_eq!(r1.stdout, eval(&[]).stdout);

    let json = tmp.path().join("debug.json");
    let r = eval(&["--debug-real", "--out-json", p(&json)]);
    assert!(r.status.success(), "{}", String::from_utf8_lossy(&r.stderr));
    let debug: serde_json::Value = serde_json::from_slice(&fs::read(&json).unwrap()).unwrap();
    assert!(debug["fid"].as_f64().unwrap() < 1e-6);
    assert_eq!(debug["ndb"], 0);

    assert_eq!(eval(&["--n-samples", "1"]).status.code(), Some(2));
}

#[test]
fn resumed_training_matches_uninterrupted_trace() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    assert!(make_data(&data, "10", "2").status.success());
    let common = [
        "resolution=16", "base_width=4", "max_width=8", "style_dim=8", "z_dim=4", "mapping_hidden=8",
        "batch_size=2", "extractor_steps=2", "feature_dim=8", "gcn_hidden=8", "gcn_out=4", "checkpoint_every=0",
    ];
    let run = |dir: &Path, iterations: &str, resume: bool| {
        let it = format!("iterations={iterations}");
        let mut args = vec!["train", "--data-dir", p(&data), "--out-dir", p(dir)];
        if resume {
            args.extend(["--resume", p(dir)]);
        }
        args.push("--override");
        args.push(&it);
        args.extend(common);
        let out = stylegraph(&args);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let full = tmp.path().join("full");
    run(&full, "4", false);
    let split = tmp.path().join("split");
    run(&split, "2", false);
    run(&split, "4", true);

    let losses = |dir: &Path| -> Vec<serde_json::Value> {
        fs::read_to_string(dir.join("metrics.jsonl"))
            .unwrap()
            .lines()
            .map(|l| {
                let mut v: serde_json::Value = serde_json::from_str(l).unwrap();
                v.as_object_mut().unwrap().remove("wall_time_s");
                v
            })
            .collect()
    };
    assert_eq!(losses(&full).len(), 4);
    assert_eq!(losses(&full), losses(&split));
    assert_eq!(
        fs::read(full.join("checkpoint.sgc")).unwrap(),
        fs::read(split.join("checkpoint.sgc")).unwrap()
    );
}
