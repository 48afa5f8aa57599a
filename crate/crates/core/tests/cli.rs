use std::path::{Path, PathBuf};

use serde_json::Value;
use tempfile::TempDir;

use gamkit::artifact::read_smap;
use gamkit::cli::{main_with_args, EXIT_CONFIG, EXIT_OK, EXIT_PARTIAL};
use gamkit::data::{read_manifest, synthetic_digits, write_digit_dataset, write_manifest, ManifestEntry};

fn run(args: &[&str]) -> i32 {
    std::env::set_var("GAMKIT_CACHE", Path::new(env!("CARGO_TARGET_TMPDIR")).join("gamkit-cache"));
    main_with_args(std::iter::once("gamkit").chain(args.iter().copied()))
}

fn dataset(count: usize) -> (TempDir, PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let manifest = write_digit_dataset(&dir.path().join("data"), &synthetic_digits(count, 28, 3)).unwrap();
    (dir, manifest)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn explain_writes_map_overlay_and_sidecar() {
    let (dir, _) = dataset(1);
    let image = dir.path().join("data/digit_00000.png");
    let out = dir.path().join("out");
    let code = run(&[
        "explain",
        s(&image),
        "--model",
        "lenet",
        "--weights",
        "random",
        "--method",
        "gc",
        "--n",
        "2",
        "--class",
        "3",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let (map, score) = read_smap(&out.join("digit_00000.gc.smap")).unwrap();
    assert_eq!(map.shape(), (28, 28));
    assert_eq!(map.n_layers, 2);
    assert!(out.join("digit_00000.gc.png").is_file());
    let side = json(&out.join("digit_00000.gc.json"));
    assert_eq!(side["class_index"], 3);
    assert_eq!(side["n"], 2);
    assert_eq!(side["layers"].as_array().unwrap().len(), 2);
    assert!((side["score"].as_f64().unwrap() - score).abs() < 1e-5 * score.abs().max(1.0));
}

#[test]
fn explain_pair_writes_one_map_per_image() {
    let (dir, _) = dataset(2);
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    let code = run(&[
        "explain",
        s(&data.join("digit_00000.png")),
        "--reference",
        s(&data.join("digit_00001.png")),
        "--model",
        "toy",
        "--weights",
        "random",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let a = json(&out.join("digit_00000.gam.json"));
    let b = json(&out.join("digit_00001.gam.json"));
    assert_eq!(a["score_kind"], "cosine");
    assert_eq!(a["score"], b["score"]);
    assert_eq!(read_smap(&out.join("digit_00000.gam.smap")).unwrap().0.shape(), (8, 8));
}

#[test]
fn explain_rejects_bad_configuration() {
    let (dir, _) = dataset(2);
    let image = dir.path().join("data/digit_00000.png");
    let other = dir.path().join("data/digit_00001.png");
    let out = dir.path().join("out");
    let base = ["--model", "toy", "--weights", "random", "--out", s(&out)];
    let with = |extra: &[&str]| -> Vec<String> { ["explain"].iter().chain(extra).chain(&base).map(|a| a.to_string()).collect() };
    let code = |args: Vec<String>| run(&args.iter().map(String::as_str).collect::<Vec<_>>());
    assert_eq!(code(with(&[s(&dir.path().join("missing.png"))])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--score", "cosine"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--reference", s(&other), "--score", "logit"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--method", "lime"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--n", "3"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--alpha", "1.5"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--colormap", "rainbow"])), EXIT_CONFIG);
    assert_eq!(code(with(&[s(&image), "--blocks", "nope"])), EXIT_CONFIG);
    assert_eq!(run(&["explain", "--bogus-flag"]), EXIT_CONFIG);
}

#[test]
fn config_file_supplies_values_and_flags_win() {
    let (dir, _) = dataset(1);
    let out = dir.path().join("out");
    let cfg = dir.path().join("run.toml");
    std::fs::write(
        &cfg,
        "image = \"data/digit_00000.png\"\nmethod = \"gcpp\"\nout = \"out\"\n[model]\nbackbone = \"toy\"\nweights = \"random\"\n",
    )
    .unwrap();
    assert_eq!(run(&["explain", "--config", s(&cfg)]), EXIT_OK);
    assert!(out.join("digit_00000.gcpp.smap").is_file());
    assert_eq!(run(&["explain", "--config", s(&cfg), "--method", "gam"]), EXIT_OK);
    assert!(out.join("digit_00000.gam.smap").is_file());
}

#[test]
fn evaluate_reports_every_method_and_n() {
    let (dir, manifest) = dataset(12);
    let out = dir.path().join("out");
    let code = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        "lenet",
        "--weights",
        "random",
        "--method",
        "gam,gc",
        "--n",
        "1,2",
        "--threshold",
        "0.4",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let csv = std::fs::read_to_string(out.join("report.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("task,method,n,metric,value"));
    for method in ["gam", "gc"] {
        for n in ["1", "2"] {
            for metric in ["adp", "pic"] {
                let prefix = format!("classification,{method},{n},{metric},");
                assert!(csv.lines().any(|l| l.starts_with(&prefix)), "missing {prefix}");
            }
        }
    }
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["items_loaded"], 12);
    assert_eq!(summary["failure_count"], 0);
}

#[test]
fn evaluate_iou_matches_hand_count() {
    // A blank image explains to a degenerate all-zero map: at θ = 0 the
    // predicted region is the whole frame, so IoU = box area / 64.
    let dir = tempfile::tempdir().unwrap();
    let blank = dir.path().join("blank.png");
    image::GrayImage::new(8, 8).save(&blank).unwrap();
    let entries: Vec<ManifestEntry> = [[0, 0, 4, 4], [2, 2, 8, 6], [0, 0, 8, 8]]
        .iter()
        .enumerate()
        .map(|(i, b)| ManifestEntry {
            id: format!("b{i}"),
            image_path: blank.clone(),
            label: None,
            bbox: Some(*b),
            mask_path: None,
            pair_with: None,
        })
        .collect();
    let manifest = dir.path().join("m.jsonl");
    write_manifest(&manifest, &entries).unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        "toy",
        "--weights",
        "random",
        "--method",
        "gc",
        "--n",
        "1",
        "--threshold",
        "0",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let summary = json(&out.join("summary.json"));
    let run = &summary["report"]["runs"][0];
    let expected = (16.0 / 64.0 + 24.0 / 64.0 + 1.0) / 3.0 * 100.0;
    assert!((run["mean_iou"].as_f64().unwrap() - expected).abs() < 1e-9, "{run}");
}

#[test]
fn evaluate_partial_failures_exit_2() {
    let (dir, manifest) = dataset(4);
    let mut entries = read_manifest(&manifest).unwrap();
    entries[1].image_path = dir.path().join("gone.png");
    write_manifest(&manifest, &entries).unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        "lenet",
        "--weights",
        "random",
        "--method",
        "gam",
        "--n",
        "1",
        "--threshold",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_PARTIAL);
    assert_eq!(json(&out.join("summary.json"))["failure_count"], 1);
}

#[test]
fn evaluate_empty_manifest_fails() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("empty.jsonl");
    std::fs::write(&manifest, "").unwrap();
    let code = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        "toy",
        "--weights",
        "random",
        "--out",
        s(&dir.path().join("out")),
    ]);
    assert_eq!(code, EXIT_CONFIG);
    assert_eq!(run(&["evaluate", "--model", "toy"]), EXIT_CONFIG);
}

#[test]
fn evaluate_similarity_samples_pairs() {
    let (dir, manifest) = dataset(20);
    let out = dir.path().join("out");
    let code = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--model",
        "lenet",
        "--weights",
        "random",
        "--score",
        "dot",
        "--method",
        "gam",
        "--n",
        "1",
        "--threshold",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["config"]["task"], "similarity");
    assert!(!summary["config"]["pairs"].as_array().unwrap().is_empty());
}

#[test]
fn sanity_identity_permutation_keeps_maps() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let code = run(&[
        "sanity",
        "--test",
        "data",
        "--dataset",
        "synthetic",
        "--model",
        "lenet",
        "--permutation",
        "identity",
        "--train-size",
        "200",
        "--images",
        "20",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let report = json(&out.join("sanity_data_gam_n1.json"));
    // Same initialisation, same labels, same shuffling seed: identical models.
    assert_eq!(
        report["cross_similarity"].as_f64().unwrap(),
        report["self_similarity"].as_f64().unwrap()
    );
    assert_eq!(report["pass"], false);
    assert!(out.join("sanity_data_gam_n1_0.png").is_file());
}

#[test]
fn sanity_requires_an_existing_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    assert_eq!(
        run(&[
            "sanity",
            "--test",
            "param",
            "--dataset",
            s(&dir.path().join("nowhere")),
            "--out",
            s(&out)
        ]),
        EXIT_CONFIG
    );
    assert_eq!(run(&["sanity", "--test", "param", "--out", s(&out)]), EXIT_CONFIG);
    assert_eq!(
        run(&["sanity", "--test", "shuffle", "--dataset", "synthetic", "--out", s(&out)]),
        EXIT_CONFIG
    );
    assert_eq!(
        run(&[
            "sanity",
            "--test",
            "param",
            "--dataset",
            "synthetic",
            "--images",
            "5",
            "--out",
            s(&out)
        ]),
        EXIT_CONFIG
    );
}

#[test]
fn sanity_reads_a_manifest_dataset() {
    let (dir, manifest) = dataset(60);
    let out = dir.path().join("out");
    let code = run(&[
        "sanity",
        "--test",
        "param",
        "--dataset",
        s(&manifest),
        "--model",
        "lenet",
        "--train-size",
        "40",
        "--images",
        "20",
        "--max-epochs",
        "2",
        "--out",
        s(&out),
    ]);
    assert_eq!(code, EXIT_OK);
    let report = json(&out.join("sanity_param_gam_n1.json"));
    assert_eq!(report["images"], 20);
    assert_eq!(report["self_similarity"].as_f64().unwrap(), 1.0);
}
