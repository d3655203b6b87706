use std::path::Path;
use std::process::{Command, Output};

use driftmask_cli::manifest::{sha256_file, Manifest};

fn driftmask(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_driftmask"))
        .arg("--out")
        .arg(out)
        .args(args)
        .env("DRIFTMASK_LOG", "warn")
        .output()
        .unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn check_manifest(dir: &Path, stage: &str) -> Manifest {
    let text = std::fs::read_to_string(dir.join(format!("{stage}.manifest.json"))).unwrap();
    let m: Manifest = serde_json::from_str(&text).unwrap();
    assert_eq!(m.stage, stage);
    for f in &m.outputs {
        assert_eq!(sha256_file(&dir.join(&f.path)).unwrap().0, f.sha256, "{}", f.path);
    }
    m
}

#[test]
fn stages_chain_through_files() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);

    assert_eq!(driftmask(&d("synth"), &["synth", "--scale", "0.1"]).status.code(), Some(0));
    check_manifest(&d("synth"), "synth");
    let signals = d("synth").join("signals.ndjson");

    let o = driftmask(&d("feat"), &["featurize", "--in", p(&signals), "--binary"]);
    assert_eq!(o.status.code(), Some(0));
    let m = check_manifest(&d("feat"), "featurize");
    assert_eq!(m.inputs.len(), 1);
    let emb = d("feat").join("embeddings.ndjson");
    assert!(d("feat").join("embeddings.bin").exists());

    let o = driftmask(&d("dis"), &["disentangle", "--in", p(&emb), "--machines", "M2,M3"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    check_manifest(&d("dis"), "disentangle");
    let mask = d("dis").join("mask.json");
    assert!(mask.exists());

    let bin = d("feat").join("embeddings.bin");
    let o = driftmask(&d("train"), &["--regime", "di", "train", "--detector", "iforest", "--in", p(&bin), "--mask", p(&mask)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let model = d("train").join("model.dmm");

    let o = driftmask(&d("score"), &["--regime", "di", "score", "--model", p(&model), "--in", p(&emb), "--mask", p(&mask)]);
    assert_eq!(o.status.code(), Some(0));
    let scores = d("score").join("scores.ndjson");

    let o = driftmask(&d("eval"), &["eval", "--scores", p(&scores), "--labels", p(&signals), "--train-scores", p(&scores)]);
    assert_eq!(o.status.code(), Some(0));
    check_manifest(&d("eval"), "eval");
    let metrics: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d("eval").join("metrics.json")).unwrap()).unwrap();
    let auc = metrics["auc_roc"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&auc));
    let csv = std::fs::read_to_string(d("eval").join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 22);
}

#[test]
fn tune_writes_trials_and_best() {
    let tmp = tempfile::tempdir().unwrap();
    let d = |s: &str| tmp.path().join(s);
    let (emb_dir, tune_dir) = (d("p"), d("t"));
    assert_eq!(driftmask(&emb_dir, &["synth", "--planted", "default"]).status.code(), Some(0));
    let grid = d("grid.json");
    std::fs::write(&grid, r#"{"iforest": {"n_estimators": [20, 40], "max_samples": [64], "max_features_fraction": [1.0], "bootstrap": [false]}}"#).unwrap();
    let emb = emb_dir.join("embeddings.ndjson");
    let o = driftmask(&tune_dir, &["tune", "--detector", "iforest", "--in", p(&emb), "--grid", p(&grid)]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let trials = std::fs::read_to_string(tune_dir.join("trials.ndjson")).unwrap();
    assert_eq!(trials.lines().count(), 2);
    let best: driftmask::detectors::DetectorConfig =
        serde_json::from_str(&std::fs::read_to_string(tune_dir.join("best.json")).unwrap()).unwrap();
    assert_eq!(best.kind(), driftmask::detectors::DetectorKind::Iforest);
    let m = check_manifest(&tune_dir, "tune");
    assert_eq!(m.inputs.len(), 2);
}

#[test]
fn confounded_embeddings_exit_with_gate_code() {
    let tmp = tempfile::tempdir().unwrap();
    let (gen, dis) = (tmp.path().join("g"), tmp.path().join("d"));
    assert_eq!(driftmask(&gen, &["synth", "--planted", "confounded"]).status.code(), Some(0));
    let o = driftmask(&dis, &["disentangle", "--in", p(&gen.join("embeddings.ndjson"))]);
    assert_eq!(o.status.code(), Some(3));
    assert!(dis.join("report.json").exists());
    assert!(!dis.join("mask.json").exists());
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dis.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["passed"], false);
}

#[test]
fn usage_errors_exit_one() {
    let tmp = tempfile::tempdir().unwrap();
    assert_eq!(driftmask(tmp.path(), &["nonsense"]).status.code(), Some(1));
    assert_eq!(driftmask(tmp.path(), &["--regime", "sideways", "synth"]).status.code(), Some(1));
    let o = driftmask(tmp.path(), &["--regime", "di", "score", "--model", "m.dmm", "--in", "x.ndjson"]);
    assert_eq!(o.status.code(), Some(2));
    let o = driftmask(tmp.path(), &["--regime", "di", "train", "--detector", "iforest", "--in", "x.ndjson"]);
    assert_eq!(o.status.code(), Some(1));
    let o = driftmask(tmp.path(), &["tune", "--detector", "iforest", "--in", "x.ndjson", "--metric", "auc"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn missing_input_is_a_data_error() {
    let tmp = tempfile::tempdir().unwrap();
    let o = driftmask(tmp.path(), &["featurize", "--in", "/nonexistent/signals.ndjson"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nonexistent"));
}

#[test]
fn pipeline_writes_comparison_for_each_cell() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("c.json");
    std::fs::write(
        &cfg,
        r#"{"seed": 4, "data": {"scale": 0.1}, "disentangle": {"seeds": [0]},
            "regimes": ["embedding", "domain_invariant"],
            "detectors": [{"kind": "iforest", "params": {"n_estimators": 30}}]}"#,
    )
    .unwrap();
    let out = tmp.path().join("run");
    let o = driftmask(&out, &["--config", p(&cfg), "pipeline", "--seeds", "2"]);
    let code = o.status.code().unwrap();
    assert!(code == 0 || code == 3, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("comparison.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(1).unwrap().starts_with("embedding,iforest,2,"));
    let m = check_manifest(&out, "pipeline");
    assert!(m.outputs.iter().any(|f| f.path == "seed_5/embedding/iforest/metrics.json"));
    assert_eq!(m.inputs.len(), 1);
}
