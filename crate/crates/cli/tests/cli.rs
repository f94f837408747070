use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn telerisk(dir: &Path, config: &str, args: &[&str]) -> Output {
    let cfg = dir.join("run.toml");
    fs::write(&cfg, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_telerisk"))
        .args(args)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(dir.join("out"))
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(out: Output) {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status,
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_path_buf();
                out.insert(rel, fs::read(&path).unwrap());
            }
        }
    }
    out
}

fn evaluation(dir: &Path) -> Vec<Vec<String>> {
    let mut rdr = csv::Reader::from_path(dir.join("out/evaluation.csv")).unwrap();
    rdr.records()
        .map(|r| r.unwrap().iter().map(String::from).collect())
        .collect()
}

const SMALL: &str = r#"
models = ["baseline", "global_mahalanobis", "local_lof"]
[simulate]
num_vehicles = 150
trips_per_vehicle = [15, 30]
[detector.grids]
local_lof = [0.2, 0.4]
[enet]
folds = 3
lambdas = [1e-4, 1e-2, 0.1]
alphas = [0.0, 1.0]
"#;

const STAGES: [&str; 7] = [
    "simulate",
    "tune-detector",
    "profile",
    "tune-model",
    "train",
    "evaluate",
    "report",
];

#[test]
fn stages_are_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for stage in STAGES {
        ok(telerisk(a.path(), SMALL, &[stage, "--seed", "7"]));
        ok(telerisk(
            b.path(),
            SMALL,
            &[stage, "--seed", "7", "--jobs", "1"],
        ));
    }
    let first = files(&a.path().join("out"));
    assert_eq!(first, files(&b.path().join("out")));
    assert!(first.contains_key(Path::new("report/spearman.csv")));
    assert!(first.contains_key(Path::new("models/local_lof.json")));

    // rerunning in place leaves every file unchanged
    for stage in &STAGES[1..] {
        ok(telerisk(a.path(), SMALL, &[stage, "--seed", "7"]));
    }
    assert_eq!(first, files(&a.path().join("out")));
    assert_eq!(evaluation(a.path()).len(), 3);
}

#[test]
fn baseline_only_gives_one_row() {
    let dir = tempfile::tempdir().unwrap();
    let config = SMALL.replace(
        r#"models = ["baseline", "global_mahalanobis", "local_lof"]"#,
        r#"models = ["baseline"]"#,
    );
    for stage in ["simulate", "tune-model", "train", "evaluate", "report"] {
        ok(telerisk(dir.path(), &config, &[stage]));
    }
    let rows = evaluation(dir.path());
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0][0], "baseline");
    assert!(rows[0][5..].iter().all(|d| d == "0"));
    assert!(!dir.path().join("out/report/spearman.csv").exists());
}

#[test]
fn missing_artifact_names_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let out = telerisk(dir.path(), SMALL, &["profile"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["error"], "missing_artifact");
    assert!(record["path"].as_str().unwrap().ends_with("trips.csv"));
    assert!(record["message"].as_str().unwrap().contains("simulate"));

    ok(telerisk(dir.path(), SMALL, &["simulate"]));
    let out = telerisk(dir.path(), SMALL, &["train"]);
    assert_eq!(out.status.code(), Some(3));
    let stderr = String::from_utf8(out.stderr).unwrap();
    assert!(stderr.contains("enet_baseline.json"), "{stderr}");
}

#[test]
fn bad_config_is_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = telerisk(dir.path(), "modles = []", &["simulate"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8(out.stderr).unwrap();
    let record: serde_json::Value = serde_json::from_str(stderr.lines().last().unwrap()).unwrap();
    assert_eq!(record["error"], "config");
}

#[test]
fn full_pipeline_on_500_vehicles() {
    let dir = tempfile::tempdir().unwrap();
    let config = r#"
[simulate]
num_vehicles = 500
trips_per_vehicle = [20, 40]
"#;
    ok(telerisk(dir.path(), config, &["all"]));
    let rows = evaluation(dir.path());
    let names: Vec<&str> = rows.iter().map(|r| r[0].as_str()).collect();
    assert_eq!(
        names,
        [
            "baseline",
            "local_mahalanobis",
            "local_lof",
            "local_iforest",
            "global_mahalanobis",
            "global_lof",
            "global_iforest"
        ]
    );
    let num = |s: &str| s.parse::<f64>().unwrap();
    for r in &rows {
        for m in 1..5 {
            assert_eq!(num(&r[m + 4]), num(&r[m]) - num(&rows[0][m]));
        }
    }
    let spearman = fs::read_to_string(dir.path().join("out/report/spearman.csv")).unwrap();
    assert_eq!(spearman.lines().count(), 1 + 3 * 8);
}
