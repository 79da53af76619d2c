use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use htreg::data::save_checkpoint;
use htreg::harness::ExperimentConfig;
use htreg::{MlpModel, WeightMatrix};

fn htreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_htreg"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_config(dir: &Path, body: &str) -> PathBuf {
    let path = dir.join("exp.json");
    std::fs::write(&path, body).unwrap();
    path
}

const BLOBS: &str = r#"{
  "dataset": {"kind": "blobs", "classes": 4, "dim": 8, "n_per_class": 250,
              "test_per_class": 100, "separation": 5.0, "seed": 1},
  "model": {"layer_sizes": [8, 32, 32, 4]},
  "train": {"epochs": 30, "batch_size": 32, "lr_initial": 0.1, "lr_milestones": [20]},
  "penalty": {"kind": "frechet_prior", "coefficient": 2e-5},
  "output": {"metrics_csv": "out/blobs.csv", "checkpoint_path": "out/blobs.htrw"},
  "repeats": 3
}"#;

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        if p.is_dir() {
            out.extend(files_under(&p));
        } else {
            out.push(p);
        }
    }
    out.sort();
    out
}

fn parse_csv(text: &str) -> (Vec<String>, Vec<Vec<String>>) {
    let mut lines = text.lines().filter(|l| !l.starts_with('#'));
    let header = lines.next().unwrap().split(',').map(String::from).collect();
    let rows = lines.map(|l| l.split(',').map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn blobs_smoke_trains_and_summary_matches_runs() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), BLOBS);
    let start = std::time::Instant::now();
    let out = htreg(&["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(start.elapsed().as_secs() < 10);

    let out_dir = dir.path().join("out");
    let names: Vec<String> = files_under(&out_dir)
        .iter()
        .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
        .collect();
    for seed in 0..3 {
        assert!(names.contains(&format!("blobs.seed{seed}.csv")), "{names:?}");
        assert!(names.contains(&format!("blobs.seed{seed}.htrw")));
        assert!(names.contains(&format!("blobs.seed{seed}.htrw.json")));
    }
    let summary = std::fs::read_to_string(out_dir.join("blobs.summary.csv")).unwrap();
    assert!(summary.starts_with("# htreg-summary v1\n"));
    let (header, rows) = parse_csv(&summary);
    let col = |name: &str| header.iter().position(|h| h == name).unwrap();
    assert_eq!(rows.len(), 5);
    for r in &rows[..3] {
        let train_acc: f64 = r[col("train_acc")].parse().unwrap();
        assert!(train_acc >= 99.0, "train acc {train_acc}");
    }

    // recompute mean and standard error from the per-run metrics files
    let finals: Vec<f64> = (0..3)
        .map(|seed| {
            let text = std::fs::read_to_string(out_dir.join(format!("blobs.seed{seed}.csv"))).unwrap();
            let (h, rows) = parse_csv(&text);
            let acc = h.iter().position(|c| c == "test_acc").unwrap();
            rows.last().unwrap()[acc].parse().unwrap()
        })
        .collect();
    let n = finals.len() as f64;
    let mean = finals.iter().sum::<f64>() / n;
    let sd = (finals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let se = sd / n.sqrt();
    let emitted_mean: f64 = rows[3][col("test_acc")].parse().unwrap();
    let emitted_se: f64 = rows[4][col("test_acc")].parse().unwrap();
    assert_eq!(rows[3][0], "mean");
    assert_eq!(rows[4][0], "stderr");
    assert!((emitted_mean - mean).abs() <= 1e-12);
    assert!((emitted_se - se).abs() <= 1e-12);
}

#[test]
fn repeated_runs_are_byte_identical_and_jobs_do_not_matter() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ca = write_config(a.path(), BLOBS);
    let cb = write_config(b.path(), BLOBS);
    assert!(htreg(&["train", ca.to_str().unwrap()]).status.success());
    assert!(htreg(&["train", "--jobs", "3", cb.to_str().unwrap()]).status.success());
    let fa = files_under(&a.path().join("out"));
    let fb = files_under(&b.path().join("out"));
    assert_eq!(fa.len(), 10);
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        let (bx, by) = (std::fs::read(x).unwrap(), std::fs::read(y).unwrap());
        assert!(bx == by, "{} differs", x.display());
    }
}

#[test]
fn config_errors_exit_2_before_writing_anything() {
    let cases = [
        (BLOBS.replace("\"repeats\": 3", "\"repeats\": 3, \"extra\": 1"), "line 8, column 23: unknown field `extra`"),
        (BLOBS.replace("\"coefficient\": 2e-5", "\"coefficient\": -1.0"), "penalty.coefficient"),
        (BLOBS.replace("\"epochs\": 30", "\"epochs\": 0"), "train.epochs"),
        (BLOBS.replace("[8, 32, 32, 4]", "[7, 32, 32, 4]"), "model.layer_sizes"),
        (BLOBS.replace("\"frechet_prior\"", "\"frechet\""), "unknown variant"),
        (BLOBS.replace("\"coefficient\": 2e-5", "\"coefficient\": 2e-5, \"schedule\": {\"type\": \"always\", \"t\": 1}"), "unknown field"),
    ];
    for (text, needle) in cases {
        let dir = tempfile::tempdir().unwrap();
        let cfg = write_config(dir.path(), &text);
        let out = htreg(&["train", cfg.to_str().unwrap()]);
        assert_eq!(out.status.code(), Some(2), "{needle}: {}", stderr(&out));
        assert!(stderr(&out).contains(needle), "expected {needle:?} in {}", stderr(&out));
        assert_eq!(files_under(dir.path()), vec![cfg.clone()], "{needle}");
    }
    let out = htreg(&["train", "/nonexistent/exp.json"]);
    assert_eq!(out.status.code(), Some(2));
}

fn idx_images(count: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
    let mut out = 0x0803u32.to_be_bytes().to_vec();
    for v in [count, rows, cols] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(pixels);
    out
}

fn idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = 0x0801u32.to_be_bytes().to_vec();
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// 28x28 images whose class is a bright horizontal band at row `2 * label + 4`.
fn write_fake_kmnist(dir: &Path, train: usize, test: usize) {
    std::fs::create_dir_all(dir).unwrap();
    for (prefix, n) in [("train", train), ("t10k", test)] {
        let mut pixels = Vec::with_capacity(n * 784);
        let mut labels = Vec::with_capacity(n);
        for i in 0..n {
            let label = (i * 7 % 10) as u8;
            for r in 0..28 {
                for c in 0..28 {
                    let band = r == 2 * label as usize + 4;
                    pixels.push(if band { 200 + (c % 50) as u8 } else { ((i + r * c) % 23) as u8 });
                }
            }
            labels.push(label);
        }
        std::fs::write(dir.join(format!("{prefix}-images-idx3-ubyte")), idx_images(n as u32, 28, 28, &pixels)).unwrap();
        std::fs::write(dir.join(format!("{prefix}-labels-idx1-ubyte")), idx_labels(&labels)).unwrap();
    }
}

fn shipped_configs() -> Vec<PathBuf> {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    v.sort();
    v
}

#[test]
fn shipped_configs_parse_and_validate() {
    let configs = shipped_configs();
    assert!(configs.len() >= 9);
    for path in configs {
        let cfg = ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(cfg.validate().is_empty());
    }
}

#[test]
fn kmnist_config_runs_on_idx_files() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data/kmnist");
    write_fake_kmnist(&data, 300, 100);
    let shipped = std::fs::read_to_string(
        Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/fc3_kmnist_power_law_prior.json"),
    )
    .unwrap();
    let mut json: serde_json::Value = serde_json::from_str(&shipped).unwrap();
    json["train"]["epochs"] = 3.into();
    json["repeats"] = 1.into();
    let cfg_dir = dir.path().join("configs");
    std::fs::create_dir_all(&cfg_dir).unwrap();
    let cfg = write_config(&cfg_dir, &serde_json::to_string_pretty(&json).unwrap());

    let out = htreg(&["train", cfg.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let runs = dir.path().join("runs/fc3_kmnist");
    let metrics = std::fs::read_to_string(runs.join("power_law_prior.seed0.csv")).unwrap();
    let (header, rows) = parse_csv(&metrics);
    assert_eq!(header.len(), 7 + 3 * 4);
    assert_eq!(rows.len(), 3);
    let penalty: f64 = rows[0][5].parse().unwrap();
    assert!(penalty != 0.0);

    let ckpt = runs.join("power_law_prior.seed0.htrw");
    let report = htreg(&["analyze", ckpt.to_str().unwrap()]);
    assert!(report.status.success(), "{}", stderr(&report));
    let (h, rows) = parse_csv(&stdout(&report));
    assert_eq!(h[0], "layer");
    assert_eq!(rows.len(), 5);
    let dims: Vec<(String, String)> = rows[..4].iter().map(|r| (r[1].clone(), r[2].clone())).collect();
    assert_eq!(dims[0], ("784".into(), "128".into()));
    assert_eq!(dims[3], ("128".into(), "10".into()));

    // a model whose output layer cannot hold the labels is a config error
    json["model"]["layer_sizes"] = serde_json::json!([784, 16, 5]);
    let cfg = write_config(&cfg_dir, &serde_json::to_string_pretty(&json).unwrap());
    let out = htreg(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2), "{}", stderr(&out));
    assert!(stderr(&out).contains("10 classes"));

    // a corrupt data file is a runtime error
    std::fs::write(data.join("t10k-labels-idx1-ubyte"), idx_labels(&[1; 99])).unwrap();
    json["model"]["layer_sizes"] = serde_json::json!([784, 16, 10]);
    let cfg = write_config(&cfg_dir, &serde_json::to_string_pretty(&json).unwrap());
    let out = htreg(&["train", cfg.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1), "{}", stderr(&out));
    assert!(stderr(&out).contains("does not match"), "{}", stderr(&out));
}

#[test]
fn analyze_hand_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let e = std::f64::consts::E;
    let model = MlpModel::from_parts(
        vec![WeightMatrix::from_diagonal(&[e, e, 1.0, 1.0]), WeightMatrix::identity(4)],
        vec![vec![0.0; 4], vec![0.0; 4]],
    )
    .unwrap();
    let path = dir.path().join("hand.htrw");
    save_checkpoint(&model, None, &path).unwrap();
    let report_path = dir.path().join("report.csv");
    let out = htreg(&["analyze", path.to_str().unwrap(), "--out", report_path.to_str().unwrap()]);
    assert!(out.status.success(), "{}", stderr(&out));
    let (h, rows) = parse_csv(&std::fs::read_to_string(&report_path).unwrap());
    assert_eq!(
        h,
        ["layer", "rows", "cols", "lambda_max", "frobenius_sq", "stable_rank", "alpha_hat", "weighted_alpha"]
    );
    let f = |r: usize, c: usize| rows[r][c].parse::<f64>().unwrap();
    assert!((f(0, 6) - 1.5).abs() < 1e-12);
    assert!((f(0, 3) - e * e).abs() < 1e-12);
    assert!((f(0, 7) - 3.0).abs() < 1e-12);
    assert_eq!(rows[1][6], "DegenerateTail");
    assert_eq!(f(1, 5), 4.0);
    assert_eq!(rows[2][0], "total");

    std::fs::write(&path, b"HTRW\x01\x00").unwrap();
    let out = htreg(&["analyze", path.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let out = htreg(&["analyze", dir.path().join("missing").to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn gradcheck_passes_and_catches_corruption() {
    let out = htreg(&["gradcheck"]);
    assert!(out.status.success(), "{}", stdout(&out));
    let table = stdout(&out);
    assert_eq!(table.matches(" ok").count(), 13);
    assert_eq!(htreg(&["gradcheck"]).stdout, out.stdout);

    for kind in ["weighted_alpha", "backprop"] {
        let bad = htreg(&["gradcheck", "--corrupt", kind]);
        assert_eq!(bad.status.code(), Some(1));
        assert!(stderr(&bad).contains(kind), "{}", stderr(&bad));
        assert!(stdout(&bad).contains("FAIL"));
    }
    let other = htreg(&["gradcheck", "--seed", "5"]);
    assert!(other.status.success());
    assert_ne!(other.stdout, out.stdout);
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(htreg(&[]).status.code(), Some(2));
    assert_eq!(htreg(&["train"]).status.code(), Some(2));
    assert_eq!(htreg(&["train", "--jobs", "0", "x.json"]).status.code(), Some(2));
    assert_eq!(htreg(&["--help"]).status.code(), Some(0));
}
