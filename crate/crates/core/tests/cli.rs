use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mioflow::datasets::load_csv;
use mioflow::evaluation::{compute_metrics, MetricConfig, MetricReport};
use mioflow::gae::{GaeConfig, GeodesicAutoencoder};
use mioflow::training::{LogRecord, MioflowConfig, MioflowModel};
use tempfile::TempDir;

fn mioflow(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mioflow"))
        .args(args)
        .env("MIOFLOW_LOG", "error")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = mioflow(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Points of a single-time export, without the time column.
fn exported_points(path: &Path) -> ndarray::Array2<f64> {
    let text = fs::read_to_string(path).unwrap();
    let rows: Vec<Vec<f64>> = text.lines().skip(1).map(|l| l.split(',').skip(1).map(|v| v.parse().unwrap()).collect()).collect();
    ndarray::Array2::from_shape_fn((rows.len(), rows[0].len()), |(i, j)| rows[i][j])
}

fn small_petal(dir: &Path) -> PathBuf {
    let p = dir.join("petal.csv");
    ok(&["gen-data", "petal", "--points-per-lobe", "8", "--seed", "3", "-o", s(&p)]);
    p
}

const QUICK: [&str; 8] = ["--n-local", "2", "--n-global", "1", "--batches-per-epoch", "2", "--batch-size", "16"];

#[test]
fn gen_data_petal_has_five_times_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a.csv");
    let b = dir.path().join("b.csv");
    let out = ok(&["gen-data", "petal", "--seed", "7", "-o", s(&a)]);
    ok(&["gen-data", "petal", "--seed", "7", "-o", s(&b)]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    let ds = load_csv(&a).unwrap();
    assert_eq!(ds.times(), &[0, 1, 2, 3, 4]);
    assert_eq!(String::from_utf8(out.stdout).unwrap().trim(), "T=5 d=2 counts=100,100,100,100,100");
}

#[test]
fn gen_data_bifurcation_header() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("b.csv");
    ok(&["gen-data", "bifurcation", "--dim", "5", "-o", s(&p)]);
    let text = fs::read_to_string(&p).unwrap();
    assert_eq!(text.lines().next().unwrap(), "t,x0,x1,x2,x3,x4");
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = TempDir::new().unwrap();
    let p = dir.path().join("x.csv");
    assert_eq!(mioflow(&["gen-data", "spiral", "-o", s(&p)]).status.code(), Some(2));
    assert_eq!(mioflow(&["gen-data", "petal", "--dim", "3", "-o", s(&p)]).status.code(), Some(2));
    assert_eq!(mioflow(&["frobnicate"]).status.code(), Some(2));

    let cfg = dir.path().join("cfg.json");
    fs::write(&cfg, r#"{"mioflow": {"n_locals": 3}}"#).unwrap();
    let out = mioflow(&["train", "--config", s(&cfg), "--data", s(&p)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("n_locals"));
    assert!(out.stdout.is_empty());
}

#[test]
fn runtime_errors_exit_with_one() {
    let dir = TempDir::new().unwrap();
    let out = mioflow(&["train", "--data", s(&dir.path().join("missing.csv"))]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn train_gae_zero_iterations_and_log_length() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let d0 = dir.path().join("zero");
    ok(&["train-gae", "--data", s(&data), "--iters", "0", "--gae-batch-size", "32", "--seed", "4", "-o", s(&d0)]);
    let cfg = GaeConfig { max_iterations: 0, batch_size: 32, ..GaeConfig::default() };
    let saved = GeodesicAutoencoder::from_json(&fs::read_to_string(d0.join("gae.json")).unwrap()).unwrap();
    assert_eq!(saved, GeodesicAutoencoder::new(2, &cfg, 4).unwrap());
    assert_eq!(fs::read_to_string(d0.join("gae_log.jsonl")).unwrap(), "");

    let d1 = dir.path().join("five");
    ok(&["train-gae", "--data", s(&data), "--iters", "5", "--gae-batch-size", "32", "-o", s(&d1)]);
    let log = fs::read_to_string(d1.join("gae_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 5);
    let text = fs::read_to_string(d1.join("gae.json")).unwrap();
    assert_eq!(GeodesicAutoencoder::from_json(&text).unwrap().to_json(), text);
}

#[test]
fn train_zero_epochs_writes_initial_model() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let out = dir.path().join("m");
    ok(&["train", "--data", s(&data), "--n-local", "0", "--n-global", "0", "--seed", "9", "-o", s(&out)]);
    let model = MioflowModel::from_json(&fs::read_to_string(out.join("model.json")).unwrap()).unwrap();
    let cfg = MioflowConfig { seed: 9, ..MioflowConfig::default() };
    assert_eq!(model, MioflowModel::new(&load_csv(&data).unwrap(), None, &cfg).unwrap());
}

#[test]
fn train_is_seeded_and_reduces_marginal_loss() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--seed", "2", "--n-local", "6", "--n-global", "0", "--batch-size", "32", "--batches-per-epoch", "4", "-o", s(&out)];
        args.push("--lambda-d");
        args.push("0");
        ok(&args);
        (fs::read(out.join("model.json")).unwrap(), fs::read_to_string(out.join("train_log.jsonl")).unwrap())
    };
    let (m1, log1) = run("a");
    let (m2, log2) = run("b");
    assert_eq!(m1, m2);
    assert_eq!(log1, log2);
    let recs: Vec<LogRecord> = log1.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(recs.len(), 6 * 4 * 4);
    let head: f64 = recs[..16].iter().map(|r| r.l_m).sum();
    let tail: f64 = recs[recs.len() - 16..].iter().map(|r| r.l_m).sum();
    assert!(tail < head, "first {head} last {tail}");
}

#[test]
fn train_with_gae_flag_needs_checkpoint() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let out = mioflow(&["train", "--data", s(&data), "--use-gae", "-o", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));

    let gae_dir = dir.path().join("gae");
    ok(&["train-gae", "--data", s(&data), "--iters", "3", "--gae-batch-size", "32", "-o", s(&gae_dir)]);
    let m = dir.path().join("m");
    let ckpt = gae_dir.join("gae.json");
    let mut args = vec!["train", "--data", s(&data), "--gae", s(&ckpt), "-o", s(&m)];
    args.extend(QUICK);
    ok(&args);
    let model = MioflowModel::from_json(&fs::read_to_string(m.join("model.json")).unwrap()).unwrap();
    assert!(model.gae.is_some());
}

#[test]
fn eval_holdout_report_and_exports() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let out = dir.path().join("e");
    let mut args = vec!["eval-holdout", "--data", s(&data), "--held-time", "2", "-o", s(&out)];
    args.extend(QUICK);
    let res = ok(&args);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.starts_with("label"));
    assert!(stdout.contains("baseline") && stdout.contains("mioflow"));

    let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report.rows.len(), 2);
    assert_eq!(report.rows[0].label, "baseline");
    let row = &report.rows[1];

    // every metric is recomputable from the exported points
    let pred = exported_points(&out.join("predicted.csv"));
    let truth = exported_points(&out.join("truth.csv"));
    let again = compute_metrics(pred.view(), truth.view(), &MetricConfig::default()).unwrap();
    assert_eq!(again, row.metrics);
    assert_eq!(&truth, load_csv(&data).unwrap().at_time(2).unwrap().points());
}

#[test]
fn eval_holdout_rejects_boundary_time() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    for t in ["0", "4"] {
        let out = mioflow(&["eval-holdout", "--data", s(&data), "--held-time", t, "-o", s(dir.path())]);
        assert_eq!(out.status.code(), Some(2));
        assert!(String::from_utf8_lossy(&out.stderr).contains("interior"));
    }
}

#[test]
fn ablation_emits_product_table() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let out = dir.path().join("abl");
    let mut args = vec![
        "eval-holdout", "--data", s(&data), "--held-time", "2", "--ablate", "gae,density", "--jobs", "2",
        "--iters", "3", "--gae-batch-size", "32", "-o", s(&out),
    ];
    args.extend(QUICK);
    ok(&args);
    let report: MetricReport = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    let labels: Vec<&str> = report.rows.iter().map(|r| r.label.as_str()).collect();
    assert_eq!(
        labels,
        [
            "baseline",
            "gae=off density=on",
            "gae=off density=off",
            "gae=gaussian density=on",
            "gae=gaussian density=off"
        ]
    );
}

fn trained_model(dir: &Path, data: &Path, extra: &[&str]) -> PathBuf {
    let m = dir.join("model");
    let mut args = vec!["train", "--data", s(data), "-o", s(&m)];
    args.extend(QUICK);
    args.extend(extra);
    ok(&args);
    m.join("model.json")
}

#[test]
fn trajectories_csv_layout_and_svg() {
    let dir = TempDir::new().unwrap();
    let data = small_petal(dir.path());
    let model = trained_model(dir.path(), &data, &["--substeps", "4"]);
    let out = dir.path().join("traj");
    ok(&["trajectories", "--model", s(&model), "--data", s(&data), "--n-traj", "7", "--svg", "-o", s(&out)]);

    let text = fs::read_to_string(out.join("trajectories.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "traj,step,t,x0,x1");
    let rows: Vec<Vec<f64>> = lines.map(|l| l.split(',').map(|c| c.parse().unwrap()).collect()).collect();
    assert_eq!(rows.len(), 7 * (4 * 4 + 1));

    // first state of each trajectory is one of the starting points
    let start = load_csv(&data).unwrap().snapshot(0).points().clone();
    for r in rows.iter().filter(|r| r[1] == 0.0) {
        assert_eq!(r[2], 0.0);
        assert!(start.rows().into_iter().any(|p| p[0] == r[3] && p[1] == r[4]));
    }

    let svg = fs::read_to_string(out.join("trajectories.svg")).unwrap();
    let doc = roxmltree::Document::parse(&svg).expect("well-formed");
    assert_eq!(doc.root_element().tag_name().name(), "svg");
    assert_eq!(svg.matches("<polyline").count(), 7 * 4);
}

#[test]
fn trajectories_in_high_dimension_need_projection() {
    let dir = TempDir::new().unwrap();
    let data = dir.path().join("b.csv");
    ok(&["gen-data", "bifurcation", "--dim", "3", "--counts", "20,20,20", "-o", s(&data)]);
    let model = trained_model(dir.path(), &data, &[]);
    let out = dir.path().join("traj");
    let res = mioflow(&["trajectories", "--model", s(&model), "--data", s(&data), "--svg", "-o", s(&out)]);
    assert_eq!(res.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&res.stderr).contains("--proj"));

    ok(&["trajectories", "--model", s(&model), "--data", s(&data), "--svg", "--proj", "first2", "-o", s(&out)]);
    let proj = dir.path().join("proj.csv");
    fs::write(&proj, "0.6,0\n0.8,0\n0,1\n").unwrap();
    ok(&["trajectories", "--model", s(&model), "--data", s(&data), "--svg", "--proj", s(&proj), "-o", s(&out)]);
    assert!(roxmltree::Document::parse(&fs::read_to_string(out.join("trajectories.svg")).unwrap()).is_ok());
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("run.json");
    fs::write(
        &cfg,
        r#"{"data": {"petal": {"points_per_lobe": 6, "seed": 1}}, "mioflow": {"n_local": 5, "n_global": 0, "batches_per_epoch": 1, "batch_size": 12}, "seed": 11}"#,
    )
    .unwrap();
    let out = dir.path().join("m");
    ok(&["train", "--config", s(&cfg), "--n-local", "1", "-o", s(&out)]);
    let log = fs::read_to_string(out.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 4);
}
