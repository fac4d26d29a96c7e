use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::DVector;
use stm_lora::adapter::trainable_param_count;
use stm_lora::harness::{make_synthetic_model, Activation, LayerSpec, SpectrumSpec};
use stm_lora::stm::read_layer;
use stm_lora::tensorio::{write_bundle, MatrixBundle};
use stm_lora::Matrix;
use tempfile::TempDir;

fn stm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn bundle(dir: &Path, name: &str, entries: &[(&str, Matrix)]) -> PathBuf {
    let mut b = MatrixBundle::new();
    for (n, m) in entries {
        b.insert(*n, m.clone()).unwrap();
    }
    let p = dir.join(name);
    write_bundle(&p, &b).unwrap();
    p
}

fn diag(values: &[f64]) -> Matrix {
    Matrix::from_diagonal(&DVector::from_row_slice(values))
}

fn read_json(p: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(p).unwrap()).unwrap()
}

fn records(p: &Path) -> Vec<serde_json::Value> {
    read_json(p)["records"].as_array().unwrap().clone()
}

/// Every file under `dir`, keyed by relative path.
fn snapshot(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn spectra_of_identity() {
    let tmp = TempDir::new().unwrap();
    let input = bundle(tmp.path(), "w", &[("eye", Matrix::identity(4, 4))]);
    let out_dir = tmp.path().join("out");
    let out = stm(&["spectra", "--input", path(&input), "--output", path(&out_dir), "--format", "json"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ranks = records(&out_dir.join("ranks.json"));
    assert_eq!(ranks.len(), 1);
    assert!((ranks[0]["entropy_rank"].as_f64().unwrap() - 4.0).abs() < 1e-9);
    assert!((ranks[0]["stable_rank"].as_f64().unwrap() - 4.0).abs() < 1e-9);
    assert_eq!(records(&out_dir.join("spectra.json")).len(), 4);
}

#[test]
fn zero_residual_projects_to_zero() {
    let tmp = TempDir::new().unwrap();
    let w = diag(&[3.0, 2.0, 1.0]);
    let input = bundle(tmp.path(), "w", &[("q", w)]);
    let res = bundle(tmp.path(), "dw", &[("q", Matrix::zeros(3, 3))]);
    let out_dir = tmp.path().join("out");
    let out = stm(&[
        "spectra", "--input", path(&input), "--residuals", path(&res), "--output", path(&out_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let mut rdr = csv::Reader::from_path(out_dir.join("spectra.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "projection").unwrap();
    let mut rows = 0;
    for rec in rdr.records() {
        assert_eq!(rec.unwrap()[col].parse::<f64>().unwrap(), 0.0);
        rows += 1;
    }
    assert_eq!(rows, 3);

    let ranks = fs::read_to_string(out_dir.join("ranks.csv")).unwrap();
    assert!(ranks.contains("N/A"), "{ranks}");
}

#[test]
fn deeper_layer_reports_larger_ranks() {
    let tmp = TempDir::new().unwrap();
    let model = make_synthetic_model(
        &[
            LayerSpec::new(16, 16, SpectrumSpec::Geometric { scale: 1.0, ratio: 0.3 }),
            LayerSpec::new(16, 16, SpectrumSpec::Geometric { scale: 1.0, ratio: 0.9 }),
        ],
        Activation::Identity,
        5,
    )
    .unwrap();
    let input = bundle(
        tmp.path(),
        "w",
        &[("layer0", model.layers[0].clone()), ("layer1", model.layers[1].clone())],
    );
    let out_dir = tmp.path().join("out");
    assert_eq!(code(&stm(&["spectra", "--input", path(&input), "--output", path(&out_dir)])), 0);

    let mut rdr = csv::Reader::from_path(out_dir.join("ranks.csv")).unwrap();
    let headers = rdr.headers().unwrap().clone();
    let idx = |name: &str| headers.iter().position(|h| h == name).unwrap();
    let (en, st) = (idx("entropy_rank"), idx("stable_rank"));
    let rows: Vec<csv::StringRecord> = rdr.records().map(Result::unwrap).collect();
    assert_eq!(&rows[0][idx("matrix")], "layer0");
    let val = |r: &csv::StringRecord, i: usize| r[i].parse::<f64>().unwrap();
    assert!(val(&rows[1], en) > val(&rows[0], en));
    assert!(val(&rows[1], st) > val(&rows[0], st));
}

#[test]
fn spectra_errors() {
    let tmp = TempDir::new().unwrap();
    let input = bundle(tmp.path(), "w", &[("a", Matrix::identity(2, 2))]);
    let res = bundle(tmp.path(), "dw", &[("b", Matrix::identity(2, 2))]);
    let out_dir = tmp.path().join("out");
    let mismatch = stm(&[
        "spectra", "--input", path(&input), "--residuals", path(&res), "--output", path(&out_dir),
    ]);
    assert_eq!(code(&mismatch), 2);
    assert!(!String::from_utf8_lossy(&mismatch.stderr).is_empty());

    let missing = tmp.path().join("nope");
    assert_eq!(code(&stm(&["spectra", "--input", path(&missing), "--output", path(&out_dir)])), 1);
    assert_eq!(
        code(&stm(&["spectra", "--input", path(&input), "--output", path(&out_dir), "--gamma", "0"])),
        2
    );
}

fn stm_init(weights: &Path, residuals: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![
        "stm-init",
        "--weights",
        path(weights),
        "--residuals",
        path(residuals),
        "--output",
        path(out),
    ];
    args.extend_from_slice(extra);
    stm(&args)
}

#[test]
fn diagonal_plan_selects_largest_residual_directions() {
    let tmp = TempDir::new().unwrap();
    let w = bundle(tmp.path(), "w", &[("q", diag(&[3.0, 2.0, 1.0]))]);
    let dw = bundle(tmp.path(), "dw", &[("q", diag(&[0.0, 0.5, 0.9]))]);
    let out_dir = tmp.path().join("out");
    // Entropy rank of (3, 2, 1) is about 2.75, so alpha 0.7 gives r = 2.
    let out = stm_init(&w, &dw, &out_dir, &["--alpha", "0.7", "--max-rank-fraction", "1.0"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let plan = read_json(&out_dir.join("q").join("plan.json"));
    assert_eq!(plan["r"], 2);
    assert_eq!(plan["selected"], serde_json::json!([2, 3]));
    assert_eq!(plan["protected"], serde_json::json!([1]));
    assert!(String::from_utf8_lossy(&out.stdout).contains("trainable parameters: 12"));
}

#[test]
fn stm_init_is_byte_identical_across_runs() {
    let tmp = TempDir::new().unwrap();
    let model = make_synthetic_model(
        &[
            LayerSpec::new(10, 8, SpectrumSpec::Geometric { scale: 2.0, ratio: 0.8 }),
            LayerSpec::new(6, 10, SpectrumSpec::Geometric { scale: 1.0, ratio: 0.9 }),
        ],
        Activation::Identity,
        3,
    )
    .unwrap();
    let noise = make_synthetic_model(
        &[
            LayerSpec::new(10, 8, SpectrumSpec::Geometric { scale: 0.1, ratio: 0.9 }),
            LayerSpec::new(6, 10, SpectrumSpec::Geometric { scale: 0.1, ratio: 0.9 }),
        ],
        Activation::Identity,
        4,
    )
    .unwrap();
    let w = bundle(tmp.path(), "w", &[("a", model.layers[0].clone()), ("b", model.layers[1].clone())]);
    let dw = bundle(tmp.path(), "dw", &[("a", noise.layers[0].clone()), ("b", noise.layers[1].clone())]);
    let (o1, o2) = (tmp.path().join("o1"), tmp.path().join("o2"));
    let r1 = stm_init(&w, &dw, &o1, &["--alpha", "0.5"]);
    let r2 = stm_init(&w, &dw, &o2, &["--alpha", "0.5"]);
    assert_eq!(code(&r1), 0);
    assert_eq!(r1.stdout, r2.stdout);
    let (s1, s2) = (snapshot(&o1), snapshot(&o2));
    assert!(s1.len() >= 8);
    assert_eq!(s1, s2);
}

#[test]
fn stm_init_errors() {
    let tmp = TempDir::new().unwrap();
    let w = bundle(tmp.path(), "w", &[("q", Matrix::identity(3, 3)), ("k", Matrix::identity(3, 3))]);
    let dw = bundle(tmp.path(), "dw", &[("q", Matrix::zeros(3, 3))]);
    let out_dir = tmp.path().join("out");
    let missing = stm_init(&w, &dw, &out_dir, &["--alpha", "1.0"]);
    assert_eq!(code(&missing), 2);
    assert!(String::from_utf8_lossy(&missing.stderr).contains("\"k\""));
    assert!(!out_dir.exists());

    // Flags are checked before any file is touched.
    let nowhere = tmp.path().join("absent");
    assert_eq!(code(&stm_init(&nowhere, &nowhere, &out_dir, &["--alpha", "-1"])), 2);
    assert_eq!(
        code(&stm_init(&nowhere, &nowhere, &out_dir, &["--alpha", "1", "--max-rank-fraction", "2"])),
        2
    );
    assert_eq!(
        code(&stm_init(&nowhere, &nowhere, &out_dir, &["--alpha", "1", "--protection-rule", "up"])),
        2
    );
    assert_eq!(code(&stm_init(&nowhere, &nowhere, &out_dir, &["--alpha", "1"])), 1);
    assert_eq!(code(&stm(&["stm-init", "--weights", path(&w)])), 2);
}

#[test]
fn printed_count_matches_written_layers() {
    let tmp = TempDir::new().unwrap();
    let specs: Vec<LayerSpec> = (0..12)
        .map(|l| {
            let (m, n) = if l % 2 == 0 { (24, 24) } else { (24, 48) };
            LayerSpec::new(m, n, SpectrumSpec::Geometric { scale: 1.0, ratio: 0.6 + 0.03 * l as f64 })
        })
        .collect();
    let model = make_synthetic_model(&specs, Activation::Identity, 11).unwrap();
    let residual_specs: Vec<LayerSpec> = specs
        .iter()
        .map(|s| LayerSpec::new(s.rows, s.cols, SpectrumSpec::Geometric { scale: 0.1, ratio: 0.95 }))
        .collect();
    let residuals = make_synthetic_model(&residual_specs, Activation::Identity, 12).unwrap();
    let names: Vec<String> = (0..12).map(|l| format!("block{l:02}.attn_q")).collect();
    let w_entries: Vec<(&str, Matrix)> =
        names.iter().zip(&model.layers).map(|(n, m)| (n.as_str(), m.clone())).collect();
    let dw_entries: Vec<(&str, Matrix)> =
        names.iter().zip(&residuals.layers).map(|(n, m)| (n.as_str(), m.clone())).collect();
    let w = bundle(tmp.path(), "w", &w_entries);
    let dw = bundle(tmp.path(), "dw", &dw_entries);
    let out_dir = tmp.path().join("out");
    let out = stm_init(&w, &dw, &out_dir, &["--alpha", "0.5"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let layers: Vec<_> = names
        .iter()
        .zip(&model.layers)
        .map(|(n, w)| read_layer(out_dir.join(n)).unwrap().into_layer(w).unwrap())
        .collect();
    let expected = trainable_param_count(&layers);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains(&format!("trainable parameters: {expected}")), "{stdout}");
}

#[test]
fn verify_exit_codes() {
    let ok = stm(&["verify"]);
    assert_eq!(code(&ok), 0, "{}", String::from_utf8_lossy(&ok.stdout));
    assert!(String::from_utf8_lossy(&ok.stdout).contains("rank-ordering: 1000/1000 passed"));

    let fault = stm(&["verify", "--trials", "50", "--inject-fault"]);
    assert_eq!(code(&fault), 3);
    assert!(String::from_utf8_lossy(&fault.stdout).contains("FAIL rank-ordering seed"));

    assert_eq!(code(&stm(&["verify", "--trials", "0"])), 2);
}

fn train_toy(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train-toy", "--output", path(out), "--format", "json"];
    args.extend_from_slice(extra);
    stm(&args)
}

#[test]
fn train_toy_default_report() {
    let tmp = TempDir::new().unwrap();
    let out = train_toy(tmp.path(), &[]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows = records(&tmp.path().join("metrics.json"));
    let methods: Vec<&str> = rows.iter().map(|r| r["method"].as_str().unwrap()).collect();
    assert_eq!(methods, ["stm", "zero_init_lora"]);
    for r in &rows {
        for col in ["final_loss", "protected_drift", "steps_to_threshold", "trainable_params"] {
            assert!(r.get(col).is_some_and(|v| !v.is_null()), "{col} missing in {r}");
        }
        assert_eq!(r["seed"], 7);
    }
    assert_eq!(rows[0]["selection_recall"], 1.0);
}

#[test]
fn recall_column_is_stm_only() {
    let tmp = TempDir::new().unwrap();
    let out = train_toy(tmp.path(), &["--baseline", "random_subset_lora", "--steps", "20"]);
    assert_eq!(code(&out), 0);
    let rows = records(&tmp.path().join("metrics.json"));
    assert_eq!(rows[1]["method"], "random_subset_lora");
    assert!(rows[0].get("selection_recall").is_some());
    assert!(rows[1].get("selection_recall").is_none());
}

#[test]
fn regularization_reduces_drift() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("reg0"), tmp.path().join("reg1"));
    assert_eq!(code(&train_toy(&a, &["--reg-weight", "0"])), 0);
    assert_eq!(code(&train_toy(&b, &["--reg-weight", "1"])), 0);
    let drift = |p: &Path| records(&p.join("metrics.json"))[0]["protected_drift"].as_f64().unwrap();
    assert!(drift(&b) < drift(&a), "{} vs {}", drift(&b), drift(&a));
}

#[test]
fn train_toy_is_byte_identical_and_reports_divergence() {
    let tmp = TempDir::new().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let (ra, rb) = (train_toy(&a, &["--seed", "3"]), train_toy(&b, &["--seed", "3"]));
    assert_eq!((code(&ra), code(&rb)), (0, 0));
    assert_eq!(snapshot(&a), snapshot(&b));

    let boom = train_toy(&tmp.path().join("c"), &["--learning-rate", "50"]);
    assert_eq!(code(&boom), 4);
    assert!(String::from_utf8_lossy(&boom.stderr).contains("diverged"));

    assert_eq!(code(&train_toy(&tmp.path().join("d"), &["--steps", "0"])), 2);
    assert_eq!(code(&train_toy(&tmp.path().join("d"), &["--baseline", "adam"])), 2);
}
