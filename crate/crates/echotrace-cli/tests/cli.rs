//! End-to-end tests of the `echotrace` binary: exit codes, determinism,
//! environment overrides, and report coherence.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_echotrace"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {:?} failed:\n{}",
        args,
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).expect("utf-8 stdout")
}

fn path_str(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

/// Synthesizes a tiny dataset and returns (dir, manifest path as String).
fn synth(dir: &Path, images: usize, seed: u64) -> String {
    run_ok(&[
        "synth",
        "--out",
        path_str(dir),
        "--images",
        &images.to_string(),
        "--rows",
        "32",
        "--cols",
        "32",
        "--layers",
        "3",
        "--seed",
        &seed.to_string(),
    ]);
    path_str(&dir.join("manifest.json")).to_string()
}

fn train_fast(manifest: &str, out: &Path, epochs: &str, seed: &str) {
    run_ok(&[
        "train",
        "--manifest",
        manifest,
        "--out",
        path_str(out),
        "--arch",
        "skipwavenet",
        "--wavelet",
        "haar",
        "--width",
        "2",
        "--epochs",
        epochs,
        "--seed",
        seed,
    ]);
}

fn dir_bytes(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<_> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|p| {
            let name = p.file_name().unwrap().to_string_lossy().into_owned();
            (name, fs::read(&p).unwrap())
        })
        .collect()
}

#[test]
fn synth_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    synth(&tmp.path().join("a"), 3, 9);
    synth(&tmp.path().join("b"), 3, 9);
    synth(&tmp.path().join("c"), 3, 10);
    assert_eq!(
        dir_bytes(&tmp.path().join("a")),
        dir_bytes(&tmp.path().join("b")),
        "same seed must reproduce every byte"
    );
    assert_ne!(
        fs::read(tmp.path().join("a/img_0000.egm")).unwrap(),
        fs::read(tmp.path().join("c/img_0000.egm")).unwrap(),
        "different seeds must differ"
    );
}

#[test]
fn train_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2, 4);
    train_fast(&manifest, &tmp.path().join("a.ckpt"), "2", "5");
    train_fast(&manifest, &tmp.path().join("b.ckpt"), "2", "5");
    assert_eq!(
        fs::read(tmp.path().join("a.ckpt")).unwrap(),
        fs::read(tmp.path().join("b.ckpt")).unwrap()
    );
    assert_eq!(
        fs::read(tmp.path().join("a.losses.json")).unwrap(),
        fs::read(tmp.path().join("b.losses.json")).unwrap()
    );
}

#[test]
fn resumed_training_matches_a_straight_run() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2, 4);
    let straight = tmp.path().join("straight.ckpt");
    let resumed = tmp.path().join("resumed.ckpt");
    train_fast(&manifest, &straight, "4", "5");
    train_fast(&manifest, &resumed, "2", "5");
    run_ok(&[
        "train",
        "--manifest",
        &manifest,
        "--out",
        path_str(&resumed),
        "--epochs",
        "4",
        "--resume",
    ]);
    assert_eq!(fs::read(&straight).unwrap(), fs::read(&resumed).unwrap());
}

#[test]
fn pipeline_produces_a_coherent_report() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 3, 1);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "2", "0");
    let pipe = tmp.path().join("pipe");
    run_ok(&[
        "pipeline",
        "--checkpoint",
        path_str(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        path_str(&pipe),
    ]);

    for sub in ["preds", "nms", "layers"] {
        let count = fs::read_dir(pipe.join(sub)).unwrap().count();
        assert_eq!(count, 3, "{sub} should hold one file per echogram");
    }
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(pipe.join("report.json")).unwrap()).unwrap();
    assert!(report["pr_curve"].as_array().is_some_and(|c| !c.is_empty()));
    let ods = report["ods"]["f"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ods));
    assert!(report["ois"].as_f64().is_some());
    assert!(report["ap"].as_f64().is_some());
    assert!(
        report.get("coverage").is_some(),
        "depth metrics belong in the same report"
    );
}

#[test]
fn eval_then_depth_extends_the_same_report() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2, 2);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "1", "0");
    let preds = tmp.path().join("preds");
    run_ok(&[
        "predict",
        "--checkpoint",
        path_str(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        path_str(&preds),
    ]);
    let nms = tmp.path().join("nms");
    run_ok(&["nms", "--pred", path_str(&preds), "--out", path_str(&nms)]);
    let report_path = tmp.path().join("report.json");
    run_ok(&[
        "eval",
        "--pred",
        path_str(&nms),
        "--manifest",
        &manifest,
        "--out",
        path_str(&report_path),
    ]);

    let before: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert!(before.get("mae_overall").is_none());

    run_ok(&[
        "depth",
        "--pred",
        path_str(&nms),
        "--manifest",
        &manifest,
        "--report",
        path_str(&report_path),
    ]);
    let after: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&report_path).unwrap()).unwrap();
    assert_eq!(before["pr_curve"], after["pr_curve"], "eval results must survive the merge");
    assert_eq!(before["ods"], after["ods"]);
    assert!(after.get("coverage").is_some());
}

#[test]
fn eval_runs_are_byte_identical() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 2, 3);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "1", "0");
    let preds = tmp.path().join("preds");
    run_ok(&[
        "predict",
        "--checkpoint",
        path_str(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        path_str(&preds),
        "--threads",
        "1",
    ]);
    let (r1, r2) = (tmp.path().join("r1.json"), tmp.path().join("r2.json"));
    for r in [&r1, &r2] {
        run_ok(&[
            "eval",
            "--pred",
            path_str(&preds),
            "--manifest",
            &manifest,
            "--out",
            path_str(r),
        ]);
    }
    assert_eq!(fs::read(&r1).unwrap(), fs::read(&r2).unwrap());
}

#[test]
fn thread_count_does_not_change_predictions() {
    let tmp = TempDir::new().unwrap();
    let manifest = synth(&tmp.path().join("data"), 3, 6);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "1", "0");
    let (p1, p4) = (tmp.path().join("p1"), tmp.path().join("p4"));
    for (dir, threads) in [(&p1, "1"), (&p4, "4")] {
        run_ok(&[
            "predict",
            "--checkpoint",
            path_str(&ckpt),
            "--manifest",
            &manifest,
            "--out",
            path_str(dir),
            "--threads",
            threads,
        ]);
    }
    assert_eq!(dir_bytes(&p1), dir_bytes(&p4));
}

#[test]
fn unknown_arch_is_a_usage_error_listing_the_variants() {
    let out = run(&["train", "--arch", "foo", "--manifest", "x", "--out", "y"]);
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    for name in ["mscnn", "wavenet", "skipwavenet"] {
        assert!(stderr.contains(name), "{name} missing from:\n{stderr}");
    }
}

#[test]
fn unknown_flag_is_a_usage_error() {
    let out = run(&["synth", "--bogus", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error_naming_the_file() {
    let out = run(&[
        "eval",
        "--pred",
        "preds",
        "--manifest",
        "/no/such/manifest.json",
        "--out",
        "r.json",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("manifest.json"), "got: {stderr}");
}

#[test]
fn malformed_report_json_is_a_runtime_error() {
    let tmp = TempDir::new().unwrap();
    let bad = tmp.path().join("report.json");
    fs::write(&bad, "{not json").unwrap();
    let out = run(&[
        "report",
        "--eval",
        path_str(&bad),
        "--image",
        "img.egm",
        "--gt",
        "gt.csv",
        "--out",
        "out.svg",
    ]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn environment_variables_stand_in_for_flags() {
    let tmp = TempDir::new().unwrap();
    let by_flag = tmp.path().join("flag");
    let by_env = tmp.path().join("env");
    synth(&by_flag, 1, 42);
    let out = bin()
        .args(["synth", "--images", "1", "--rows", "32", "--cols", "32", "--layers", "3"])
        .env("ECHOTRACE_OUT", &by_env)
        .env("ECHOTRACE_SEED", "42")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        fs::read(by_flag.join("img_0000.egm")).unwrap(),
        fs::read(by_env.join("img_0000.egm")).unwrap()
    );
}

#[test]
fn svg_report_is_well_formed_and_marks_the_ods_point() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, 2, 8);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "2", "0");
    let pipe = tmp.path().join("pipe");
    run_ok(&[
        "pipeline",
        "--checkpoint",
        path_str(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        path_str(&pipe),
    ]);
    let svg_path = tmp.path().join("report.svg");
    run_ok(&[
        "report",
        "--eval",
        path_str(&pipe.join("report.json")),
        "--image",
        path_str(&data.join("img_0000.egm")),
        "--gt",
        path_str(&data.join("img_0000.csv")),
        "--pred",
        path_str(&pipe.join("layers/pred_0000.csv")),
        "--out",
        path_str(&svg_path),
    ]);

    let text = fs::read_to_string(&svg_path).unwrap();
    let doc = roxmltree::Document::parse(&text).expect("valid XML");
    let polylines = doc.descendants().filter(|n| n.has_tag_name("polyline")).count();
    assert!(polylines >= 2, "expected PR curve plus layer polylines, got {polylines}");
    let circles = doc.descendants().filter(|n| n.has_tag_name("circle")).count();
    assert_eq!(circles, 1, "the ODS marker");
    assert!(text.contains("ODS"));
}

#[test]
fn svg_report_survives_an_empty_layer_set() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    let manifest = synth(&data, 2, 8);
    let ckpt = tmp.path().join("model.ckpt");
    train_fast(&manifest, &ckpt, "1", "0");
    let pipe = tmp.path().join("pipe");
    run_ok(&[
        "pipeline",
        "--checkpoint",
        path_str(&ckpt),
        "--manifest",
        &manifest,
        "--out",
        path_str(&pipe),
    ]);
    let empty = tmp.path().join("empty.csv");
    fs::write(&empty, "layer_id,column,row\n").unwrap();
    let svg_path = tmp.path().join("report.svg");
    run_ok(&[
        "report",
        "--eval",
        path_str(&pipe.join("report.json")),
        "--image",
        path_str(&data.join("img_0000.egm")),
        "--gt",
        path_str(&empty),
        "--out",
        path_str(&svg_path),
    ]);
    let text = fs::read_to_string(&svg_path).unwrap();
    roxmltree::Document::parse(&text).expect("valid XML");
}

#[test]
fn wavelet_dump_filters_emits_orthonormal_taps() {
    for name in ["haar", "db2", "dmey"] {
        let stdout = run_ok(&["wavelet", "dump-filters", "--wavelet", name]);
        let taps: serde_json::Value = serde_json::from_str(&stdout).unwrap();
        assert_eq!(taps["name"].as_str().unwrap(), name);
        let lo: Vec<f64> = taps["dec_lo"]
            .as_array()
            .unwrap()
            .iter()
            .map(|v| v.as_f64().unwrap())
            .collect();
        let sum: f64 = lo.iter().sum();
        assert!(
            (sum - std::f64::consts::SQRT_2).abs() < 1e-9,
            "{name} dec_lo sums to {sum}"
        );
    }
}

#[test]
fn accum_reports_rates_with_uncertainty() {
    let tmp = TempDir::new().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 1, 3);
    let density = tmp.path().join("density.csv");
    fs::write(&density, "depth_m,density_kgm3\n0.0,250\n1.0,450\n").unwrap();
    let out = tmp.path().join("accum.json");
    run_ok(&[
        "accum",
        "--layers",
        path_str(&data.join("img_0000.csv")),
        "--density",
        path_str(&density),
        "--meta",
        path_str(&data.join("meta.json")),
        "--mae-px",
        "2.2",
        "--out",
        path_str(&out),
    ]);
    let report: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    let layers = report["layers"].as_array().unwrap();
    assert_eq!(layers.len(), 3);
    for row in layers {
        assert!(row["rate_m_we_per_a"].as_f64().unwrap() > 0.0);
        assert!(row["uncertainty_m_we_per_a"].as_f64().unwrap() > 0.0);
    }
}
