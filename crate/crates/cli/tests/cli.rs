use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn mvface(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mvface"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn data(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("tests/data")
        .join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(dir: &Path, seed: u64) -> PathBuf {
    let out = dir.join(format!("scene{seed}"));
    let o = mvface(&[
        "synth",
        "--width",
        "64",
        "--height",
        "64",
        "--vertices",
        "600",
        "--seed",
        &seed.to_string(),
        "--landmark-noise",
        "0.5",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    out.join("scene.json")
}

fn read_json(p: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap()
}

#[test]
fn fit_from_truth_converges_within_five_iterations() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), 1);
    let out = dir.path().join("fit");
    let o = mvface(&[
        "fit",
        "--scene",
        s(&scene),
        "--out",
        s(&out),
        "--init",
        "truth",
        "--patience",
        "1",
    ]);
    assert_eq!(
        o.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
    let report = read_json(&out.join("report.json"));
    assert_eq!(report["converged"], true);
    assert!(report["iterations"].as_u64().unwrap() <= 5, "{report}");
    for f in ["params.json", "mesh.obj", "log.jsonl"] {
        assert!(out.join(f).exists(), "{f}");
    }
}

#[test]
fn iteration_limit_exits_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), 2);
    let out = dir.path().join("fit");
    let o = mvface(&[
        "fit",
        "--scene",
        s(&scene),
        "--out",
        s(&out),
        "--ablation",
        "photo",
        "--iterations",
        "1",
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(read_json(&out.join("report.json"))["converged"], false);
}

#[test]
fn landmark_only_log_has_no_image_terms() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), 3);
    let out = dir.path().join("fit");
    let o = mvface(&[
        "fit",
        "--scene",
        s(&scene),
        "--out",
        s(&out),
        "--ablation",
        "landmark-only",
    ]);
    assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
    let log = std::fs::read_to_string(out.join("log.jsonl")).unwrap();
    assert!(log.lines().count() > 1);
    for line in log.lines() {
        let entry: Value = serde_json::from_str(line).unwrap();
        assert!(entry["terms"]["landmark"].is_number());
        assert!(entry["terms"].get("photo").is_none(), "{line}");
        assert!(entry["terms"].get("align").is_none(), "{line}");
    }
}

#[test]
fn missing_landmark_file_exits_with_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), 4);
    let missing = scene.parent().unwrap().join("view1_landmarks.json");
    std::fs::remove_file(&missing).unwrap();
    let o = mvface(&[
        "fit",
        "--scene",
        s(&scene),
        "--out",
        s(&dir.path().join("fit")),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("view1_landmarks.json"), "{err}");
}

#[test]
fn unknown_flag_value_is_an_error() {
    let o = mvface(&[
        "fit",
        "--scene",
        "x.json",
        "--out",
        "y",
        "--ablation",
        "everything",
    ]);
    assert!(!o.status.success());
}

#[test]
fn mean_shape_render_matches_golden_png() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("mean.png");
    let o = mvface(&[
        "render",
        "--width",
        "64",
        "--height",
        "64",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(
        std::fs::read(&out).unwrap(),
        std::fs::read(data("golden_mean_64.png")).unwrap()
    );
}

/// Checks the subset of JSON Schema used by the committed schema files:
/// `type`, `required`, `properties`, `additionalProperties: false` and
/// `minimum`.
fn validate(schema: &Value, value: &Value, path: &str) -> Result<(), String> {
    if let Some(t) = schema.get("type").and_then(Value::as_str) {
        let ok = match t {
            "object" => value.is_object(),
            "number" => value.is_number(),
            "integer" => value.is_u64() || value.is_i64(),
            "string" => value.is_string(),
            "boolean" => value.is_boolean(),
            "array" => value.is_array(),
            other => return Err(format!("{path}: unsupported schema type {other}")),
        };
        if !ok {
            return Err(format!("{path}: expected {t}, got {value}"));
        }
    }
    if let (Some(min), Some(v)) = (
        schema.get("minimum").and_then(Value::as_f64),
        value.as_f64(),
    ) {
        if v < min {
            return Err(format!("{path}: {v} below minimum {min}"));
        }
    }
    if let Some(obj) = value.as_object() {
        for r in schema
            .get("required")
            .and_then(Value::as_array)
            .into_iter()
            .flatten()
        {
            let key = r.as_str().unwrap();
            if !obj.contains_key(key) {
                return Err(format!("{path}: missing required field {key}"));
            }
        }
        let props = schema.get("properties").and_then(Value::as_object);
        for (k, v) in obj {
            match props.and_then(|p| p.get(k)) {
                Some(sub) => validate(sub, v, &format!("{path}.{k}"))?,
                None if schema.get("additionalProperties") == Some(&Value::Bool(false)) => {
                    return Err(format!("{path}: unexpected field {k}"))
                }
                None => {}
            }
        }
    }
    Ok(())
}

#[test]
fn schema_validator_rejects_bad_summaries() {
    let schema = read_json(&data("eval_summary.schema.json"));
    let good = serde_json::json!({"count": 3, "mean": 0.0, "std": 0.0, "max": 0.0, "median": 0.0, "p90": 0.0, "p95": 0.0});
    assert!(validate(&schema, &good, "$").is_ok());
    let mut missing = good.clone();
    missing.as_object_mut().unwrap().remove("p95");
    assert!(validate(&schema, &missing, "$").is_err());
    let mut extra = good.clone();
    extra["rms"] = serde_json::json!(1.0);
    assert!(validate(&schema, &extra, "$").is_err());
    let mut negative = good;
    negative["mean"] = serde_json::json!(-1.0);
    assert!(validate(&schema, &negative, "$").is_err());
}

#[test]
fn eval_of_truth_against_itself_is_zero_and_matches_schema() {
    let dir = tempfile::tempdir().unwrap();
    let scene = synth(dir.path(), 5);
    let base = scene.parent().unwrap();
    let lm = dir.path().join("landmarks.json");
    let model = base.join("model.bin");
    let o = mvface(&["landmarks", "--model", s(&model), "--out", s(&lm)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let truth = base.join("truth.obj");
    let out = dir.path().join("eval");
    let o = mvface(&[
        "eval",
        "--pred",
        s(&truth),
        "--truth",
        s(&truth),
        "--landmarks",
        s(&lm),
        "--heatmap-max",
        "0.01",
        "--out",
        s(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary = read_json(&out.join("summary.json"));
    validate(&read_json(&data("eval_summary.schema.json")), &summary, "$").unwrap();
    assert!(summary["mean"].as_f64().unwrap() < 1e-9);
    assert!(out.join("errors.csv").exists() && out.join("heatmap.png").exists());
}

#[test]
fn synth_and_fit_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let d = dir.path().join(tag);
        let scene = synth(&d, 6);
        let out = d.join("fit");
        let o = mvface(&[
            "fit",
            "--scene",
            s(&scene),
            "--out",
            s(&out),
            "--iterations",
            "6",
        ]);
        assert!(o.status.code() == Some(0) || o.status.code() == Some(2));
        let files = [
            "view0.png",
            "view1_landmarks.json",
            "truth.json",
            "model.bin",
        ]
        .map(|f| std::fs::read(scene.parent().unwrap().join(f)).unwrap());
        (files, std::fs::read(out.join("params.json")).unwrap())
    };
    let (scene_a, params_a) = run("a");
    let (scene_b, params_b) = run("b");
    assert_eq!(scene_a, scene_b);
    assert_eq!(params_a, params_b);
}
