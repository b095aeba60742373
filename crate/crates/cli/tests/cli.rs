use std::path::Path;
use std::process::{Command, Output};

fn nsf(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_nsf")).args(args).output().expect("binary runs")
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn path(dir: &Path, name: &str) -> String {
    dir.join(name).to_string_lossy().into_owned()
}

fn simulated(dir: &Path) -> (String, String) {
    ok(&nsf(&["simulate", "--kind", "ggblocks", "--seed", "4", "--features", "60", "--out", &path(dir, "sim")]));
    (path(dir, "sim/counts.csv"), path(dir, "sim/coords.csv"))
}

#[test]
fn simulate_fit_eval_postprocess() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (counts, coords) = simulated(d);
    for f in ["counts.csv", "coords.csv", "truth_spatial.csv", "truth_nonspatial.csv", "assignments.csv"] {
        assert!(d.join("sim").join(f).exists(), "{f}");
    }
    let fit = path(d, "fit");
    ok(&nsf(&[
        "fit", "--counts", &counts, "--coords", &coords, "--model", "nsfh", "-L", "3", "-M", "30", "--max-steps", "10",
        "--seed", "1", "--out", &fit,
    ]));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d.join("fit/report.json")).unwrap()).unwrap();
    assert!(report["metrics"]["elbo_trace"].as_array().is_some_and(|t| !t.is_empty()));
    assert!(report["metrics"]["validation"]["deviance"].as_f64().is_some_and(|v| v.is_finite()));
    let factors = std::fs::read_to_string(d.join("fit/factors.csv")).unwrap();
    assert!(factors.lines().next().unwrap().contains("component_2"));

    let archive = path(d, "fit/model.nsf");
    ok(&nsf(&["eval", "--model-archive", &archive, "--counts", &counts, "--coords", &coords, "--out", &path(d, "eval")]));
    assert!(d.join("eval/report.json").exists());

    ok(&nsf(&["postprocess", "--model-archive", &archive, "--top-k", "5", "--out", &path(d, "post")]));
    for f in ["factors.csv", "loadings.csv", "scores_features.csv", "scores_observations.csv", "top_features.csv", "factor_maps.csv"] {
        assert!(d.join("post").join(f).exists(), "{f}");
    }
    let top = std::fs::read_to_string(d.join("post/top_features.csv")).unwrap();
    // header plus five features for each of three components
    assert_eq!(top.lines().count(), 1 + 3 * 5);
}

#[test]
fn zero_components_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let (counts, coords) = simulated(dir.path());
    let out = nsf(&["fit", "--counts", &counts, "--coords", &coords, "--model", "nsf", "-L", "0", "--out", &path(dir.path(), "x")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x/report.json").exists());
}

#[test]
fn missing_input_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = nsf(&["fit", "--counts", "/nonexistent/y.csv", "--coords", "/nonexistent/x.csv", "--model", "pnmf", "-L", "2", "--out", &path(dir.path(), "x")]);
    assert!(!out.status.success());
    assert!(!String::from_utf8_lossy(&out.stderr).is_empty());
}

#[test]
fn postprocessing_a_real_valued_model_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let (counts, coords) = simulated(d);
    ok(&nsf(&[
        "fit", "--counts", &counts, "--coords", &coords, "--model", "rsf", "-L", "2", "-M", "20", "--max-steps", "5",
        "--out", &path(d, "rsf"),
    ]));
    let out = nsf(&["postprocess", "--model-archive", &path(d, "rsf/model.nsf"), "--out", &path(d, "post")]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("nonnegative"));
}
