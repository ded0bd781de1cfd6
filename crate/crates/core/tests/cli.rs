use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn data(name: &str) -> String {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("data").join(name).to_string_lossy().into_owned()
}

fn run(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_incstab"))
        .args(args)
        .arg("--out-dir")
        .arg(out)
        .output()
        .unwrap()
}

fn json(path: PathBuf) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn check_passes_for_pullback_certificate() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["check", "--system", &data("drift.json"), "--certificate", &data("pullback.json")], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(dir.path().join("report.json"));
    assert!(report.is_object() || report.is_array());
    let meta = json(dir.path().join("metadata.json"));
    assert_eq!(meta["seed"], 0);
}

#[test]
fn falsify_exits_one_with_witness() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["falsify", "--system", &data("drift.json"), "--certificate", &data("euclidean.json")], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let text = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    assert!(text.contains("counterexample"));
}

#[test]
fn same_seed_gives_identical_reports() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["check", "--mode", "iss", "--system", &data("linear.json"), "--certificate", &data("linear_iss.json"), "--seed", "5"];
    run(&args, a.path());
    run(&args, b.path());
    let ra = std::fs::read(a.path().join("report.json")).unwrap();
    let rb = std::fs::read(b.path().join("report.json")).unwrap();
    assert_eq!(ra, rb);
}

#[test]
fn input_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["check", "--system", "/nonexistent.json", "--certificate", &data("pullback.json")], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(!out.stderr.is_empty());
    let out = run(&["check", "--system", &data("drift.json"), "--certificate", &data("drift.json")], dir.path());
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn simulate_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["simulate", "--system", &data("linear.json"), "--x0", "1", "--input", "0", "--horizon", "1", "--step", "0.1"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = std::fs::read_to_string(dir.path().join("trajectory.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("t,x1"));
    assert_eq!(lines.count(), 11);
}

#[test]
fn augment_iss_emits_saturation_nodes() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["augment", "--mode", "iss", "--system", &data("linear.json"), "--metric", &data("euclidean_metric.json"), "--rho", &data("rho.json")],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let spec = json(dir.path().join("augmented.json"));
    assert_eq!(spec["state_dim"], 2);
    assert!(spec["sat"].is_array());
    assert!(spec["rho_dist"].is_object());
}

#[test]
fn rho_from_beta_and_gamma() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["rho", "--beta", &data("beta.json"), "--gamma", &data("gamma.json")], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let text = std::fs::read_to_string(dir.path().join("rho.json")).unwrap();
    assert!(text.contains("0.0625"), "{text}");
}

#[test]
fn envelope_reports_missing_envelope() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(
        &["envelope", "--system", &data("drift.json"), "--metric", &data("euclidean_metric.json"), "--pairs", "60", "--horizon", "4"],
        dir.path(),
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(dir.path().join("traces.csv").exists());
}

#[test]
fn non_injective_pullback_warns() {
    let dir = tempfile::tempdir().unwrap();
    let cert = dir.path().join("square.json");
    std::fs::write(
        &cert,
        r#"{"V": "(x1^2 - y1^2)^2", "metric": {"kind": "pullback", "map": ["x1^2"]},
            "alpha_lo": {"family": "power", "c": 1.0, "p": 2.0},
            "alpha_hi": {"family": "power", "c": 1.0, "p": 2.0}, "kappa": 1.0}"#,
    )
    .unwrap();
    let out = run(&["check", "--system", &data("decay.json"), "--certificate", cert.to_str().unwrap()], dir.path());
    assert!(String::from_utf8_lossy(&out.stderr).contains("not injective"));
    let out = run(&["check", "--system", &data("drift.json"), "--certificate", &data("pullback.json")], dir.path());
    assert!(out.stderr.is_empty());
}
