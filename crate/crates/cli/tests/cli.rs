use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn backstep(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_backstep"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn write_config(dir: &Path, body: &str) -> String {
    let path = dir.join("exp.toml");
    fs::write(&path, body).unwrap();
    path.to_str().unwrap().to_string()
}

#[test]
fn kernels_only_zero_coupling_writes_zero_kernels() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "mode = \"kernels-only\"\n[coefficients]\nkind = \"constant\"\nlambda = 1.0\nmu = 1.0\n[grid]\nn_w = 33\nn_s = 33\nn_x = 41\n",
    );
    let o = backstep(&["kernels", "--config", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("kernels.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("case,kernel,w,z,value,region"));
    for line in lines {
        let value: f64 = line.split(',').nth(4).unwrap().parse().unwrap();
        assert_eq!(value, 0.0);
    }
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["kernel"]["iterations"], 1);
    assert_eq!(summary["case"], 1);
}

#[test]
fn invalid_cfl_exits_with_validation_code() {
    let o = backstep(&["simulate", "--cfl", "1.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("cfl must lie in (0,1]"));
}

#[test]
fn empty_config_lists_required_keys() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "");
    let o = backstep(&["simulate", "--config", &cfg]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("mode") && err.contains("coefficients"),
        "{err}"
    );
}

#[test]
fn case_mismatch_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = backstep(&[
        "kernels",
        "--case",
        "3",
        "--nw",
        "33",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn unreachable_tolerance_exits_with_convergence_code() {
    let dir = tempfile::tempdir().unwrap();
    let o = backstep(&[
        "kernels",
        "--nw",
        "33",
        "--tol",
        "1e-300",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(
        o.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn simulate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = backstep(&[
            "simulate",
            "--nw",
            "33",
            "--nx",
            "81",
            "--t-final",
            "0.5",
            "--out",
            out.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let (a, b) = (run("a"), run("b"));
    for file in [
        "kernels.csv",
        "gains.csv",
        "norms_open.csv",
        "norms_closed.csv",
        "snapshots_closed.csv",
        "summary.json",
    ] {
        assert_eq!(
            fs::read(a.join(file)).unwrap(),
            fs::read(b.join(file)).unwrap(),
            "{file} differs"
        );
    }
}

#[test]
fn target_check_case_one_reports_first_order() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let cfg = write_config(
        dir.path(),
        "mode = \"target-check\"\ncase = \"1\"\n[coefficients]\nkind = \"constant\"\nlambda = 1.0\nmu = 1.0\nb = 0.5\nc = 0.5\n[grid]\nn_w = 65\nn_s = 65\n",
    );
    let o = backstep(&[
        "target-check",
        "--config",
        &cfg,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let summary: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("summary.json")).unwrap()).unwrap();
    for order in summary["target_check"]["observed_orders"]
        .as_array()
        .unwrap()
    {
        let p = order.as_f64().unwrap();
        assert!((0.8..=1.2).contains(&p), "order {p}");
    }
}
