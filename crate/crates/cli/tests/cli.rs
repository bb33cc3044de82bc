use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use laplace_mh::bma::write_grid_json;
use laplace_mh::laplace::MarginalGrid;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_laplace-mh"))
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data")
}

fn write_config(dir: &Path, chain: &str) -> PathBuf {
    let data = data_dir();
    let text = format!(
        r#"{{
            "model": "manski",
            "data": {{"gal": "{}", "csv": "{}", "response": "CRIME", "covariates": ["INC", "HOVAL"]}},
            "chain": {chain},
            "output": "out"
        }}"#,
        data.join("columbus.gal").display(),
        data.join("columbus.csv").display()
    );
    let path = dir.join("config.json");
    std::fs::write(&path, text).unwrap();
    path
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("process exited normally")
}

#[test]
fn burnin_not_below_total_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"burnin": 100, "iterations": 100, "thin": 1, "seed": 3}"#);
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("out").exists());
}

#[test]
fn dry_run_prints_resolved_config_and_writes_nothing() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"iterations": 50, "burnin": 10}"#);
    let out = bin().arg("run").arg(&cfg).arg("--dry-run").env_remove("LAPLACE_MH_SEED").output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resolved["chain"]["thin"], 5);
    assert_eq!(resolved["chain"]["seed"], 1);
    assert_eq!(resolved["chain"]["proposal_sd"], serde_json::json!([0.25, 0.25]));
    let entries: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(entries.len(), 1);
}

#[test]
fn seed_variable_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"seed": 3}"#);
    let out = bin().args(["run", "--dry-run"]).arg(&cfg).env("LAPLACE_MH_SEED", "77").output().unwrap();
    let resolved: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(resolved["chain"]["seed"], 77);
    let bad = bin().args(["run", "--dry-run"]).arg(&cfg).env("LAPLACE_MH_SEED", "x").output().unwrap();
    assert_eq!(code(&bad), 2);
}

#[test]
fn missing_data_file_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let text = r#"{"model": "manski", "data": {"gal": "nope.gal", "csv": "nope.csv", "response": "y", "covariates": ["x"]}}"#;
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, text).unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 3);
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"model": "probit"}"#).unwrap();
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn short_run_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), r#"{"burnin": 10, "iterations": 40, "thin": 2, "seed": 5}"#);
    let out = bin().arg("run").arg(&cfg).output().unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let o = dir.path().join("out");
    for f in ["chain.csv", "summary.csv", "impacts.csv", "manifest.json"] {
        assert!(o.join(f).exists(), "{f} missing");
    }
    for m in ["rho", "lambda", "INC", "HOVAL", "direct.INC", "indirect.HOVAL", "total.INC", "sigma2"] {
        assert!(o.join("marginals").join(format!("{m}.json")).exists(), "{m} missing");
    }
    let impacts = std::fs::read_to_string(o.join("impacts.csv")).unwrap();
    let lines: Vec<&str> = impacts.lines().collect();
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("engine,INC,"));
    assert_eq!(lines[1].split(',').count(), 8);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(o.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert!(manifest["acceptance_rate"].as_f64().unwrap() > 0.0);

    let cmp = bin().arg("compare").arg(&o).arg(&o).arg("--json").arg(dir.path().join("c.json")).output().unwrap();
    assert_eq!(code(&cmp), 0);
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("c.json")).unwrap()).unwrap();
    let rows = report["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 13);
    assert!(rows.iter().all(|r| r["total_variation"] == 0.0 && r["mean_delta"] == 0.0));
}

fn marginals_dir(root: &Path, names: &[&str]) -> PathBuf {
    let m = root.join("marginals");
    std::fs::create_dir_all(&m).unwrap();
    for (k, n) in names.iter().enumerate() {
        let g = MarginalGrid::gaussian(*n, k as f64, 1.0, 101).unwrap();
        write_grid_json(&g, m.join(format!("{n}.json"))).unwrap();
    }
    root.to_path_buf()
}

#[test]
fn compare_of_identical_dirs_has_zero_distance() {
    let dir = tempfile::tempdir().unwrap();
    let a = marginals_dir(&dir.path().join("a"), &["rho", "lambda"]);
    let out = bin().arg("compare").arg(&a).arg(&a).output().unwrap();
    assert_eq!(code(&out), 0);
    let table = String::from_utf8(out.stdout).unwrap();
    assert!(table.lines().count() == 3);
    assert!(table.lines().skip(1).all(|l| l.trim_end().ends_with("0.0000")));
}

#[test]
fn compare_of_disjoint_dirs_is_a_name_mismatch() {
    let dir = tempfile::tempdir().unwrap();
    let a = marginals_dir(&dir.path().join("a"), &["rho"]);
    let b = marginals_dir(&dir.path().join("b"), &["delta.d1"]);
    let out = bin().arg("compare").arg(&a).arg(&b).output().unwrap();
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains("parameter names do not match"));
}

#[test]
fn compare_reports_shift_between_runs() {
    let dir = tempfile::tempdir().unwrap();
    let a = marginals_dir(&dir.path().join("a"), &["x"]);
    let b = dir.path().join("b");
    std::fs::create_dir_all(b.join("marginals")).unwrap();
    let g = MarginalGrid::gaussian("x", 0.5, 1.0, 401).unwrap();
    write_grid_json(&g, b.join("marginals/x.json")).unwrap();
    let json = dir.path().join("r.json");
    let out = bin().arg("compare").arg(&a).arg(&b).arg("--json").arg(&json).output().unwrap();
    assert_eq!(code(&out), 0);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(json).unwrap()).unwrap();
    let row = &report["rows"][0];
    assert!((row["mean_delta"].as_f64().unwrap() - 0.5).abs() < 1e-3);
    // TV between N(0,1) and N(0.5,1) is 2Φ(0.25) − 1.
    assert!((row["total_variation"].as_f64().unwrap() - 0.197413).abs() < 2e-3);
}
