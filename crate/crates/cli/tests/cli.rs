use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn ssne(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ssne")).args(args).output().expect("binary runs")
}

fn read(dir: &Path, name: &str) -> String {
    fs::read_to_string(dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

#[test]
fn statics_uniform_sphere_row() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssne(&["statics", "--profile", "uniform", "--radius", "1", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = read(dir.path(), "statics.csv");
    let row: Vec<&str> = csv.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[0], "uniform");
    let omega: f64 = row[2].parse().unwrap();
    assert!((omega - 1.0).abs() < 1e-9);
    let meta: serde_json::Value = serde_json::from_str(&read(dir.path(), "metadata.json")).unwrap();
    assert_eq!(meta["command"], "statics");
    assert_eq!(meta["units"]["hbar"], 1.0);
    assert!(meta["created_unix"].is_u64());
    assert!(meta["package_version"].is_string());
}

#[test]
fn ssne_diffusion_has_no_momentum_growth() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    let out = ssne(&["diffusion", "--variant", "ssne", "--trajectories", "200", "--t-final", "1", "--out-dir", d]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&read(dir.path(), "summary.json")).unwrap();
    let results = summary["results"].as_array().unwrap();
    let pbar = results.iter().find(|r| r["quantity"].as_str().unwrap().contains("pbar")).unwrap();
    assert!(pbar["estimate"].as_f64().unwrap().abs() < 1e-12);
    let xbar = &results[0];
    assert!((xbar["estimate"].as_f64().unwrap() - 1.0).abs() < 0.3);
}

#[test]
fn reruns_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |dir: &Path, workers: &str| {
        let out = ssne(&[
            "ke-rate",
            "--trajectories",
            "100",
            "--t-final",
            "0.5",
            "--seed",
            "42",
            "--workers",
            workers,
            "--out-dir",
            dir.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    run(a.path(), "1");
    run(b.path(), "2");
    for name in ["summary.json", "trajectories.csv"] {
        assert_eq!(read(a.path(), name), read(b.path(), name), "{name} differs");
    }
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, "trajectories = 100\nt_final = 0.2\nvariant = \"sne\"\nseed = 3\n").unwrap();
    let out_dir = dir.path().join("out");
    let out = ssne(&[
        "ke-rate",
        "--config",
        cfg.to_str().unwrap(),
        "--variant",
        "gsse",
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary: serde_json::Value = serde_json::from_str(&read(&out_dir, "summary.json")).unwrap();
    let settings = &summary["metadata"]["parameters"]["settings"];
    assert_eq!(settings["variant"], "gsse");
    assert_eq!(settings["trajectories"], 100);
    assert_eq!(summary["metadata"]["base_seed"], 3);
}

#[test]
fn malformed_config_fails_with_diagnostic() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "trajectorie = 20\n").unwrap();
    let out = ssne(&["ke-rate", "--config", cfg.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("parsing config"));
}

#[test]
fn unknown_subcommand_and_bad_variant_fail() {
    assert!(!ssne(&["simulate"]).status.success());
    let out = ssne(&["diffusion", "--variant", "csl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown variant"));
}

#[test]
fn solver_errors_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssne(&["diffusion", "--dt", "-1", "--out-dir", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn verify_subset_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let out = ssne(&["verify", "--only", "1,2", "--out-dir", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    let report = read(dir.path(), "report.txt");
    assert_eq!(report.lines().count(), 2);
    assert!(report.lines().all(|l| l.starts_with("PASS")));
    let json: serde_json::Value = serde_json::from_str(&read(dir.path(), "report.json")).unwrap();
    assert_eq!(json[0]["id"], 1);
    assert!(dir.path().join("statics_uniform_sphere.csv").exists());
}
