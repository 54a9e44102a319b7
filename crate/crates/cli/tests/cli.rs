use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_levy-codebook"))
}

fn run(dir: &Path, args: &[&str], config: &str) -> Output {
    let cfg = dir.join("config.json");
    fs::write(&cfg, config).unwrap();
    bin().args(args).arg("--config").arg(&cfg).arg("--out").arg(dir.join("out")).output().unwrap()
}

fn read_csv(p: &Path) -> Vec<Vec<f64>> {
    fs::read_to_string(p)
        .unwrap()
        .lines()
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect()
}

fn fixture(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures").join(name)
}

const BS: &str = r#"{"model": "bs", "sigma": 0.2,
    "grid": {"maturity_step": 0.25, "maturity_count": 5, "frequency_step": 0.05, "frequency_max": 20},
    "price": {"maturities": [0, 1], "strikes": [0.9, 1, 1.1]}}"#;

const BNS: &str = r#"{"model": "bns", "lambda": 1, "delta": -0.5,
    "eta": {"kind": "compound-poisson-exp", "rate": 2.5, "theta": 2},
    "psiL": {"diffusion": 0.01},
    "grid": {"maturity_step": 0.1, "maturity_count": 6, "frequency_step": 0.5, "frequency_max": 5},
    "evolve": {"horizon": 0.4, "jumps": [[0.13, 0.4], [0.27, 0.1]]}}"#;

#[test]
fn bs_price_atm_and_intrinsic_row() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["price"], BS);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = read_csv(&d.path().join("out/prices.csv"));
    assert_eq!(rows.len(), 6);
    for r in &rows[..3] {
        assert!((r[2] - (1.0 - r[1]).max(0.0)).abs() < 1e-12, "{r:?}");
    }
    let atm = rows.iter().find(|r| r[0] == 1.0 && r[1] == 1.0).unwrap();
    assert!((atm[2] - 0.0797).abs() < 1e-4, "{atm:?}");
    assert!(d.path().join("out/slices/slice_001.csv").exists());
    let m: Value = serde_json::from_str(&fs::read_to_string(d.path().join("out/manifest.json")).unwrap()).unwrap();
    assert_eq!(m["command"], "price");
}

#[test]
fn malformed_config_is_a_usage_error_and_writes_nothing() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["price"], "{\"model\": ");
    assert_eq!(o.status.code(), Some(2));
    assert!(!d.path().join("out").exists());
    let leftovers: Vec<_> = fs::read_dir(d.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    assert_eq!(leftovers.len(), 1, "{leftovers:?}");
}

#[test]
fn unknown_check_is_a_usage_error() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["check", "--checks", "vibes"], BS);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn both_solvers_agree_on_bns() {
    let d = tempfile::tempdir().unwrap();
    let o = run(d.path(), &["evolve", "--solver", "both"], BNS);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert!(o.status.success(), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    let m: Value = serde_json::from_str(&fs::read_to_string(d.path().join("out/manifest.json")).unwrap()).unwrap();
    let agreement = m["result"]["agreement"].as_f64().unwrap();
    assert!(agreement < 1e-6, "{agreement}");
    assert_eq!(m["result"]["jumps"], 2);
    assert!(d.path().join("out/checkpoints/picard_000.csv").exists());
    assert!(d.path().join("out/checkpoints/event_000.csv").exists());
}

#[test]
fn zero_vol_checkpoints_are_identical() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"model": "pii", "psiL": {"diffusion": 0},
        "grid": {"maturity_step": 0.1, "maturity_count": 6, "frequency_step": 0.5, "frequency_max": 5},
        "evolve": {"horizon": 0.3}}"#;
    let o = run(d.path(), &["evolve"], cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let dir = d.path().join("out/checkpoints");
    let first = fs::read_to_string(dir.join("picard_000.csv")).unwrap();
    let mut n = 0;
    for e in fs::read_dir(&dir).unwrap() {
        let p = e.unwrap().path();
        if p.extension().is_some_and(|x| x == "csv") {
            assert_eq!(fs::read_to_string(&p).unwrap(), first, "{}", p.display());
            n += 1;
        }
    }
    assert!(n > 1);
}

#[test]
fn broken_surface_fails_convexity_once() {
    let d = tempfile::tempdir().unwrap();
    let cfg = format!(
        r#"{{"model": "bs", "sigma": 0.2, "check": {{"surface": {:?}}}}}"#,
        fixture("broken_surface.csv").to_str().unwrap()
    );
    let o = run(d.path(), &["check"], &cfg);
    assert_eq!(o.status.code(), Some(1));
    let r: Value = serde_json::from_str(&fs::read_to_string(d.path().join("out/report.json")).unwrap()).unwrap();
    let violations = r["violations"].as_array().unwrap();
    assert_eq!(violations.len(), 1, "{violations:?}");
    assert!(violations[0].as_str().unwrap().contains("convexity"));
    let failed: Vec<_> = r["checks"].as_array().unwrap().iter().filter(|c| c["passed"] == false).collect();
    assert_eq!(failed.len(), 1);
}

#[test]
fn bs_check_suite_passes() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"model": "bs", "sigma": 0.2, "seed": 1,
        "grid": {"maturity_step": 0.25, "maturity_count": 5, "frequency_step": 0.05, "frequency_max": 20},
        "check": {"paths": 20000}}"#;
    let o = run(d.path(), &["check"], cfg);
    let stdout = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{stdout}{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout.contains("tau: none"));
    assert!(d.path().join("out/report.txt").exists());
}

#[test]
fn zero_codebook_round_trip_is_exact() {
    let d = tempfile::tempdir().unwrap();
    let cfg = r#"{"model": "pii", "psiL": {"diffusion": 0},
        "grid": {"maturity_step": 0.1, "maturity_count": 6, "frequency_step": 0.5, "frequency_max": 5}}"#;
    let o = run(d.path(), &["roundtrip"], cfg);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(d.path().join("out/roundtrip.json")).unwrap()).unwrap();
    assert!(r["max_interior_error"].as_f64().unwrap() < 1e-12, "{r}");
}

#[test]
fn reruns_are_bit_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = run(d.path(), &["evolve", "--seed", "7"], &BNS.replace(r#", "jumps": [[0.13, 0.4], [0.27, 0.1]]"#, ""));
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let files = ["manifest.json", "path.json", "checkpoints/picard_003.csv"];
    for f in files {
        let x = fs::read(a.path().join("out").join(f)).unwrap();
        let y = fs::read(b.path().join("out").join(f)).unwrap();
        assert_eq!(x, y, "{f}");
    }
}

#[test]
fn threads_env_is_validated() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("config.json");
    fs::write(&cfg, BS).unwrap();
    let o = bin()
        .env("LEVY_CODEBOOK_THREADS", "zero")
        .args(["price", "--config"])
        .arg(&cfg)
        .arg("--out")
        .arg(d.path().join("out"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}
