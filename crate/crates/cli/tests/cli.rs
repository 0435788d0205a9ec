use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn octrap(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_octrap")).args(args).output().expect("binary runs")
}

fn dir(tag: &str) -> PathBuf {
    let d = std::env::temp_dir().join(format!("octrap-cli-{tag}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&d);
    fs::create_dir_all(&d).unwrap();
    d
}

#[test]
fn scan_from_config_writes_artifacts() {
    let d = dir("scan");
    let cfg = d.join("scan.cfg");
    fs::write(&cfg, "# short compression scan\nname = short\nkind = defect\nparam = l_s\nstart = 0\nstop = 0.022\nstep = 0.011\n").unwrap();
    let out = d.join("out");
    let o = octrap(&["scan", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("short.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(out.join("short.svg").exists() && out.join("short_manifest.txt").exists());
    let again = d.join("again");
    octrap(&["scan", "--config", cfg.to_str().unwrap(), "--out", again.to_str().unwrap()]);
    assert_eq!(fs::read_to_string(again.join("short.csv")).unwrap(), csv);
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn invalid_config_exits_with_2() {
    let d = dir("bad");
    let cfg = d.join("bad.cfg");
    fs::write(&cfg, "kind = defect\nparam = nonsense\nstart = 0\nstop = 1\npoints = 3\n").unwrap();
    let o = octrap(&["scan", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::write(&cfg, "fraction = 0.5\n").unwrap();
    let o = octrap(&["completeness", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = octrap(&["reproduce", "fig99", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let o = octrap(&["scan", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn reproduce_check_reports_and_sets_exit_code() {
    let d = dir("repro");
    let o = octrap(&["reproduce", "fig3", "--out", d.to_str().unwrap(), "--check"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stdout));
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.lines().all(|l| l.starts_with("PASS")));
    assert!(d.join("fig3.csv").exists());
    let o = octrap(&["reproduce", "table2", "--out", d.to_str().unwrap(), "--check"]);
    let text = String::from_utf8_lossy(&o.stdout).to_string();
    let failed = text.lines().any(|l| l.starts_with("FAIL"));
    assert_eq!(o.status.code(), Some(if failed { 4 } else { 0 }));
    let o = octrap(&["reproduce", "table2", "--out", d.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn compensation_and_tables_run_small() {
    let d = dir("small");
    let cfg = d.join("k.cfg");
    fs::write(&cfg, "fraction = 0.0\nsteps = 2\n").unwrap();
    let o = octrap(&["compensate", "--config", cfg.to_str().unwrap(), "--out", d.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("d_b (μm): 0.0 0.0 0.0"));
    let o = octrap(&["tables", "--pixel-um", "8", "--seed", "4", "--out", d.to_str().unwrap()]);
    assert!(o.status.success());
    let t1 = fs::read_to_string(d.join("table1.csv")).unwrap();
    assert!(t1.starts_with("d_px_um,cases,success_1px_pct,success_2px_pct\n8,50,"));
    fs::remove_dir_all(&d).unwrap();
}

#[test]
fn worker_override_is_validated() {
    let d = dir("workers");
    let o = Command::new(env!("CARGO_BIN_EXE_octrap"))
        .args(["tables", "--pixel-um", "8", "--out", d.to_str().unwrap()])
        .env("OCTRAP_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_octrap"))
        .args(["tables", "--pixel-um", "8", "--out", d.to_str().unwrap()])
        .env("OCTRAP_WORKERS", "1")
        .output()
        .unwrap();
    assert!(o.status.success());
    fs::remove_dir_all(&d).unwrap();
}
