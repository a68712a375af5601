use std::path::Path;
use std::process::{Command, Output};

const SMALL: &str = r#"
name = "small_free"
grid.n = 96
grid.x_min = 0.0
grid.x_max = 40.0
packet.x0 = 20.0
packet.sigma = 2.0
packet.k0 = 1.0
window.t_f = 2.0
region.lo = 0.0
region.hi = 40.0
postselection.mode = "partition"
postselection.cuts = [22.0]
propagation.dt = 0.01
pipelines.clocks = true
clocks.methods = ["real_potential"]
"#;

fn traversal(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_traversal")).args(args).output().expect("binary runs")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("scenario.toml");
    std::fs::write(&p, text).unwrap();
    p.display().to_string()
}

#[test]
fn validate_accepts_good_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = traversal(&["validate", "--config", &cfg]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("ok small_free"));
}

#[test]
fn unknown_key_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &format!("{SMALL}grid.spacing = 0.1\n"));
    assert_eq!(traversal(&["validate", "--config", &cfg]).status.code(), Some(1));
}

#[test]
fn packet_on_region_edge_exits_with_validation_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), &SMALL.replace("region.lo = 0.0", "region.lo = 21.0"));
    assert_eq!(traversal(&["run", "--config", &cfg, "--out-dir", "unused"]).status.code(), Some(1));
}

#[test]
fn missing_file_exits_with_io_code() {
    assert_eq!(traversal(&["validate", "--config", "/nonexistent/x.toml"]).status.code(), Some(3));
}

#[test]
fn bad_flag_exits_with_validation_code() {
    assert_eq!(traversal(&["run", "--bogus"]).status.code(), Some(1));
}

#[test]
fn run_is_deterministic_and_emit_reproduces_csv() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let c = dir.path().join("c");
    for out in [&a, &b] {
        let o = traversal(&["run", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--threads", "2"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for ext in ["csv", "json"] {
        let x = std::fs::read(a.join(format!("small_free.{ext}"))).unwrap();
        let y = std::fs::read(b.join(format!("small_free.{ext}"))).unwrap();
        assert_eq!(x, y, "{ext} differs between runs");
    }
    let csv = std::fs::read_to_string(a.join("small_free.csv")).unwrap();
    assert!(csv.starts_with("scenario,method,postselection,l,value,tolerance,residual,flags\n"));
    assert!(csv.contains("small_free,real_potential,part1,1,"));

    let bundle = a.join("small_free.json");
    let o = traversal(&["emit", "--bundle", bundle.to_str().unwrap(), "--format", "csv", "--out-dir", c.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(std::fs::read_to_string(c.join("small_free.csv")).unwrap(), csv);
}

#[test]
fn compare_reports_passing_checks() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = traversal(&["compare", "--config", &cfg, "--out-dir", out.to_str().unwrap(), "--format", "json"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert_eq!(o.status.code(), Some(0), "{text}");
    assert!(text.contains("clock_vs_sojourn"));
    assert!(text.trim_end().ends_with("0 failed checks"));
}

#[test]
fn sweep_runs_clocks_only() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = traversal(&[
        "sweep",
        "--config",
        &cfg,
        "--out-dir",
        out.to_str().unwrap(),
        "--format",
        "csv",
        "--strengths",
        "4e-4,2e-4,1e-4",
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = std::fs::read_to_string(out.join("small_free.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.contains(",real_potential,")));
}

#[test]
fn builtin_two_level_scenario_runs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let o = traversal(&["run", "--scenario", "e", "--out-dir", out.to_str().unwrap(), "--format", "csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("e_two_level.csv").exists());
}
