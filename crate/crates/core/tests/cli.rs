use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

fn argus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_argus")).args(args).output().expect("argus binary runs")
}

fn write_config(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

fn run_into(config: &str, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["run", "--config", config, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    argus(&args)
}

#[test]
fn seeded_runs_are_byte_identical() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "hyperclean", "seed": 1, "T": 40}"#);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    assert!(run_into(&cfg, &a, &["--seed", "7"]).status.success());
    assert!(run_into(&cfg, &b, &["--seed", "7"]).status.success());
    let csv_a = fs::read(a.join("metrics.csv")).unwrap();
    assert_eq!(csv_a, fs::read(b.join("metrics.csv")).unwrap());
    assert_eq!(csv_a.iter().filter(|c| **c == b'\n').count(), 41);

    let summary: serde_json::Value = serde_json::from_slice(&fs::read(a.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["seed"], 7);
    assert_eq!(summary["status"], "ok");
    assert_eq!(summary["iterations"], 40);
}

#[test]
fn zero_iterations_give_header_only() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "quadratic", "seed": 2, "T": 0}"#);
    let out = run_into(&cfg, dir.path(), &[]);
    assert!(out.status.success());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    assert_eq!(
        csv,
        "t,psi,gap_sq,consensus,upper_loss,lower_loss,task_metric,active_count,avg_cuts,comm_bits_cum,flops_cum,virtual_time\n"
    );
}

#[test]
fn invalid_config_lists_every_failure() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "hyperclean", "p_c": 1.5, "tau": 0, "colour": "red"}"#);
    let out = run_into(&cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("p_c"), "{err}");
    assert!(err.contains("tau"), "{err}");
    assert!(err.contains("colour"), "{err}");
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn missing_config_file_is_a_config_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.json");
    let out = run_into(missing.to_str().unwrap(), dir.path(), &[]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn divergence_exits_with_two_and_keeps_partial_trace() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "quadratic", "seed": 1, "T": 300, "eta_x": 10, "eta_y": 10}"#);
    let out = run_into(&cfg, dir.path(), &[]);
    assert_eq!(out.status.code(), Some(2));
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["status"], "diverged");
    let rows = fs::read_to_string(dir.path().join("metrics.csv")).unwrap().lines().count() - 1;
    assert_eq!(summary["iterations"], rows);
    assert!(rows < 300);
}

#[test]
fn mode_flag_overrides_config() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "quadratic", "seed": 3, "T": 10, "mode": "argus"}"#);
    assert!(run_into(&cfg, dir.path(), &["--mode", "argus-s"]).status.success());
    let summary: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["mode"], "argus-s");
}

#[test]
fn compare_writes_paired_traces() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(
        dir.path(),
        "c.json",
        r#"{"problem": "hyperclean", "seed": 2, "T": 120, "round_length": 1.5,
            "stragglers_per_round": 2, "straggler_multiplier": 10,
            "delay": {"compute_mean": 1.0, "compute_jitter": 0.1, "comm_mean": 0.1, "comm_jitter": 0.01}}"#,
    );
    let out = argus(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["metrics_argus.csv", "metrics_argus-s.csv"] {
        assert_eq!(fs::read_to_string(dir.path().join(f)).unwrap().lines().count(), 121);
    }
    let s: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join("compare_summary.json")).unwrap()).unwrap();
    assert_eq!(s["target_source"], "default");
    let ratio = s["time_ratio"].as_f64().unwrap();
    assert!(ratio > 0.0 && ratio < 1.0, "{ratio}");
}

#[test]
fn compare_without_delay_is_rejected() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), "c.json", r#"{"problem": "quadratic", "seed": 3, "T": 10}"#);
    let out = argus(&["compare", "--config", &cfg, "--out", dir.path().to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validate_passes_all_suites() {
    let out = argus(&["validate"]);
    let table = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{table}");
    assert!(table.contains("cuts.separation"));
    assert!(!table.contains("FAIL"));
}

#[test]
fn topology_and_cut_dumps() {
    let dir = TempDir::new().unwrap();
    let topo = dir.path().join("topo.csv");
    let cuts = dir.path().join("cuts.csv");
    let body = format!(
        r#"{{"problem": "quadratic", "seed": 4, "T": 12, "T1": 10, "iota": 5, "N": 5,
            "topology_dump": {:?}, "cuts_dump": {:?}}}"#,
        topo.to_str().unwrap(),
        cuts.to_str().unwrap()
    );
    let cfg = write_config(dir.path(), "c.json", &body);
    assert!(run_into(&cfg, dir.path(), &[]).status.success());
    let topo_text = fs::read_to_string(&topo).unwrap();
    assert!(topo_text.starts_with("t,i,j\n"));
    let steps: std::collections::BTreeSet<&str> = topo_text.lines().skip(1).map(|l| l.split(',').next().unwrap()).collect();
    assert_eq!(steps.len(), 13);
    let cut_text = fs::read_to_string(&cuts).unwrap();
    assert!(cut_text.starts_with("t,owner,plane_id,c,norm_a,norm_b\n"));
    for line in cut_text.lines().skip(1) {
        let t: usize = line.split(',').next().unwrap().parse().unwrap();
        assert!(t == 5 || t == 10, "{line}");
    }
}
