use std::ffi::{CStr, CString};
use std::path::PathBuf;
use std::process::Command;
use std::ptr;

use argus_ffi::*;

fn new_run(json: &str) -> (ArgusStatus, *mut ArgusRun) {
    let text = CString::new(json).unwrap();
    let mut run = ptr::null_mut();
    let status = unsafe { argus_run_new(text.as_ptr(), &mut run) };
    (status, run)
}

fn last_error() -> String {
    let p = argus_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

#[test]
fn run_lifecycle() {
    let (status, run) = new_run(r#"{"problem": "quadratic", "seed": 5, "T": 12}"#);
    assert_eq!(status, ArgusStatus::Ok);
    let mut m = ArgusMetrics::default();
    unsafe {
        assert_eq!(argus_run_step(run, &mut m), ArgusStatus::Ok);
        assert_eq!(m.t, 1);
        assert_eq!(argus_run_to_end(run), ArgusStatus::Ok);
        assert_eq!(argus_run_iteration(run), 12);
        assert_eq!(argus_run_step(run, &mut m), ArgusStatus::Finished);
        let mut last = ArgusMetrics::default();
        assert_eq!(argus_run_metrics(run, 12, &mut last), ArgusStatus::Ok);
        assert_eq!(last.t, 12);
        assert!(last.psi.is_finite());
        assert_eq!(argus_run_metrics(run, 13, &mut last), ArgusStatus::InvalidArgument);
        assert_eq!(argus_run_metrics(run, 0, &mut last), ArgusStatus::InvalidArgument);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let c_path = CString::new(path.to_str().unwrap()).unwrap();
        assert_eq!(argus_run_write_csv(run, c_path.as_ptr()), ArgusStatus::Ok);
        assert_eq!(std::fs::read_to_string(&path).unwrap().lines().count(), 13);
        argus_run_free(run);
    }
}

#[test]
fn ffi_trace_matches_library() {
    let json = r#"{"problem": "hyperclean", "seed": 2, "T": 20}"#;
    let cfg = argus::config::RunConfig::from_json_str(json).unwrap();
    let built = cfg.build_problem().unwrap();
    let mut buf = Vec::new();
    argus::cli::execute(&cfg, &built, &mut buf).unwrap();

    let (_, run) = new_run(json);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let c_path = CString::new(path.to_str().unwrap()).unwrap();
    unsafe {
        assert_eq!(argus_run_to_end(run), ArgusStatus::Ok);
        assert_eq!(argus_run_write_csv(run, c_path.as_ptr()), ArgusStatus::Ok);
        argus_run_free(run);
    }
    assert_eq!(std::fs::read(&path).unwrap(), buf);
}

#[test]
fn config_errors_are_reported() {
    let (status, run) = new_run(r#"{"problem": "quadratic", "p_c": 1.5, "bogus": 1}"#);
    assert_eq!(status, ArgusStatus::ConfigError);
    assert!(run.is_null());
    let msg = last_error();
    assert!(msg.contains("p_c") && msg.contains("bogus"), "{msg}");

    let (status, _) = new_run("not json");
    assert_eq!(status, ArgusStatus::ConfigError);
}

#[test]
fn null_arguments() {
    let mut run = ptr::null_mut();
    unsafe {
        assert_eq!(argus_run_new(ptr::null(), &mut run), ArgusStatus::NullPointer);
        let text = CString::new("{}").unwrap();
        assert_eq!(argus_run_new(text.as_ptr(), ptr::null_mut()), ArgusStatus::NullPointer);
        assert_eq!(argus_run_step(ptr::null_mut(), ptr::null_mut()), ArgusStatus::NullPointer);
        assert_eq!(argus_run_iteration(ptr::null()), 0);
        argus_run_free(ptr::null_mut());
        let mut out = 0.0;
        assert_eq!(argus_spectral_gap(ptr::null(), 3, &mut out), ArgusStatus::NullPointer);
    }
}

#[test]
fn divergence_is_sticky() {
    let (status, run) = new_run(r#"{"problem": "quadratic", "seed": 1, "T": 300, "eta_x": 10, "eta_y": 10}"#);
    assert_eq!(status, ArgusStatus::Ok);
    unsafe {
        assert_eq!(argus_run_to_end(run), ArgusStatus::Diverged);
        assert!(last_error().contains("divergence"));
        let done = argus_run_iteration(run);
        assert!(done < 300);
        assert_eq!(argus_run_step(run, ptr::null_mut()), ArgusStatus::Diverged);
        assert_eq!(argus_run_iteration(run), done);
        argus_run_free(run);
    }
}

#[test]
fn prox_and_spectral_gap() {
    let v = [3.0, -0.25, -1.5, 0.75];
    let mut out = [0.0; 4];
    unsafe {
        assert_eq!(argus_prox_l1(v.as_ptr(), 4, 0.5, out.as_mut_ptr()), ArgusStatus::Ok);
    }
    assert_eq!(out, [2.5, 0.0, -1.0, 0.25]);
    unsafe {
        assert_eq!(argus_prox_l1(v.as_ptr(), 4, -1.0, out.as_mut_ptr()), ArgusStatus::InvalidArgument);
    }

    // Metropolis weights of the path on three nodes.
    let w = [2.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0, 0.0, 1.0 / 3.0, 2.0 / 3.0];
    let mut rho = 0.0;
    unsafe {
        assert_eq!(argus_spectral_gap(w.as_ptr(), 3, &mut rho), ArgusStatus::Ok);
    }
    assert!((rho - 2.0 / 3.0).abs() < 1e-12);

    let asym = [0.5, 0.5, 0.0, 1.0];
    unsafe {
        assert_eq!(argus_spectral_gap(asym.as_ptr(), 2, &mut rho), ArgusStatus::InvalidArgument);
    }
}

#[test]
fn version_string() {
    let v = unsafe { CStr::from_ptr(argus_version()) }.to_str().unwrap();
    assert_eq!(v, env!("CARGO_PKG_VERSION"));
}

fn target_profile_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(|deps| deps.parent()).unwrap().to_path_buf()
}

#[test]
fn header_compiles_and_links_from_c() {
    let root = PathBuf::from(env!("CARGO_MANIFEST_DIR"));
    let include = root.join("include");
    let src = root.join("tests/c/smoke.c");
    let Ok(cc) = which_cc() else {
        eprintln!("no C compiler found; skipping");
        return;
    };
    let syntax = Command::new(&cc).args(["-std=c99", "-Wall", "-Werror", "-fsyntax-only", "-I"]).arg(&include).arg(&src).status().unwrap();
    assert!(syntax.success());

    let lib = target_profile_dir().join("libargus_ffi.a");
    if !lib.exists() {
        eprintln!("{} not built; skipping link step", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let link = Command::new(&cc)
        .arg("-I")
        .arg(&include)
        .arg(&src)
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm", "-o"])
        .arg(&exe)
        .status()
        .unwrap();
    assert!(link.success());
    let out = Command::new(&exe).output().unwrap();
    assert!(out.status.success(), "exit {:?}", out.status.code());
    assert_eq!(String::from_utf8_lossy(&out.stdout).trim(), "ok");
}

fn which_cc() -> Result<String, ()> {
    for cc in ["cc", "gcc", "clang"] {
        if Command::new(cc).arg("--version").output().is_ok() {
            return Ok(cc.to_string());
        }
    }
    Err(())
}
