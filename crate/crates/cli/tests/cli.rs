use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;

use rbsde_cli::{sha256_hex, Manifest};
use serde_json::Value;

const HEAT: &str = r#"
seed = 1

[domain.box]
bounds = [[0.0, 1.0]]

[initial_law]
kind = "point"
x0 = [0.3]

[problem]
driver = "zero"
terminal = "cospi:1"
horizon = 0.5

[numerics]
dt = 0.005
n_paths = 2000

[fd]
n_grid = 41
"#;

fn rbsde(cmd: &str, config: &str, out: &Path, extra: &[&str]) -> (i32, String) {
    let cfg = out.with_extension("toml");
    fs::write(&cfg, config).unwrap();
    run_binary(cmd, &cfg, out, extra)
}

fn run_binary(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> (i32, String) {
    let output = Command::new(env!("CARGO_BIN_EXE_rbsde"))
        .arg(cmd)
        .arg("--config")
        .arg(&cfg)
        .arg("--out")
        .arg(out)
        .args(extra)
        .output()
        .unwrap();
    (output.status.code().unwrap(), String::from_utf8_lossy(&output.stderr).into_owned())
}

fn json(path: PathBuf) -> Value {
    serde_json::from_str(&fs::read_to_string(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()))).unwrap()
}

fn manifest(dir: &Path) -> Manifest {
    serde_json::from_str(&fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap()
}

/// Every file except the manifest is listed with a matching hash.
fn assert_manifest_complete(dir: &Path) {
    let m = manifest(dir);
    let mut on_disk: Vec<String> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .filter(|n| n != "manifest.json")
        .collect();
    on_disk.sort();
    let mut listed: Vec<String> = m.files.iter().map(|f| f.name.clone()).collect();
    listed.sort();
    assert_eq!(on_disk, listed);
    for f in &m.files {
        let bytes = fs::read(dir.join(&f.name)).unwrap();
        assert_eq!(bytes.len() as u64, f.bytes);
        assert_eq!(sha256_hex(&bytes), f.sha256, "{}", f.name);
    }
}

#[test]
fn simulate_writes_bundle_and_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("sim");
    let (code, err) = rbsde("simulate", HEAT, &out, &[]);
    assert_eq!(code, 0, "{err}");
    for f in ["bundle.rbdf", "bundle.json", "report.json", "paths.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    assert!(!out.join("manifest.json.tmp").exists());
    assert_manifest_complete(&out);
    let bytes = fs::read(out.join("bundle.rbdf")).unwrap();
    assert_eq!(&bytes[..5], b"RBDF1");
    let sidecar = json(out.join("bundle.json"));
    assert_eq!(sidecar["n_paths"], 2000);
    let m = manifest(&out);
    assert_eq!(m.exit_code, 0);
    assert_eq!(m.invocation["config"]["seed"], 1);
    assert!(m.wall_clock_seconds >= 0.0);
}

#[test]
fn forced_non_convergence_exits_three_with_a_trace() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("bsde");
    let cfg = HEAT.replace("driver = \"zero\"", "driver = \"sin\"").replace("n_paths = 2000", "n_paths = 2000\ntol = 1e-12\nmax_iter = 1");
    let (code, _) = rbsde("solve-bsde", &cfg, &out, &[]);
    assert_eq!(code, 3);
    let trace = fs::read_to_string(out.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().next(), Some("iteration,delta"));
    assert_eq!(trace.lines().count(), 2);
    let err = json(out.join("error.json"));
    assert_eq!(err["kind"], "non-convergence");
    assert_eq!(err["exit_code"], 3);
    assert_manifest_complete(&out);
    assert_eq!(manifest(&out).exit_code, 3);

    // the same problem converges with room to iterate
    let cfg = cfg.replace("max_iter = 1", "max_iter = 40");
    let (code, err) = rbsde("solve-bsde", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    assert!(!out.join("error.json").exists());
    let report = json(out.join("report.json"));
    assert!(report["solution"]["iterations"].as_u64().unwrap() >= 5);
}

#[test]
fn heat_comparison_passes_at_the_stated_tolerance() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cmp");
    let cfg = HEAT.replace("dt = 0.005\nn_paths = 2000", "dt = 0.001\nn_paths = 200000\nrecord_every = 50").replace("n_grid = 41", "n_grid = 101");
    let (code, err) = rbsde("compare", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    let report = json(out.join("report.json"));
    let c = &report["comparison"];
    let tolerance = c["tolerance"].as_f64().unwrap();
    assert_eq!(tolerance, 0.01);
    assert!(c["difference"].as_f64().unwrap().abs() < tolerance, "{c}");
    assert_eq!(c["pass"], true);
    let exact = (-std::f64::consts::PI.powi(2) * 0.25).exp() * (0.3 * std::f64::consts::PI).cos();
    assert!((c["u_fd"].as_f64().unwrap() - exact).abs() < 1e-3);
    assert!(c["dt_note"].as_str().unwrap().contains("0.001"));
}

#[test]
fn mismatched_horizons_exit_two_with_the_difference() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("cmp");
    let cfg = format!("{HEAT}\n[compare]\nfd_horizon = 0.4\n");
    let (code, stderr) = rbsde("compare", &cfg, &out, &[]);
    assert_eq!(code, 2);
    let err = json(out.join("error.json"));
    let msg = err["message"].as_str().unwrap();
    assert!(msg.contains("t: 0.5 vs 0.4"), "{msg}");
    assert!(stderr.contains("t: 0.5 vs 0.4"));
    assert_eq!(err["kind"], "input");
    assert_manifest_complete(&out);
}

#[test]
fn validation_errors_exit_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cases = [
        HEAT.replace("cospi:1", "cospi:3"),
        HEAT.replace("dt = 0.005", "dt = -0.005"),
        format!("{HEAT}\n[field]\nname = \"nope\"\n"),
        HEAT.replace("driver = \"zero\"", "driver = \"cubic\""),
        format!("{HEAT}\nbogus_key = 1\n"),
        HEAT.replace("x0 = [0.3]", "x0 = [1.3]"),
    ];
    for (i, cfg) in cases.iter().enumerate() {
        let (code, stderr) = rbsde("solve-pde-stochastic", cfg, &tmp.path().join(format!("v{i}")), &[]);
        assert_eq!(code, 2, "case {i}: {stderr}");
        assert!(!stderr.is_empty());
    }
    let (code, _) = rbsde("simulate", HEAT, &tmp.path().join("t"), &["--threads", "0"]);
    assert_eq!(code, 2);
}

#[test]
fn unwritable_output_exits_two() {
    let tmp = tempfile::tempdir().unwrap();
    let file = tmp.path().join("plain");
    fs::write(&file, b"x").unwrap();
    let cfg = tmp.path().join("heat.toml");
    fs::write(&cfg, HEAT).unwrap();
    let (code, stderr) = run_binary("simulate", &cfg, &file.join("below"), &[]);
    assert!(stderr.contains("below"), "{stderr}");
    assert_eq!(code, 2, "{stderr}");
}

#[test]
fn blowup_exits_four() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fd");
    let cfg = HEAT.replace("driver = \"zero\"", "driver = \"linear:-60,0\"").replace("horizon = 0.5", "horizon = 1.0");
    let (code, stderr) = rbsde("solve-pde-fd", &cfg, &out, &[]);
    assert_eq!(code, 4, "{stderr}");
    assert_eq!(json(out.join("error.json"))["kind"], "numerical");
}

#[test]
fn fd_command_reports_quality_gates() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("fd");
    let cfg = HEAT.replace("[fd]", "[fd]\nsnapshots = [0.25]");
    let (code, err) = rbsde("solve-pde-fd", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    let report = json(out.join("report.json"));
    assert_eq!(report["maximum_principle"], true);
    assert!(report["mass"]["max_abs_drift"].as_f64().unwrap() < 1e-10);
    assert_eq!(report["times"].as_array().unwrap().len(), 3);
    let csv = fs::read_to_string(out.join("solution.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("t,x,u"));
    assert_eq!(csv.lines().count(), 1 + 3 * 41);
}

#[test]
fn json_format_embeds_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("j");
    let (code, err) = rbsde("solve-pde-stochastic", HEAT, &out, &["--format", "json"]);
    assert_eq!(code, 0, "{err}");
    assert!(!out.join("steps.csv").exists());
    let report = json(out.join("report.json"));
    let steps = &report["tables"]["steps"];
    assert_eq!(steps["columns"][0], "t");
    assert_eq!(steps["rows"].as_array().unwrap().len(), 101);
    assert_manifest_complete(&out);
}

#[test]
fn resolvent_report_has_the_verification_fields() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("r");
    let cfg = format!("{HEAT}\n[resolvent]\ncheck = \"product\"\nn_paths = 2000\ngrid_points = 9\ngrid_paths = 300\nbias_tol = 1e-3\n");
    let (code, err) = rbsde("verify-resolvent", &cfg, &out, &[]);
    assert_eq!(code, 0, "{err}");
    let r = &json(out.join("report.json"))["result"];
    for key in ["lemma", "k", "spec", "lhs", "rhs", "se_lhs", "se_rhs", "pass"] {
        assert!(!r[key].is_null(), "{key} missing in {r}");
    }
    assert_eq!(r["k"], 2);
}

#[test]
fn seed_flag_overrides_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    assert_eq!(rbsde("simulate", HEAT, &a, &[]).0, 0);
    assert_eq!(rbsde("simulate", HEAT, &b, &["--seed", "1"]).0, 0);
    assert_eq!(rbsde("simulate", HEAT, &c, &["--seed", "2"]).0, 0);
    let read = |d: &Path| fs::read(d.join("report.json")).unwrap();
    assert_eq!(read(&a), read(&b));
    assert_ne!(read(&a), read(&c));
}
