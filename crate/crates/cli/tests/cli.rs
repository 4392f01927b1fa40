use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const MANUFACTURED: &str = r#"
[model]
family = "shifted"
q = 2.0

[domain]
n_nodes = 256

[simulate]
n_paths = 16
horizon = 20.0
seed = 11
"#;

fn write(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn mfgc(cmd: &str, config: &Path, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfgc"))
        .arg(cmd)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(extra)
        .env_remove("MFGC_OUT_DIR")
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn manifest(dir: &Path) -> toml::Table {
    fs::read_to_string(dir.join("manifest.toml")).unwrap().parse().unwrap()
}

fn result<'a>(m: &'a toml::Table, key: &str) -> &'a toml::Value {
    &m["results"][key]
}

#[test]
fn solve_manufactured_records_one_outer_iteration() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", MANUFACTURED);
    let out = tmp.path().join("out");
    let o = mfgc("solve", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert_eq!(result(&m, "outer_iterations").as_integer(), Some(1));
    let rho = result(&m, "rho").as_float().unwrap();
    assert!((rho - std::f64::consts::PI.powi(2)).abs() < 1e-3);
    for f in ["solution.csv", "density.csv", "measure.csv", "outer.csv", "homotopy.csv", "u.svg", "m.svg", "homotopy.svg"] {
        assert!(out.join(f).exists(), "missing {f}");
    }
    let sol = fs::read_to_string(out.join("solution.csv")).unwrap();
    let mut lines = sol.lines();
    assert!(lines.next().unwrap().starts_with('#'));
    assert_eq!(lines.next().unwrap(), "x,d,u,grad_u");
}

#[test]
fn rejects_exponent_outside_range() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &MANUFACTURED.replace("q = 2.0", "q = 3.0"));
    let o = mfgc("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("(1, 2]"), "{}", stderr(&o));
}

#[test]
fn rejects_unknown_keys() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &MANUFACTURED.replace("n_nodes = 256", "n_nodes = 256\nnodes = 3"));
    let o = mfgc("solve", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("unknown field"));
}

#[test]
fn coupled_fixture_converges_below_tolerances() {
    let tmp = tempfile::tempdir().unwrap();
    let body = MANUFACTURED
        .replace("q = 2.0", "q = 2.0\nphi = { kind = \"linear\", coeff = 0.2 }")
        .replace("n_nodes = 256", "n_nodes = 512");
    let cfg = write(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("out");
    let o = mfgc("solve", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    assert!(result(&m, "flux_residual").as_float().unwrap() <= 1e-6);
    assert!(result(&m, "hjb_residual").as_float().unwrap() <= 1e-8);
    assert!(result(&m, "mean_control").as_float().unwrap().abs() <= 1e-4);
    assert_eq!(result(&m, "moment_bound_holds").as_bool(), Some(true));
}

#[test]
fn manifest_reruns_bitwise_identically() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", MANUFACTURED);
    let first = tmp.path().join("first");
    assert_eq!(code(&mfgc("simulate", &cfg, &first, &[])), 0);
    let second = tmp.path().join("second");
    let o = mfgc("simulate", &first.join("manifest.toml"), &second, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    for f in ["solution.csv", "density.csv", "measure.csv", "paths.csv", "occupation.csv", "rho_comparison.csv"] {
        assert_eq!(fs::read(first.join(f)).unwrap(), fs::read(second.join(f)).unwrap(), "{f} differs");
    }
    assert_eq!(
        fs::read_to_string(first.join("manifest.toml")).unwrap(),
        fs::read_to_string(second.join("manifest.toml")).unwrap()
    );
}

#[test]
fn verify_manufactured_passes_and_reports_omega_case() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &MANUFACTURED.replace("n_nodes = 256", "n_nodes = 512"));
    let out = tmp.path().join("out");
    let o = mfgc("verify", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let report = fs::read_to_string(out.join("verify_report.csv")).unwrap();
    assert!(report.lines().skip(2).all(|l| l.split(',').nth(1) == Some("true")), "{report}");
    let asym = fs::read_to_string(out.join("asymptotics.csv")).unwrap();
    assert!(asym.lines().any(|l| l.starts_with('#') && l.contains("q = 2: linear: omega(d) = d")));
}

#[test]
fn verify_names_failed_certification() {
    let tmp = tempfile::tempdir().unwrap();
    let body = MANUFACTURED.replace("q = 2.0", "q = 2.0\nphi = { kind = \"linear\", coeff = -0.5 }");
    let cfg = write(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("out");
    let o = mfgc("verify", &cfg, &out, &[]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("coupling_monotonicity"));
    let m = manifest(&out);
    let failed = result(&m, "failed_checks").as_array().unwrap();
    assert!(failed.iter().any(|v| v.as_str() == Some("certification/coupling_monotonicity")));
}

#[test]
fn simulate_matches_pde_constant() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", MANUFACTURED);
    for seed in [11, 12] {
        let out = tmp.path().join(format!("s{seed}"));
        let c = write(tmp.path(), "s.toml", &fs::read_to_string(&cfg).unwrap().replace("seed = 11", &format!("seed = {seed}")));
        let o = mfgc("simulate", &c, &out, &[]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let m = manifest(&out);
        assert_eq!(result(&m, "exits").as_integer(), Some(0));
        assert_eq!(result(&m, "within_three_stderr").as_bool(), Some(true));
    }
}

#[test]
fn simulate_refuses_single_path() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", &MANUFACTURED.replace("n_paths = 16", "n_paths = 1"));
    let o = mfgc("simulate", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least 2"));
}

#[test]
fn refinement_sweep_order() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{MANUFACTURED}\n[sweep]\naxis = \"n_nodes\"\nvalues = [128, 256, 512]\n");
    let cfg = write(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("out");
    let o = mfgc("sweep", &cfg, &out, &["--workers", "3"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let m = manifest(&out);
    let order = result(&m, "rho_orders").as_array().unwrap()[0].as_float().unwrap();
    assert!(order >= 1.5, "order {order}");
    for k in 0..3 {
        assert!(out.join(format!("point_{k:03}/manifest.toml")).exists());
    }
}

#[test]
fn q_sweep_recovers_boundary_exponents() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!(
        "{}\n[solver.hjb]\nsingular_subtraction = false\n[sweep]\naxis = \"q\"\nvalues = [1.25, 1.5, 1.75, 2.0]\n",
        MANUFACTURED.replace("n_nodes = 256", "n_nodes = 512")
    );
    let cfg = write(tmp.path(), "c.toml", &body);
    let out = tmp.path().join("out");
    let o = mfgc("sweep", &cfg, &out, &[]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("sweep.csv")).unwrap();
    let expected = [-3.0, -1.0, -1.0 / 3.0, 0.0];
    let rows: Vec<&str> = csv.lines().filter(|l| !l.starts_with('#')).skip(1).collect();
    assert_eq!(rows.len(), 4);
    for (row, e) in rows.iter().zip(expected) {
        let cols: Vec<&str> = row.split(',').collect();
        let fitted: f64 = cols[6].parse().unwrap();
        assert!((fitted - e).abs() <= 0.05, "{row}");
    }
}

#[test]
fn empty_sweep_is_a_config_error() {
    let tmp = tempfile::tempdir().unwrap();
    let body = format!("{MANUFACTURED}\n[sweep]\naxis = \"q\"\nvalues = []\n");
    let cfg = write(tmp.path(), "c.toml", &body);
    let o = mfgc("sweep", &cfg, &tmp.path().join("out"), &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn output_directory_from_environment() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write(tmp.path(), "c.toml", MANUFACTURED);
    let target = tmp.path().join("env_out");
    let o = Command::new(env!("CARGO_BIN_EXE_mfgc"))
        .args(["solve", "--config"])
        .arg(&cfg)
        .env("MFGC_OUT_DIR", &target)
        .output()
        .unwrap();
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(target.join("manifest.toml").exists());
}
