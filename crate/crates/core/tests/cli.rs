use std::path::Path;
use std::process::{Command, Output};

fn psdbp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_psdbp"))
        .args(args)
        .env("RAYON_NUM_THREADS", "1")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = psdbp(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn csv_rows(text: &str) -> Vec<Vec<f64>> {
    text.lines()
        .skip(1)
        .map(|l| l.split(',').map(|x| x.parse().unwrap()).collect())
        .collect()
}

const SIM: &[&str] = &[
    "simulate", "--family", "bh", "--K", "100", "--v", "0.6", "--base", "binary", "--N", "2", "--n", "25", "--reps",
    "3", "--seed", "7", "--survive",
];

#[test]
fn simulate_is_deterministic() {
    let a = ok(SIM);
    let b = ok(SIM);
    assert_eq!(a, b);
    let rows = csv_rows(&a);
    assert_eq!(rows.len(), 3 * 26);
    for rep in 0..3 {
        let path: Vec<&Vec<f64>> = rows.iter().filter(|r| r[0] == rep as f64).collect();
        assert_eq!(path[0][2], 2.0);
        assert!(path[25][2] > 0.0);
    }
    let mut other = SIM.to_vec();
    other[16] = "8";
    assert_ne!(ok(&other), a);
}

#[test]
fn simulate_writes_to_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.csv");
    let mut args = SIM.to_vec();
    args.extend(["--out", path.to_str().unwrap()]);
    assert_eq!(ok(&args), "");
    assert_eq!(std::fs::read_to_string(&path).unwrap(), ok(SIM));
}

#[test]
fn dump_mup_ricker_exceeds_one_at_k() {
    let text = ok(&[
        "dump-mup", "--family", "ricker", "--K", "40", "--mu", "2", "--base", "geometric", "--zmax", "320",
    ]);
    assert!(text.starts_with("z,m,m_up,sigma2_up,uv\n"));
    let rows = csv_rows(&text);
    assert_eq!(rows.len(), 320);
    let at_k = &rows[39];
    assert_eq!(at_k[0], 40.0);
    assert!((at_k[1] - 1.0).abs() < 1e-12);
    assert!(at_k[2] > 1.0, "m_up(K) = {}", at_k[2]);
    let uv: f64 = rows.iter().map(|r| r[4]).sum();
    assert!((uv - 1.0).abs() < 1e-10);
}

#[test]
fn estimate_converges_on_simulated_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let traj = dir.path().join("traj.csv");
    ok(&[
        "simulate", "--K", "50", "--v", "0.7", "--N", "2", "--n", "2000", "--seed", "11", "--survive", "--out",
        traj.to_str().unwrap(),
    ]);
    let run = || ok(&["estimate", "--input", traj.to_str().unwrap(), "--family", "bh", "--weights", "w2", "--target", "qprocess"]);
    let text = run();
    assert_eq!(text, run());
    let report: serde_json::Value = serde_json::from_str(&text).unwrap();
    let result = &report["result"];
    assert_eq!(result["converged"], true);
    let k = result["theta_hat"][0].as_f64().unwrap();
    let v = result["theta_hat"][1].as_f64().unwrap();
    assert!((k - 50.0).abs() < 3.0, "K = {k}");
    assert!((v - 0.7).abs() < 0.05, "v = {v}");
    let digest = psdbp::io::sha256_hex(&std::fs::read(&traj).unwrap());
    assert_eq!(report["inputs_sha256"], digest.as_str());
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(psdbp(&["bogus"]).status.code(), Some(2));
    assert_eq!(psdbp(&["simulate", "--K", "50", "--wat"]).status.code(), Some(2));
}

#[test]
fn domain_errors_exit_one_with_json() {
    let out = psdbp(&["simulate", "--K=-1", "--v", "0.7", "--N", "2", "--n", "3", "--seed", "1"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string());
    assert!(err["message"].is_string());

    let out = psdbp(&["estimate", "--input", "/nonexistent/traj.csv"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn asymptotics_reports_intervals_and_ellipse() {
    let dir = tempfile::tempdir().unwrap();
    let ell = dir.path().join("ellipse.csv");
    let text = ok(&[
        "asymptotics", "--K", "50", "--v", "0.7", "--n", "2000", "--ellipse", ell.to_str().unwrap(), "--points", "16",
    ]);
    let out: serde_json::Value = serde_json::from_str(&text).unwrap();
    let ci = out["intervals"][0].as_array().unwrap();
    let (lo, hi) = (ci[0].as_f64().unwrap(), ci[1].as_f64().unwrap());
    assert!(lo < 50.0 && 50.0 < hi);
    let beta = &out["covariance"]["beta"];
    assert_eq!(beta[0][1], beta[1][0]);
    assert_eq!(std::fs::read_to_string(&ell).unwrap().lines().count(), 17);
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("study.toml");
    let text = format!(
        r#"kind = "growing"
theta0 = [100.0, 0.6]
horizons = [10, 15]
replications = 4
seed = 5
estimators = ["w2/raw", "w1/raw"]
output_dir = "{}"

[model]
family = "bh"
base = {{ kind = "binary" }}
"#,
        dir.join("out").display()
    );
    std::fs::write(&path, text).unwrap();
    path
}

#[test]
fn experiment_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(dir.path());
    let a = ok(&["experiment", "--config", config.to_str().unwrap()]);
    let est_a = std::fs::read(dir.path().join("out/estimates.csv")).unwrap();
    let b = ok(&["experiment", "--config", config.to_str().unwrap()]);
    let est_b = std::fs::read(dir.path().join("out/estimates.csv")).unwrap();
    assert_eq!(a, b);
    assert_eq!(est_a, est_b);
    assert!(a.lines().count() > 1);
    let c = ok(&["experiment", "--config", config.to_str().unwrap(), "--seed", "6"]);
    assert_ne!(a, c);
}

#[test]
fn fit_census_on_constant_series() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("census.csv");
    let mut text = String::from("year,count\n");
    for year in 1980..1990 {
        text.push_str(&format!("{year},30\n"));
    }
    std::fs::write(&path, text).unwrap();
    let out: serde_json::Value = serde_json::from_str(&ok(&["fit-census", "--input", path.to_str().unwrap()])).unwrap();
    let row = &out["table"][0];
    assert_eq!(row["z"], 30);
    assert_eq!(row["m_hat"], 1.0);
    assert!((row["m_up"].as_f64().unwrap() - 1.0).abs() < 1e-6);
}
