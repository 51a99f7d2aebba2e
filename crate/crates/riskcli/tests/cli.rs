use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SWEEP: &str = r#"
experiment = "cluster_sweep"
seed = 3
n = 8
p = 16

[mc]
n_x = 30
n_eps = 5

[cluster]
sizes = [3, 5]
rho = [0.05, 0.05]
sigma2_1 = [0.5, 1.0]
sigma2_2 = [0.5, 1.5]
"#;

fn riskcli(args: &[&str], threads: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_riskcli"));
    cmd.args(args).env_remove("RISKCLI_THREADS");
    if let Some(t) = threads {
        cmd.env("RISKCLI_THREADS", t);
    }
    cmd.output().expect("binary runs")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    fs::write(&path, text).unwrap();
    path.display().to_string()
}

fn data(stdout: &[u8]) -> Vec<String> {
    String::from_utf8_lossy(stdout)
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(str::to_string)
        .collect()
}

#[test]
fn sweep_to_stdout_is_thread_independent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SWEEP);
    let one = riskcli(&["cluster_sweep", "--config", &cfg], Some("1"));
    let four = riskcli(&["cluster_sweep", "--config", &cfg, "--threads", "4"], None);
    assert!(one.status.success(), "{}", String::from_utf8_lossy(&one.stderr));
    assert!(four.status.success());
    let rows = data(&one.stdout);
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("sigma2_1,sigma2_2,rho_1,rho_2,trace_over_n,"));
    assert_eq!(rows, data(&four.stdout));
    let text = String::from_utf8_lossy(&one.stdout).into_owned();
    assert!(text.starts_with("# riskcli "));
    assert!(text.contains("# config:\n"));
    assert!(text.contains("# resampled designs: 0\n"));
}

#[test]
fn thread_env_is_validated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.toml", SWEEP);
    let out = riskcli(&["cluster_sweep", "--config", &cfg], Some("0"));
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--threads must be positive"));
}

#[test]
fn verify_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "v.toml",
        "seed = 9\nn = 10\n\n[verify]\ninstances = 20\nrotations = 400\n",
    );
    let ok = riskcli(&["verify", "--config", &cfg], None);
    assert_eq!(ok.status.code(), Some(0), "{}", String::from_utf8_lossy(&ok.stderr));
    let report: serde_json::Value = serde_json::from_slice(&ok.stdout).unwrap();
    assert_eq!(report["seed"], 9);
    assert_eq!(report["passed"], true);

    let bad = riskcli(&["verify", "--config", &cfg, "--fault", "plain-qr"], None);
    assert_eq!(bad.status.code(), Some(1));
    let report: serde_json::Value = serde_json::from_slice(&bad.stdout).unwrap();
    assert_eq!(report["passed"], false);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("FAILED haar_"));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", &SWEEP.replace("p = 16", "p = 4"));
    let out = riskcli(&["cluster_sweep", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5: p: must exceed n = 8"));

    let out = riskcli(&["fig9", "--config", &cfg], None);
    assert_eq!(out.status.code(), Some(2));
    let out = riskcli(&["cluster_sweep", "--config", "/nonexistent/riskcli.toml"], None);
    assert_eq!(out.status.code(), Some(2));
}
