use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

use tempfile::TempDir;

fn tttlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tttlab")).args(args).output().expect("spawn tttlab")
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p.to_str().unwrap().to_string()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap()
}

const MINIMAL: &str = "# smoke\nn = 64\nd = 64\nk = 64\ntrials = 100\n";

#[test]
fn golden_csv_header() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "min.cfg", MINIMAL);
    let out = dir.path().join("out.csv");
    let o = tttlab(&["simulate", &cfg, "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = read(&out);
    assert_eq!(
        text.lines().next().unwrap(),
        "sweep_var,value,loss_theory,loss_mc_mean,loss_mc_stderr,init,n,d,k,sigma,seed"
    );
}

#[test]
fn minimal_config_gives_one_fast_record() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "min.cfg", MINIMAL);
    let start = Instant::now();
    let o = tttlab(&["simulate", &cfg]);
    assert!(start.elapsed() < Duration::from_secs(5));
    assert!(o.status.success());
    let text = String::from_utf8(o.stdout).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 1);
    let fields: Vec<&str> = rows[0].split(',').collect();
    assert_eq!(&fields[5..9], &["pretrained", "64", "64", "64"]);
    assert_eq!(fields[10], "0");
    assert!(!fields[2].is_empty());
}

#[test]
fn same_seed_same_bytes_any_thread_count() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "min.cfg", "n = 20\nd = 30\nk = 0, 10, 40\ntrials = 300\nbase_seed = 11\nsigma = 0.2\ninit = zero\neta_policy = theory_zero\n");
    let mut outputs = Vec::new();
    for threads in ["1", "1", "4"] {
        let o = tttlab(&["simulate", &cfg, "--threads", threads]);
        assert!(o.status.success());
        outputs.push(o.stdout);
    }
    assert_eq!(outputs[0], outputs[1]);
    assert_eq!(outputs[0], outputs[2]);
}

#[test]
fn noisy_theory_iso_is_regime_mismatch() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "noisy.cfg", "n = 8\nd = 4\nk = 4\nsigma = 0.5\neta_policy = theory_iso\n");
    let o = tttlab(&["simulate", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&o.stderr).contains("noiseless"));
    assert_eq!(tttlab(&["theory", &cfg]).status.code(), Some(3));
}

#[test]
fn parse_errors_exit_one_with_location() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "bad.cfg", "n = 8\nd = four\nk = 4\n");
    let o = tttlab(&["simulate", &cfg]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("line 2") && err.contains("`d`"), "{err}");
    assert_eq!(tttlab(&["figure", "fig9"]).status.code(), Some(1));
    assert_eq!(tttlab(&["simulate"]).status.code(), Some(1));
    assert_eq!(tttlab(&["figure", "fig1b", "--scale", "1.5"]).status.code(), Some(1));
}

#[test]
fn unwritable_output_is_an_error() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "min.cfg", "n = 8\nd = 4\nk = 4\ntrials = 10\n");
    let bad = dir.path().join("missing").join("out.csv");
    assert_eq!(tttlab(&["simulate", &cfg, "--out", bad.to_str().unwrap()]).status.code(), Some(1));
}

#[test]
fn theory_json_report() {
    let dir = TempDir::new().unwrap();
    let cfg = write(&dir, "z.cfg", "n = 10\nd = 3\nk = 0, 5\ninit = zero\neta_policy = theory_zero\n");
    let o = tttlab(&["theory", &cfg, "--format", "json"]);
    assert!(o.status.success());
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v[0]["regime"], "zero_init");
    assert_eq!(v[0]["predicted_improvement"], 0.0);
    assert_eq!(v[0]["predicted_final_loss"], 3.0);
}

#[test]
fn figure_rows_echo_scaled_dimensions() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("f.json");
    let o = tttlab(&["figure", "fig1b", "--scale", "0.05", "--trials", "20", "--seed", "3", "--format", "json", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    let rows = v.as_array().unwrap();
    assert_eq!(rows.len(), 42);
    for r in rows {
        assert_eq!(r["n"], 10);
        assert_eq!(r["d"], 20);
        assert_eq!(r["seed"], 3);
        assert_eq!(r["sweep_var"], "gamma");
    }
    assert_eq!(rows[20]["k"], 40);
}

#[test]
fn verify_and_gradcheck_exit_codes() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("v.json");
    let o = tttlab(&["verify", "shift", "--seed", "1", "--out", out.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("PASS [shift]"));
    let v: serde_json::Value = serde_json::from_str(&read(&out)).unwrap();
    assert_eq!(v["passed"], true);
    assert_eq!(tttlab(&["gradcheck", "--d", "3", "--n", "2", "--k", "2"]).status.code(), Some(0));
    // Steps outside [1e-8, 1e-3] are a usage error.
    assert_eq!(tttlab(&["gradcheck", "--epsilon", "0.5"]).status.code(), Some(1));
    assert_eq!(tttlab(&["verify", "nope"]).status.code(), Some(1));
}
