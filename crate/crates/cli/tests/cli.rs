use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use signlab::harness::config::RunConfig;
use signlab::optim::OptimizerSpec;

const SMALL: &str = r#"d = 400
n = 4
s = 16
sigma_p = 0.5
orthogonal = true
sigma_0 = 0.005
m_v = 4
m_k = 8
iters = 40
seed = 2

[optimizer]
kind = "signgd"
eta = 1e-4

[probe]
test_every = 20
n_test = 50
"#;

fn signlab(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_signlab")).args(args).current_dir(cwd).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn setup() -> tempfile::TempDir {
    let tmp = tempfile::tempdir().unwrap();
    fs::write(tmp.path().join("small.toml"), SMALL).unwrap();
    tmp
}

#[test]
fn generate_reports_disjointness() {
    let tmp = setup();
    let out = signlab(&["generate", "small.toml", "--out", "ds.jsonl"], tmp.path());
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("n: 4"));
    assert!(stdout.contains("supports disjoint: "));
    assert!(tmp.path().join("ds.jsonl").exists());
}

#[test]
fn missing_field_exits_2_and_names_it() {
    let tmp = setup();
    fs::write(tmp.path().join("bad.toml"), SMALL.replace("s = 16\n", "")).unwrap();
    let out = signlab(&["generate", "bad.toml", "--out", "ds.jsonl"], tmp.path());
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("`s`"));
}

#[test]
fn unwritable_output_exits_3() {
    let tmp = setup();
    fs::write(tmp.path().join("plain"), "").unwrap();
    let out = signlab(&["generate", "small.toml", "--out", "plain/ds.jsonl"], tmp.path());
    assert_eq!(code(&out), 3);
}

#[test]
fn high_snr_train_exits_5() {
    let tmp = setup();
    fs::write(tmp.path().join("clean.toml"), SMALL.replace("sigma_p = 0.5", "sigma_p = 0.01")).unwrap();
    let out = signlab(&["train", "clean.toml", "--out", "run"], tmp.path());
    assert_eq!(code(&out), 5);
}

#[test]
fn train_verify_report_round() {
    let tmp = setup();
    let dir = tmp.path();
    let out = signlab(&["--quiet", "train", "small.toml", "--out", "run", "--probe-cadence", "10:5", "--zoom", "10"], dir);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(out.stdout.is_empty());
    for f in ["trace.jsonl", "params.ckpt", "config.toml", "loss.csv"] {
        assert!(dir.join("run").join(f).exists(), "{f}");
    }

    // 40 iterations stop before the later stages can be judged.
    let out = signlab(&["verify", "run/trace.jsonl", "--report", "rep/verify"], dir);
    assert_eq!(code(&out), 6);
    let json: serde_json::Value = serde_json::from_slice(&fs::read(dir.join("rep/verify.json")).unwrap()).unwrap();
    assert_eq!(json["overall"], "inconclusive");
    assert!(dir.join("rep/verify.txt").exists());

    let out = signlab(&["report", "run/trace.jsonl", "--format", "md"], dir);
    assert_eq!(code(&out), 0);
    let md = String::from_utf8(out.stdout).unwrap();
    assert!(md.contains("| Stage I |") && md.contains("| Stage IV |"));
    assert!(md.contains("| Column sum |"));
    assert!(md.contains("| 32 |"), "grand total m_k n = 32\n{md}");

    let out = signlab(&["report", "run/trace.jsonl", "--format", "csv", "--out", "tables"], dir);
    assert_eq!(code(&out), 0);
    let table = fs::read_to_string(dir.join("tables/sign_table.csv")).unwrap();
    assert_eq!(table.lines().next(), Some("init_class,K+Q+,K+Q-,K-Q+,K-Q-,row_sum"));
    assert!(table.lines().last().unwrap().ends_with(",32"));
    let loss = fs::read_to_string(dir.join("tables/loss.csv")).unwrap();
    assert_eq!(loss.lines().next(), Some("t,train_loss,test_loss"));
    assert!(dir.join("tables/timeline.csv").exists());
}

#[test]
fn seed_flag_overrides_config() {
    let tmp = setup();
    let dir = tmp.path();
    assert_eq!(code(&signlab(&["--seed", "9", "train", "small.toml", "--out", "a", "--iters", "3"], dir)), 0);
    let config = fs::read_to_string(dir.join("a/config.toml")).unwrap();
    assert!(config.contains("seed = 9"));
}

#[test]
fn adam_flags_and_gd_gating() {
    let tmp = setup();
    let dir = tmp.path();
    let out = signlab(
        &["train", "small.toml", "--out", "adam", "--optimizer", "adam", "--beta1", "0.9", "--beta2", "0.999", "--eps", "1e-15", "--iters", "5"],
        dir,
    );
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let config = RunConfig::load(&dir.join("adam/config.toml")).unwrap();
    assert_eq!(config.optimizer, OptimizerSpec::adam(1e-4, 0.9, 0.999, 1e-15));

    assert_eq!(code(&signlab(&["train", "small.toml", "--out", "gd", "--optimizer", "gd"], dir)), 0);
    let out = signlab(&["verify", "gd/trace.jsonl"], dir);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("overall: not applicable"));
    assert!(text.contains("convergence (informational)"));
}

#[test]
fn truncated_trace_exits_6() {
    let tmp = setup();
    let dir = tmp.path();
    assert_eq!(code(&signlab(&["train", "small.toml", "--out", "run"], dir)), 0);
    let text = fs::read_to_string(dir.join("run/trace.jsonl")).unwrap();
    fs::write(dir.join("cut.jsonl"), &text[..text.len() * 2 / 3]).unwrap();
    let out = signlab(&["verify", "cut.jsonl"], dir);
    assert_eq!(code(&out), 6);
    assert!(String::from_utf8_lossy(&out.stderr).contains("inconclusive"));
}

#[test]
fn empty_sweep_writes_header_only() {
    let tmp = setup();
    let dir = tmp.path();
    fs::write(dir.join("sweep.toml"), "base = \"small.toml\"\n[grid]\n").unwrap();
    let out = signlab(&["sweep", "sweep.toml", "--out", "sw", "--jobs", "2"], dir);
    assert_eq!(code(&out), 0);
    let summary = fs::read_to_string(dir.join("sw/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 1);
    assert!(summary.starts_with("run,seed,params,status,"));

    let out = signlab(&["report", "sw/summary.csv", "--format", "md"], dir);
    assert_eq!(code(&out), 0);
    assert!(String::from_utf8(out.stdout).unwrap().contains("| run | seed | params |"));
}

#[test]
fn sweep_with_a_failing_run_exits_nonzero() {
    let tmp = setup();
    let dir = tmp.path();
    let sweep = "base = \"small.toml\"\n[grid]\niters = [3]\nsigma_p = [0.5, 0.01]\n";
    fs::write(dir.join("sweep.toml"), sweep).unwrap();
    let out = signlab(&["sweep", "sweep.toml", "--out", "sw", "--jobs", "2"], dir);
    assert_eq!(code(&out), 1);
    let summary = fs::read_to_string(dir.join("sw/summary.csv")).unwrap();
    let rows: Vec<&str> = summary.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].contains(",ok,"));
    assert!(rows[1].contains(",error,"));
}
