//! End-to-end tests of the `tdpfed` binary.

use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_tdpfed"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "expected success for {args:?}: stderr = {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

const SMALL_CONFIG: &str = "\
[experiment]
seed = 11
strategy = afm
eval_cadence = 1

[data]
source = synthetic
classes = 4
dim = 8
n_per_class = 40
n_test_per_class = 8
separation = 5.0
classes_per_client = 2

[fl]
K = 4
S = 4
T = 4
tau = 2
batch_size = 10

[opt]
lambda = 8.0
beta = 1.0
eta = 0.005
eta_p = 0.05
s = 3
s_prime = 3

[model]
layer = linear 8 16 relu rank=4
layer = linear 16 4 softmax rank=2
";

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("exp.cfg");
    std::fs::write(&path, SMALL_CONFIG).unwrap();
    path
}

#[test]
fn run_writes_metrics_checkpoint_and_echo() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out_dir = dir.path().join("out");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()]);

    let metrics = std::fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    // Header plus T rows at cadence 1.
    assert_eq!(lines.len(), 5, "{metrics}");
    assert!(lines[0].starts_with("round,acc_personalized_mean"));
    assert!(out_dir.join("checkpoint.tdpf").exists());
    assert!(out_dir.join("config_resolved.cfg").exists());
}

#[test]
fn rerun_is_byte_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let mut outputs = Vec::new();
    for (name, threads) in [("a", "1"), ("b", "4"), ("c", "4")] {
        let out_dir = dir.path().join(name);
        let out = bin()
            .args(["run", "--config", cfg.to_str().unwrap(), "--out", out_dir.to_str().unwrap()])
            .env("TDPFED_THREADS", threads)
            .output()
            .unwrap();
        assert!(out.status.success());
        outputs.push(std::fs::read(out_dir.join("metrics.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1], "1 thread vs 4 threads");
    assert_eq!(outputs[1], outputs[2], "replay with 4 threads");
}

#[test]
fn invalid_lambda_exits_2_naming_key() {
    let dir = tempfile::tempdir().unwrap();
    let bad = format!("{SMALL_CONFIG}\nlambda = -1\n");
    // Appending after [model] would be an unknown key; build a proper bad config.
    let bad = bad.replace("lambda = 8.0", "lambda = 0");
    let bad = bad.replace("\nlambda = -1\n", "");
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, bad).unwrap();
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("[opt].lambda"), "{stderr}");
}

#[test]
fn unknown_key_exits_2_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, "[fl]\nK = 4\nwhat = 9\n").unwrap();
    let out = bin()
        .args(["run", "--config", path.to_str().unwrap(), "--out", dir.path().join("o").to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("line 3") && stderr.contains("what"), "{stderr}");
}

#[test]
fn config_echo_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path());
    let out1 = dir.path().join("o1");
    run_ok(&["run", "--config", cfg.to_str().unwrap(), "--out", out1.to_str().unwrap()]);
    let echo1 = out1.join("config_resolved.cfg");
    let out2 = dir.path().join("o2");
    run_ok(&["run", "--config", echo1.to_str().unwrap(), "--out", out2.to_str().unwrap()]);
    assert_eq!(
        std::fs::read(&echo1).unwrap(),
        std::fs::read(out2.join("config_resolved.cfg")).unwrap()
    );
    // And the runs themselves agree.
    assert_eq!(
        std::fs::read(out1.join("metrics.csv")).unwrap(),
        std::fs::read(out2.join("metrics.csv")).unwrap()
    );
}

#[test]
fn plan_ranks_reproduces_published_tables() {
    let out = run_ok(&["plan-ranks", "--model", "dnn", "--cr", "2.0"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ranks: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(ranks, vec!["44", "5"], "{text}");

    let out = run_ok(&["plan-ranks", "--model", "dnn", "--cr", "1.5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ranks: Vec<&str> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(3).unwrap())
        .collect();
    assert_eq!(ranks, vec!["59", "6"], "{text}");

    let out = run_ok(&["plan-ranks", "--model", "vgg8", "--cr", "1.5"]);
    let text = String::from_utf8(out.stdout).unwrap();
    let ranks: Vec<usize> = text
        .lines()
        .skip(1)
        .map(|l| l.split_whitespace().nth(3).unwrap().parse().unwrap())
        .collect();
    assert_eq!(ranks, vec![14, 120, 248, 504, 759, 85, 85, 6], "{text}");

    let out = bin().args(["plan-ranks", "--model", "lenet", "--cr", "2.0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn check_grad_passes_and_sign_flip_fails() {
    let out = run_ok(&["check-grad"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("factor_gradient N=2 R=1"));
    assert!(text.contains("backprop"));

    let out = run_ok(&["check-grad", "--modes", "2", "--rank", "1"]);
    assert!(String::from_utf8(out.stdout).unwrap().contains("ok"));

    let out = bin()
        .args(["check-grad", "--modes", "2", "--rank", "1"])
        .env("TDPFED_CHECKGRAD_SIGN_FLIP", "1")
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&out.stderr).contains("rel err"));
}

#[test]
fn export_import_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.tdpf");
    let again = dir.path().join("model2.tdpf");
    run_ok(&["export", "--model", "dnn", "--cr", "2.0", "--seed", "5", "--out", ckpt.to_str().unwrap()]);
    let out = run_ok(&["import", "--in", ckpt.to_str().unwrap(), "--reexport", again.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("rank 44"), "{text}");
    assert_eq!(std::fs::read(&ckpt).unwrap(), std::fs::read(&again).unwrap());

    // Corrupted magic.
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[0] = b'Z';
    std::fs::write(&ckpt, &bytes).unwrap();
    let out = bin().args(["import", "--in", ckpt.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("magic"));

    // Truncated file names expected vs actual length.
    bytes[0] = b'T';
    std::fs::write(&ckpt, &bytes[..bytes.len() - 3]).unwrap();
    let out = bin().args(["import", "--in", ckpt.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(4));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("expected") && stderr.contains("got"), "{stderr}");
}

#[test]
fn export_vgg8_round_trips_conv_layers() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("vgg.tdpf");
    run_ok(&["export", "--model", "vgg8", "--cr", "1.5", "--out", ckpt.to_str().unwrap()]);
    let out = run_ok(&["import", "--in", ckpt.to_str().unwrap()]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("conv 3x3x3x32 rank 14"), "{text}");
    assert!(text.contains("rank 759"), "{text}");
}
