use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
# small enough to run every stage in seconds
data.count = 20
data.split = 0.3, 0.2, 0.2, 0.1, 0.2
suite.depths = 1, 1, 1
suite.channels = 2, 3, 4
pretrain.epochs = 1
pretrain.small_epochs = 1
pretrain.batch_size = 4
pretrain.small_batch_size = 4
mc.samples = 2
policy.channels = 4
rl.epochs = 2
rl.batch_size = 4
finetune.epochs = 1
tvd.max_epochs = 2
idk.grid_points = 3
";

fn paser(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_paser")).args(args).output().expect("binary runs")
}

fn stage(cmd: &str, cfg: &Path, out: &Path, extra: &[&str]) -> Output {
    let mut args = vec![cmd, "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    paser(&args)
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn setup() -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    (dir, cfg)
}

#[test]
fn gen_data_prints_split_sizes() {
    let (dir, cfg) = setup();
    let out = ok(stage("gen-data", &cfg, &dir.path().join("run"), &["--seed", "3"]));
    assert!(out.contains("pretrain: 6"));
    assert!(out.contains("test: 4"));
    assert!(dir.path().join("run/data/test.paserds").exists());
    let saved = std::fs::read_to_string(dir.path().join("run/config.txt")).unwrap();
    assert!(saved.contains("seed = 3"));
}

#[test]
fn train_rl_without_pretraining_names_the_missing_stage() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    ok(stage("gen-data", &cfg, &run, &[]));
    let o = stage("train-rl", &cfg, &run, &[]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}

#[test]
fn unknown_method_and_bad_override_are_rejected() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    let o = stage("eval", &cfg, &run, &["--method", "oracle"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("unknown method"));
    let o = stage("gen-data", &cfg, &run, &["--override", "mc.samples=1"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("mc.samples"));
    let o = stage("gen-data", &cfg, &run, &["--override", "rl.nonsense=1"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("rl.nonsense"));
}

#[test]
fn full_run_reports_and_summarizes() {
    let (dir, cfg) = setup();
    let run = dir.path().join("run");
    for cmd in ["gen-data", "pretrain", "train-rl"] {
        ok(stage(cmd, &cfg, &run, &[]));
    }
    let paser_line = ok(stage("eval", &cfg, &run, &["--method", "paser"]));
    assert!(paser_line.starts_with("paser: IoU"));
    let flops =
        |line: &str| -> f64 { line.split("flops ").nth(1).unwrap().split(',').next().unwrap().parse().unwrap() };
    let two = ok(stage("eval", &cfg, &run, &["--method", "random"]));
    let o = stage("eval", &cfg, &run, &["--method", "random", "--override", "mc.samples=3"]);
    assert!(String::from_utf8_lossy(&o.stderr).contains("warning"));
    assert!(flops(&ok(o)) > flops(&two));
    ok(stage("eval", &cfg, &run, &["--method", "random"]));
    let table = ok(paser(&["report", run.to_str().unwrap(), "--out", dir.path().join("summary").to_str().unwrap()]));
    assert_eq!(table.lines().filter(|l| l.contains("| paser |")).count(), 1);
    assert!(dir.path().join("summary/lambda_sweep.csv").exists());
}

#[test]
fn float_mode_is_validated() {
    let (dir, cfg) = setup();
    let o = Command::new(env!("CARGO_BIN_EXE_paser"))
        .args(["gen-data", "--config", cfg.to_str().unwrap(), "--out", dir.path().join("run").to_str().unwrap()])
        .env("PASER_FLOAT_MODE", "f16")
        .output()
        .unwrap();
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("PASER_FLOAT_MODE"));
}

#[test]
fn report_on_missing_run_names_the_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    let o = paser(&["report", missing.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
}

#[test]
fn shipped_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for e in std::fs::read_dir(&dir).unwrap() {
        let path = e.unwrap().path();
        paser_core::pipeline::ExperimentConfig::load(&path).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        n += 1;
    }
    assert!(n >= 2);
}
