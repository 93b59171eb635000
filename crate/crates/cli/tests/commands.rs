use std::path::Path;
use std::process::{Command, Output};

fn cfasl(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cfasl")).args(args).arg("--log-level=warn").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

const SMALL: &[&str] = &["--steps", "2", "--batch-size", "8", "--codebook", "3,2,3", "--checkpoint-every", "1"];

fn train_small(dir: &Path, extra: &[&str]) -> Output {
    let data = dir.join("data");
    if !data.exists() {
        let out = cfasl(&["gen-data", "--out", data.to_str().unwrap(), "--positions-x", "4", "--positions-y", "4", "--scales", "2"]);
        assert_eq!(code(&out), 0, "{}", stderr(&out));
    }
    let run = dir.join("run");
    let mut args = vec!["train", "--dataset-dir", data.to_str().unwrap(), "--output-dir", run.to_str().unwrap()];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    cfasl(&args)
}

#[test]
fn train_writes_log_checkpoints_and_snapshot() {
    let dir = tempfile::tempdir().unwrap();
    let out = train_small(dir.path(), &["--ablation", "s=false"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let run = dir.path().join("run");
    let log = std::fs::read_to_string(run.join("losses.csv")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let header: Vec<&str> = log.lines().next().unwrap().split(',').collect();
    let column = header.iter().position(|&h| h == "sparsity").unwrap();
    let row: Vec<&str> = log.lines().nth(1).unwrap().split(',').collect();
    assert_eq!(row[column], "", "disabled terms are left empty");
    assert!(row[column - 1].parse::<f64>().is_ok());
    for step in [1, 2] {
        assert!(run.join(format!("checkpoint-{step}/params.safetensors")).exists());
    }
    let snapshot = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(snapshot.contains("steps = 2"));
}

#[test]
fn identical_runs_log_identical_losses() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    for d in [&a, &b] {
        assert_eq!(code(&train_small(d.path(), &[])), 0);
    }
    let read = |d: &tempfile::TempDir| std::fs::read_to_string(d.path().join("run/losses.csv")).unwrap();
    assert_eq!(read(&a), read(&b));
}

#[test]
fn resume_continues_the_log() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path(), &[])), 0);
    let ckpt = dir.path().join("run/checkpoint-2");
    let out = cfasl(&["train", "--resume", ckpt.to_str().unwrap(), "--steps", "3"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    let log = std::fs::read_to_string(dir.path().join("run/losses.csv")).unwrap();
    assert!(log.lines().last().unwrap().starts_with("3,"));
}

#[test]
fn invalid_train_settings_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path(), &["--batch-size", "7"])), 2);
    assert_eq!(code(&train_small(dir.path(), &["--ablation", "nonsense=false"])), 2);
    assert_eq!(code(&cfasl(&["train", "--bogus-flag"])), 2);
}

#[test]
fn missing_inputs_exit_with_four() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope");
    let out = cfasl(&["train", "--dataset-dir", missing.to_str().unwrap(), "--output-dir", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 4, "{}", stderr(&out));
    assert_eq!(code(&cfasl(&["eval", "--checkpoint", missing.to_str().unwrap()])), 4);
}

#[test]
fn eval_reports_and_validates_metrics() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path(), &[])), 0);
    let ckpt = dir.path().join("run/checkpoint-2");
    let ckpt = ckpt.to_str().unwrap();
    let out = cfasl(&["eval", "--checkpoint", ckpt, "--metric", "m_fvm", "--k", "2", "--trials", "20", "--prune-threshold", "0"]);
    assert_eq!(code(&out), 0, "{}", stderr(&out));
    assert!(stdout(&out).contains("m_fvm"));
    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(Path::new(ckpt).join("report.json")).unwrap()).unwrap();
    assert_eq!(report["k"], 2);
    assert_eq!(report["trials"], 20);
    assert_eq!(report["config"]["steps"], 2);

    let unknown = cfasl(&["eval", "--checkpoint", ckpt, "--metric", "mig"]);
    assert_eq!(code(&unknown), 2);
    assert!(stderr(&unknown).contains("fvm, m_fvm"));
    assert_eq!(code(&cfasl(&["eval", "--checkpoint", ckpt, "--metric", "fvm", "--k", "2"])), 2);
    assert_eq!(code(&cfasl(&["eval", "--checkpoint", ckpt, "--metric", "m_fvm"])), 2);
    assert_eq!(code(&cfasl(&["eval", "--checkpoint", ckpt, "--metric", "m_fvm", "--k", "3"])), 2);
}

#[test]
fn analyses_write_their_exports() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&train_small(dir.path(), &[])), 0);
    let ckpt = dir.path().join("run/checkpoint-2");
    let ckpt = ckpt.to_str().unwrap();
    let out_dir = dir.path().join("analysis");
    let out_dir = out_dir.to_str().unwrap();
    let run = |extra: &[&str]| {
        let mut args = vec!["analyze", "--checkpoint", ckpt, "--out-dir", out_dir];
        args.extend_from_slice(extra);
        cfasl(&args)
    };
    let scatter = run(&["scatter", "--fix", "0=1"]);
    assert_eq!(code(&scatter), 0, "{}", stderr(&scatter));
    let csv = std::fs::read_to_string(Path::new(out_dir).join("scatter.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 16);
    assert_eq!(code(&run(&["eigen", "--n", "32"])), 0);
    assert_eq!(code(&run(&["swap", "--source", "0", "--target", "5"])), 0);
    assert_eq!(code(&run(&["decompose", "--source", "0", "--target", "5"])), 0);
    let replay = run(&["replay", "--indices", "0,1"]);
    assert_eq!(code(&replay), 0);
    assert!(stdout(&replay).contains("1 replay frames"));
    for file in ["eigen.csv", "swap.png", "swap.json", "decompose.png", "replay.json"] {
        assert!(Path::new(out_dir).join(file).exists(), "{file}");
    }
    assert_eq!(code(&run(&["swap", "--source", "0"])), 2);
    assert_eq!(code(&run(&["replay", "--indices", "0"])), 2);
    assert_eq!(code(&run(&["swap", "--source", "0", "--target", "999"])), 2);
}

#[test]
fn gen_data_writes_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = cfasl(&["gen-data", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&out), 0);
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["num_images"], 256);
    assert_eq!(manifest["factor_names"], serde_json::json!(["scale", "position_x", "position_y"]));
    assert_eq!(code(&cfasl(&["gen-data", "--out", dir.path().to_str().unwrap(), "--image-size", "20"])), 2);
}
