//! End-to-end runs of the binary: the five subcommands chained on toy data,
//! the config-file precedence rules, and one test per exit code.

use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_bpvae"))
        .args(args)
        .output()
        .expect("binary should spawn")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn assert_code(out: &Output, code: i32, what: &str) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "{what}: stdout {:?} stderr {:?}",
        stdout_of(out),
        stderr_of(out)
    );
}

fn csv_rows(path: &Path, header: &str) -> Vec<String> {
    let text = std::fs::read_to_string(path).unwrap_or_else(|e| panic!("{path:?}: {e}"));
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(header), "{path:?} header");
    lines.map(str::to_string).collect()
}

const BASIC: &str = "synth:noise-texture,complexity=0.8,count=64,seed=1";
const SIMPLE: &str = "synth:blobs,complexity=0.1,count=64,seed=2";

#[test]
fn five_verbs_chain_on_toy_data() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("model.ckpt");
    let losses = dir.path().join("losses.csv");

    let out = run(&[
        "train",
        "--basic", BASIC,
        "--simple", SIMPLE,
        "--latent-dim", "4",
        "--channels", "4,6",
        "--epochs", "2",
        "--batch-size", "32",
        "--seed", "3",
        "--out", ckpt.to_str().unwrap(),
        "--loss-log", losses.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "train");
    assert!(stdout_of(&out).contains("epoch 1/2"), "progress lines by default");
    assert!(ckpt.exists());
    assert_eq!(csv_rows(&losses, "epoch,loss").len(), 2);

    let scores = dir.path().join("scores.csv");
    let metrics = dir.path().join("detect.csv");
    let out = run(&[
        "detect",
        "--model", ckpt.to_str().unwrap(),
        "--id", "synth:noise-texture,complexity=0.8,count=32,seed=11",
        "--ood", "synth:blobs,complexity=0.1,count=32,seed=12",
        "--score-seed", "7",
        "--scores", scores.to_str().unwrap(),
        "--metrics", metrics.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "detect");
    assert!(stdout_of(&out).contains("auroc"));
    assert_eq!(csv_rows(&scores, "score,label,dataset").len(), 64);
    let rows = csv_rows(&metrics, "metric,value");
    assert!(rows.iter().any(|r| r.starts_with("auroc,")), "{rows:?}");
    assert!(rows.iter().any(|r| r.starts_with("auprc,")), "{rows:?}");

    let quality = dir.path().join("quality.csv");
    let dumps = dir.path().join("pairs");
    let out = run(&[
        "reconstruct",
        "--model", ckpt.to_str().unwrap(),
        "--data", "synth:blobs,complexity=0.1,count=16,seed=13",
        "--metrics", quality.to_str().unwrap(),
        "--dump-dir", dumps.to_str().unwrap(),
        "--dump-count", "2",
    ]);
    assert_code(&out, 0, "reconstruct");
    let rows = csv_rows(&quality, "metric,value");
    for metric in ["mse,", "psnr_db,", "ssim,"] {
        assert!(rows.iter().any(|r| r.starts_with(metric)), "{rows:?}");
    }
    assert!(dumps.join("pair-000.pgm").exists());
    assert!(dumps.join("pair-001.pgm").exists());

    let report = dir.path().join("report.csv");
    let out = run(&[
        "report",
        "--model", ckpt.to_str().unwrap(),
        "--train-data", BASIC,
        "--test-data", "synth:noise-texture,complexity=0.8,count=32,seed=14",
        "--out", report.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "report");
    let rows = csv_rows(&report, "metric,value");
    assert!(rows.iter().any(|r| r.starts_with("flagged,")), "{rows:?}");

    let verdicts = dir.path().join("verdicts.csv");
    let out = run(&[
        "select-simple",
        "--basic", BASIC,
        "--candidates", SIMPLE,
        "--latent-dim", "4",
        "--channels", "2,3",
        "--epochs", "1",
        "--batch-size", "32",
        "--out", verdicts.to_str().unwrap(),
    ]);
    assert_code(&out, 0, "select-simple");
    let rows = csv_rows(&verdicts, "dataset,stat,verdict");
    assert_eq!(rows.len(), 2, "{rows:?}");
    assert!(rows[0].ends_with(",basic"), "{rows:?}");
}

#[test]
fn missing_required_flags_are_config_errors() {
    let out = run(&["train", "--out", "/tmp/never.ckpt"]);
    assert_code(&out, 2, "train without --basic");
    assert!(stderr_of(&out).contains("--basic"), "{}", stderr_of(&out));

    let out = run(&["train", "--basic", BASIC]);
    assert_code(&out, 2, "train without --out");
    assert!(stderr_of(&out).contains("--out"), "{}", stderr_of(&out));

    let out = run(&["detect", "--id", BASIC, "--ood", SIMPLE]);
    assert_code(&out, 2, "detect without --model");
    assert!(stderr_of(&out).contains("--model"), "{}", stderr_of(&out));
}

#[test]
fn bad_flag_values_are_config_errors() {
    let out = run(&["train", "--basic", "magic:foo", "--out", "/tmp/never.ckpt"]);
    assert_code(&out, 2, "unknown dataset scheme");
    assert!(stderr_of(&out).contains("scheme"), "{}", stderr_of(&out));

    let out = run(&[
        "train",
        "--basic", BASIC,
        "--channels", "4",
        "--out", "/tmp/never.ckpt",
    ]);
    assert_code(&out, 2, "one channel width");
    assert!(stderr_of(&out).contains("channels"), "{}", stderr_of(&out));

    let out = run(&[
        "train",
        "--basic", BASIC,
        "--simple-sigma", "0.1",
        "--out", "/tmp/never.ckpt",
    ]);
    assert_code(&out, 2, "sigma without simple datasets");
    assert!(stderr_of(&out).contains("--simple"), "{}", stderr_of(&out));
}

#[test]
fn missing_files_are_data_errors() {
    let out = run(&[
        "train",
        "--basic", "idx:/nonexistent/images.idx",
        "--out", "/tmp/never.ckpt",
    ]);
    assert_code(&out, 3, "missing dataset file");

    let out = run(&[
        "detect",
        "--model", "/nonexistent/model.ckpt",
        "--id", BASIC,
        "--ood", SIMPLE,
    ]);
    assert_code(&out, 3, "missing checkpoint");
}

#[test]
fn diverged_training_has_its_own_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&[
        "train",
        "--basic", "synth:noise-texture,complexity=0.8,count=32,seed=1",
        "--latent-dim", "2",
        "--channels", "2,3",
        "--epochs", "3",
        "--batch-size", "32",
        "--learning-rate", "1e8",
        "--quiet",
        "--out", dir.path().join("never.ckpt").to_str().unwrap(),
    ]);
    assert_code(&out, 4, "exploding learning rate");
    assert!(stderr_of(&out).contains("diverged"), "{}", stderr_of(&out));
}

#[test]
fn config_file_fills_gaps_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("conf.ckpt");
    let losses = dir.path().join("conf-losses.csv");
    let conf = dir.path().join("run.conf");
    std::fs::write(
        &conf,
        format!(
            "# toy run\nbasic = {BASIC}\ntrain.epochs = 3\nbatch-size = 32\n\
             arch.latent_dim = 4\nchannels = 4,6\nseed = 3\nout = {}\n",
            ckpt.display()
        ),
    )
    .unwrap();

    // --epochs beats train.epochs; everything else comes from the file.
    let out = run(&[
        "train",
        "--config", conf.to_str().unwrap(),
        "--epochs", "1",
        "--loss-log", losses.to_str().unwrap(),
        "--quiet",
    ]);
    assert_code(&out, 0, "train from config file");
    assert!(ckpt.exists(), "checkpoint path from the file");
    assert_eq!(csv_rows(&losses, "epoch,loss").len(), 1, "flag beat the file");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("typo.conf");
    std::fs::write(&conf, format!("basic = {BASIC}\nout = x.ckpt\nepoch = 3\n")).unwrap();
    let out = run(&["train", "--config", conf.to_str().unwrap(), "--quiet"]);
    assert_code(&out, 2, "typo in config key");
    assert!(
        stderr_of(&out).contains("unknown config keys: epoch"),
        "{}",
        stderr_of(&out)
    );
}
