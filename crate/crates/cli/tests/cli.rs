//! End-to-end tests of the `fguap` binary on a small pipeline.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_fguap"))
}

fn run_ok(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("binary runs");
    assert!(
        out.status.success(),
        "command {args:?} failed:\nstdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn exit_code(args: &[&str]) -> i32 {
    bin().args(args)
        .output()
        .expect("binary runs")
        .status
        .code()
        .unwrap_or(-1)
}

/// Tiny dataset + mlp pipeline shared by most tests.
struct Pipeline {
    #[allow(dead_code)]
    dir: tempfile::TempDir,
    data: PathBuf,
    train_file: String,
    test_file: String,
    ckpt: String,
}

fn tiny_pipeline() -> Pipeline {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    run_ok(&[
        "gen-data",
        "--seed",
        "7",
        "--classes",
        "3",
        "--per-class-train",
        "8",
        "--per-class-test",
        "4",
        "--side",
        "12",
        "--out",
        data.to_str().unwrap(),
    ]);
    let train_file = data.join("train.uapdata").to_str().unwrap().to_string();
    let test_file = data.join("test.uapdata").to_str().unwrap().to_string();
    let model_dir = dir.path().join("model");
    run_ok(&[
        "train",
        "--train-data",
        &train_file,
        "--test-data",
        &test_file,
        "--arch",
        "mlp",
        "--epochs",
        "4",
        "--batch-size",
        "8",
        "--seed",
        "3",
        "--out",
        model_dir.to_str().unwrap(),
    ]);
    let ckpt = model_dir
        .join("checkpoint.uapckpt")
        .to_str()
        .unwrap()
        .to_string();
    Pipeline {
        dir,
        data,
        train_file,
        test_file,
        ckpt,
    }
}

fn file_bytes(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap()
}

#[test]
fn gen_data_is_byte_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a");
    let args = [
        "gen-data",
        "--seed",
        "5",
        "--classes",
        "2",
        "--per-class-train",
        "3",
        "--per-class-test",
        "2",
        "--side",
        "8",
        "--out",
        out.to_str().unwrap(),
    ];
    run_ok(&args);
    let names = ["train.uapdata", "test.uapdata", "manifest.txt", "gen-data.resolved.cfg"];
    let first: Vec<Vec<u8>> = names.iter().map(|n| file_bytes(&out.join(n))).collect();
    run_ok(&args);
    for (name, bytes) in names.iter().zip(&first) {
        assert_eq!(
            &file_bytes(&out.join(name)),
            bytes,
            "{name} differs between identical runs"
        );
    }
}

#[test]
fn gen_data_rejects_single_class() {
    assert_eq!(
        exit_code(&["gen-data", "--classes", "1", "--out", "/tmp/nope"]),
        2
    );
}

#[test]
fn train_rejects_bogus_arch() {
    let out = bin()
        .args(["train", "--arch", "resnet"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("convnet"), "usage error lists valid tags: {stderr}");
}

#[test]
fn missing_file_is_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let code = exit_code(&[
        "train",
        "--train-data",
        "/nonexistent.uapdata",
        "--test-data",
        "/nonexistent.uapdata",
        "--arch",
        "mlp",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn attack_with_zero_epochs_writes_zero_delta() {
    let p = tiny_pipeline();
    let out = p.data.join("uap");
    run_ok(&[
        "attack",
        "--checkpoint",
        &p.ckpt,
        "--train-data",
        &p.train_file,
        "--epochs",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    let pert =
        fguap::attack::Perturbation::load(&out.join("perturbation.uappert")).unwrap();
    assert!(pert.delta().data().iter().all(|&v| v == 0.0));

    // evaluating the zero perturbation reports FR = 0.0 in the JSON
    let eval_out = p.data.join("eval");
    run_ok(&[
        "eval",
        "--checkpoint",
        &p.ckpt,
        "--perturbation",
        out.join("perturbation.uappert").to_str().unwrap(),
        "--test-data",
        &p.test_file,
        "--out",
        eval_out.to_str().unwrap(),
    ]);
    let report = std::fs::read_to_string(eval_out.join("report.json")).unwrap();
    let parsed = fguap::analysis::EvalReport::from_json(&report).unwrap();
    assert_eq!(parsed.fooling_ratio, 0.0);
    parsed.validate().unwrap();
}

#[test]
fn targeted_attack_requires_target_class() {
    let p = tiny_pipeline();
    let code = exit_code(&[
        "attack",
        "--checkpoint",
        &p.ckpt,
        "--train-data",
        &p.train_file,
        "--mode",
        "targeted",
        "--out",
        "/tmp/nope2",
    ]);
    assert_eq!(code, 2);
}

#[test]
fn attack_is_byte_deterministic_and_logs_finite_losses() {
    let p = tiny_pipeline();
    let out1 = p.data.join("uap1");
    let out2 = p.data.join("uap2");
    for out in [&out1, &out2] {
        run_ok(&[
            "attack",
            "--checkpoint",
            &p.ckpt,
            "--train-data",
            &p.train_file,
            "--epochs",
            "2",
            "--batch-size",
            "8",
            "--seed",
            "11",
            "--out",
            out.to_str().unwrap(),
        ]);
    }
    assert_eq!(
        file_bytes(&out1.join("perturbation.uappert")),
        file_bytes(&out2.join("perturbation.uappert"))
    );
    let log: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(out1.join("attack_log.json")).unwrap())
            .unwrap();
    let losses = log["epoch_mean_loss"].as_array().unwrap();
    assert_eq!(losses.len(), 2);
    assert!(losses.iter().all(|v| v.as_f64().unwrap().is_finite()));
}

#[test]
fn targeted_attack_records_target_in_metadata() {
    let p = tiny_pipeline();
    let out = p.data.join("uap-t");
    run_ok(&[
        "attack",
        "--checkpoint",
        &p.ckpt,
        "--train-data",
        &p.train_file,
        "--mode",
        "targeted",
        "--target-class",
        "2",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let pert =
        fguap::attack::Perturbation::load(&out.join("perturbation.uappert")).unwrap();
    assert_eq!(pert.mode, fguap::attack::AttackMode::Targeted(2));
}

#[test]
fn transfer_writes_expected_csv_header_and_value() {
    let p = tiny_pipeline();
    // single checkpoint + single zero perturbation → 1×1 matrix equal to
    // the standalone white-box FR (0 for the zero delta)
    let ckpt_dir = p.data.join("ckpts");
    let pert_dir = p.data.join("perts");
    std::fs::create_dir_all(&ckpt_dir).unwrap();
    std::fs::create_dir_all(&pert_dir).unwrap();
    std::fs::copy(&p.ckpt, ckpt_dir.join("mlp.uapckpt")).unwrap();
    let uap_out = p.data.join("uap0");
    run_ok(&[
        "attack",
        "--checkpoint",
        &p.ckpt,
        "--train-data",
        &p.train_file,
        "--epochs",
        "0",
        "--out",
        uap_out.to_str().unwrap(),
    ]);
    std::fs::copy(
        uap_out.join("perturbation.uappert"),
        pert_dir.join("mlp.uappert"),
    )
    .unwrap();

    let out = p.data.join("transfer");
    run_ok(&[
        "transfer",
        "--checkpoints",
        ckpt_dir.to_str().unwrap(),
        "--perturbations",
        pert_dir.to_str().unwrap(),
        "--test-data",
        &p.test_file,
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("transfer.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("surrogate,victim,fr"));
    assert_eq!(lines.next(), Some("mlp,mlp,0.0"));
    assert_eq!(lines.next(), None);

    // empty directory → runtime error
    let empty = p.data.join("empty");
    std::fs::create_dir_all(&empty).unwrap();
    let code = exit_code(&[
        "transfer",
        "--checkpoints",
        empty.to_str().unwrap(),
        "--perturbations",
        pert_dir.to_str().unwrap(),
        "--test-data",
        &p.test_file,
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 1);
}

#[test]
fn redundancy_writes_one_row_per_count() {
    let p = tiny_pipeline();
    let out = p.data.join("red");
    run_ok(&[
        "redundancy",
        "--checkpoint",
        &p.ckpt,
        "--train-data",
        &p.train_file,
        "--test-data",
        &p.test_file,
        "--counts",
        "8,2,1",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--out",
        out.to_str().unwrap(),
    ]);
    let csv = std::fs::read_to_string(out.join("redundancy.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "count,fr,ratio_to_full");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("8,"));
    assert!(lines[3].starts_with("1,"));
}

#[test]
fn config_file_resolution_and_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("exp.cfg");
    let out = dir.path().join("out");
    std::fs::write(
        &cfg,
        "seed: 9\nclasses: 2\nper-class-train: 3\nper-class-test: 2\nside: 8\n",
    )
    .unwrap();
    // flag overrides the config seed: the resolved copy must show 10
    run_ok(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--seed",
        "10",
        "--out",
        out.to_str().unwrap(),
    ]);
    let resolved = std::fs::read_to_string(out.join("gen-data.resolved.cfg")).unwrap();
    assert!(resolved.contains("seed: 10"));
    assert!(resolved.contains("classes: 2"));

    // unknown key → usage error
    std::fs::write(&cfg, "classes: 2\nbogus-key: 1\n").unwrap();
    let code = exit_code(&[
        "gen-data",
        "--config",
        cfg.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 2);
}

#[test]
fn rerun_with_same_seed_overwrites_with_identical_checkpoint() {
    let p = tiny_pipeline();
    let model_dir = p.data.join("model2");
    let args = [
        "train",
        "--train-data",
        p.train_file.as_str(),
        "--test-data",
        p.test_file.as_str(),
        "--arch",
        "mlp",
        "--epochs",
        "2",
        "--batch-size",
        "8",
        "--seed",
        "3",
        "--out",
        model_dir.to_str().unwrap(),
    ];
    run_ok(&args);
    let first = file_bytes(&model_dir.join("checkpoint.uapckpt"));
    run_ok(&args);
    let second = file_bytes(&model_dir.join("checkpoint.uapckpt"));
    assert_eq!(first, second);
    // history CSV has the documented header
    let csv = std::fs::read_to_string(model_dir.join("history.csv")).unwrap();
    assert!(csv.starts_with("epoch,loss,train_acc,test_acc\n"));
    assert_eq!(csv.lines().count(), 3);
}
