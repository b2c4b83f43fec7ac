//! End-to-end checks of the command-line interface: dataset layout, config
//! overrides, and the documented exit codes.

use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_oct-restore"))
}

fn run(args: &[&str]) -> std::process::Output {
    bin().args(args).output().expect("spawn oct-restore")
}

#[test]
fn generate_writes_the_documented_layout() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("data");
    let output = run(&[
        "generate",
        "--out",
        out.to_str().unwrap(),
        "--count",
        "3",
        "--size",
        "64x64",
        "--seed",
        "5",
    ]);
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    for sub in ["clean", "masks", "noisy", "specs"] {
        assert!(out.join(sub).is_dir(), "missing {sub}/");
    }
    for id in ["phantom_00000", "phantom_00001", "phantom_00002"] {
        assert!(out.join("clean").join(format!("{id}.png")).is_file());
        assert!(out.join("masks").join(format!("{id}.png")).is_file());
        assert!(out.join("noisy").join(format!("{id}.png")).is_file());
        assert!(out.join("specs").join(format!("{id}.json")).is_file());
    }
}

#[test]
fn exit_codes_match_the_contract() {
    // 2: configuration error (bad size syntax).
    let tmp = tempfile::tempdir().unwrap();
    let out = run(&[
        "generate",
        "--out",
        tmp.path().join("x").to_str().unwrap(),
        "--size",
        "garbage",
    ]);
    assert_eq!(out.status.code(), Some(2), "config error should exit 2");

    // 2: invalid config file.
    let cfg = tmp.path().join("bad.toml");
    std::fs::write(&cfg, "[train]\nlearning_rate = -2.0\n").unwrap();
    let out = run(&[
        "generate",
        "--out",
        tmp.path().join("y").to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2), "invalid config should exit 2");

    // 3: data error (missing dataset root).
    let out = run(&[
        "train-detector",
        "--data",
        tmp.path().join("nonexistent").to_str().unwrap(),
        "--out",
        tmp.path().join("ckpt").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "missing data should exit 3");

    // 3: corrupt checkpoint.
    let out = run(&[
        "infer",
        "--input",
        tmp.path().to_str().unwrap(),
        "--processor",
        tmp.path().join("not_a_checkpoint").to_str().unwrap(),
        "--out",
        tmp.path().join("restored").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(3), "corrupt checkpoint should exit 3");
}

#[test]
fn tiny_pipeline_via_cli_produces_reports() {
    let tmp = tempfile::tempdir().unwrap();
    let path = |name: &str| tmp.path().join(name).to_str().unwrap().to_string();

    let out = run(&[
        "generate", "--out", &path("data"), "--count", "8", "--size", "64x64", "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let out = run(&[
        "train-detector",
        "--data", &path("data"),
        "--out", &path("det"),
        "--seed", "3",
        "--epochs", "1",
        "--depth", "2",
        "--base-channels", "2",
        "--no-augment",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("det/manifest.json").is_file());
    assert!(tmp.path().join("det/detector_train_log.csv").is_file());

    let out = run(&[
        "train-processor",
        "--data", &path("data"),
        "--detector", &path("det"),
        "--out", &path("proc"),
        "--seed", "3",
        "--epochs", "1",
        "--depth", "2",
        "--base-channels", "2",
        "--no-augment",
        "--frozen-random",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("proc/processor_loss_log.csv").is_file());
    let loss_log = std::fs::read_to_string(tmp.path().join("proc/processor_loss_log.csv")).unwrap();
    let header = loss_log.lines().next().unwrap();
    assert!(header.starts_with("epoch,batch,content_"), "loss log header: {header}");
    assert!(header.contains("shadow,total"), "loss log header: {header}");

    let out = run(&[
        "evaluate",
        "--data", &path("data"),
        "--processor", &path("proc"),
        "--detector", &path("det"),
        "--out", &path("eval"),
        "--seed", "3",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("eval/metrics.csv").is_file());
    assert!(tmp.path().join("eval/summary.json").is_file());

    let out = run(&[
        "infer",
        "--input", &path("data/noisy"),
        "--processor", &path("proc"),
        "--out", &path("restored"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("restored/phantom_00000.png").is_file());

    let out = run(&[
        "report",
        "--metrics", &path("eval/metrics.csv"),
        "--out", &path("report"),
        "--render-count", "1",
        "--render-data", &path("data"),
        "--processor", &path("proc"),
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(tmp.path().join("report/summary.json").is_file());
    assert!(tmp.path().join("report/phantom_00000_grid.png").is_file());
    assert!(tmp.path().join("report/phantom_00000_lpi.png").is_file());
}

#[test]
fn output_dir_env_sets_default_root() {
    let tmp = tempfile::tempdir().unwrap();
    let output = bin()
        .env("OCT_RESTORE_OUT", tmp.path())
        .args(["generate", "--count", "1", "--size", "64x64", "--seed", "1"])
        .output()
        .expect("spawn oct-restore");
    assert!(output.status.success(), "{}", String::from_utf8_lossy(&output.stderr));
    assert!(
        tmp.path().join("dataset/clean/phantom_00000.png").is_file(),
        "default artifact root should come from the environment"
    );
    assert!(Path::new(&tmp.path().join("dataset/specs/phantom_00000.json")).is_file());
}
