use std::path::Path;
use std::process::Command;

fn geoprompt(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_geoprompt")).args(args).env("RUST_LOG", "warn").output().unwrap()
}

fn code(args: &[&str]) -> i32 {
    geoprompt(args).status.code().unwrap()
}

#[test]
fn configuration_errors_exit_with_2() {
    assert_eq!(code(&["train", "--set", "lr=-1"]), 2);
    assert_eq!(code(&["train", "--set", "no_such_key=1"]), 2);
    assert_eq!(code(&["train", "--set", "ablation.cl=true", "--set", "ablation.dpe=false"]), 2);
    assert_eq!(code(&["ablate", "--grid", "sideways"]), 2);
}

#[test]
fn data_errors_exit_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nowhere");
    assert_eq!(code(&["train", "--data", missing.to_str().unwrap()]), 3);
    std::fs::write(dir.path().join("manifest.json"), "[{\"frame_id\": \"a\"}]").unwrap();
    assert_eq!(code(&["train", "--data", dir.path().to_str().unwrap()]), 3);
}

fn run_ok(args: &[&str]) -> String {
    let out = geoprompt(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_train_evaluate_predict() {
    let dir = tempfile::tempdir().unwrap();
    let p = |s: &str| dir.path().join(s).display().to_string();
    run_ok(&["gen-synth", "--out", &p("data"), "--train", "3", "--val", "2", "--test", "2", "--resolution", "64"]);
    let trained = run_ok(&[
        "train", "--data", &p("data"), "--epochs", "1", "--batch-size", "2", "--out-dir", &p("run"),
        "--set", "resolution=64",
    ]);
    assert!(trained.contains("trained 2 steps"), "{trained}");
    for f in ["last/meta.json", "last/params/index.json", "best/meta.json", "train_log.jsonl"] {
        assert!(Path::new(&p("run")).join(f).exists(), "{f}");
    }
    let report = run_ok(&["eval", "--checkpoint", &p("run/best"), "--split", "test"]);
    assert!(report.contains("ligament") && report.contains("mean"), "{report}");

    // a checkpoint must not be evaluated as a different architecture
    assert_eq!(code(&["eval", "--checkpoint", &p("run/best"), "--set", "ablation.sga=false", "--set", "resolution=64"]), 2);

    run_ok(&["predict", "--checkpoint", &p("run/best"), "--images", &p("data/images"), "--out", &p("pred")]);
    let overlays = std::fs::read_dir(p("pred")).unwrap().filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().ends_with("_overlay.png")).count();
    assert_eq!(overlays, 7);
}
