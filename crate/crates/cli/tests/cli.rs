use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn qnerf(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_qnerf"))
        .args(args)
        .arg("--threads")
        .arg("1")
        .current_dir(cwd)
        .env_remove("QNERF_DATA_DIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    let stdout = String::from_utf8_lossy(&out.stdout).into_owned();
    assert!(out.status.success(), "exit {:?}\nstdout: {stdout}\nstderr: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
    stdout
}

fn smoke_config() -> String {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.conf").display().to_string()
}

/// A work directory holding a 16 px synthetic scene under `data/scene`.
fn workspace() -> (tempfile::TempDir, PathBuf) {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qnerf(tmp.path(), &["synth", "--size", "16", "--train", "2", "--test", "1", "--out", "data"]));
    let scene = tmp.path().join("data/scene");
    assert!(scene.join("transforms_train.json").is_file());
    (tmp, scene)
}

fn train(cwd: &Path, scene: &Path, out: &str) -> String {
    ok(&qnerf(cwd, &["train", "--config", &smoke_config(), "--scene", scene.to_str().unwrap(), "--out", out]))
}

#[test]
fn missing_scene_and_bad_keys_exit_with_argument_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let out = qnerf(tmp.path(), &["train", "--scene", "/nonexistent/lego", "--out", "run"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("transforms_train.json"));
    let out = qnerf(tmp.path(), &["info", "--set", "no_such_key=1"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_key"));
    let out = qnerf(tmp.path(), &["info", "--readout-p", "0.7"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!tmp.path().join("run").exists());
}

#[test]
fn training_is_reproducible_and_stays_inside_out() {
    let (tmp, scene) = workspace();
    train(tmp.path(), &scene, "run_a");
    train(tmp.path(), &scene, "run_b");
    for f in ["model.ckpt", "train_loss.csv", "eval.csv", "config.txt"] {
        assert!(tmp.path().join("run_a").join(f).is_file(), "{f}");
    }
    let a = std::fs::read_to_string(tmp.path().join("run_a/train_loss.csv")).unwrap();
    let b = std::fs::read_to_string(tmp.path().join("run_b/train_loss.csv")).unwrap();
    assert_eq!(a.lines().count(), 4);
    assert_eq!(a, b);
    let mut entries: Vec<String> =
        std::fs::read_dir(tmp.path()).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    entries.sort();
    assert_eq!(entries, ["data", "run_a", "run_b"]);
}

#[test]
fn rendering_with_readout_extremes() {
    let (tmp, scene) = workspace();
    train(tmp.path(), &scene, "run");
    let s = scene.to_str().unwrap();
    let conf = smoke_config();
    let render = |out: &str, extra: &[&str]| {
        let mut args = vec!["render", "--config", &conf, "--scene", s, "--checkpoint", "run/model.ckpt", "--out", out];
        args.extend_from_slice(extra);
        ok(&qnerf(tmp.path(), &args));
        image::open(tmp.path().join(out).join("render_test_0.png")).unwrap().to_rgb8().into_raw()
    };
    let clean = render("clean", &[]);
    let p0 = render("p0", &["--readout-p", "0"]);
    assert_eq!(clean, p0);
    let half = render("half", &["--readout-p", "0.5"]);
    assert!(half.iter().all(|&b| b == 255), "p=0.5 should leave only the white background");
    let metrics = std::fs::read_to_string(tmp.path().join("clean/render_metrics.csv")).unwrap();
    assert!(metrics.lines().nth(1).unwrap().starts_with("render_test_0,"));
    ok(&qnerf(tmp.path(), &["eval", "--config", &conf, "--scene", s, "--checkpoint", "run/model.ckpt", "--out", "ev"]));
    assert!(tmp.path().join("ev/eval_metrics.csv").is_file());
}

#[test]
fn checkpoint_version_mismatch_exits_with_four() {
    let (tmp, scene) = workspace();
    train(tmp.path(), &scene, "run");
    let ckpt = tmp.path().join("run/model.ckpt");
    let mut bytes = std::fs::read(&ckpt).unwrap();
    bytes[8..12].copy_from_slice(&7u32.to_le_bytes());
    std::fs::write(&ckpt, bytes).unwrap();
    let out = qnerf(tmp.path(), &["render", "--scene", scene.to_str().unwrap(), "--checkpoint", "run/model.ckpt", "--out", "r"]);
    assert_eq!(out.status.code(), Some(4));
}

fn info(args: &[&str]) -> Vec<String> {
    let tmp = tempfile::tempdir().unwrap();
    let mut all = vec!["info"];
    all.extend_from_slice(args);
    let text = ok(&qnerf(tmp.path(), &all));
    text.lines().nth(1).unwrap().split_whitespace().map(str::to_owned).collect()
}

#[test]
fn info_reports_circuit_sizes() {
    let full = info(&["--variant", "full", "--qubits", "8", "--ell", "1"]);
    assert_eq!((full[3].as_str(), full[5].as_str()), ("256", "36"));
    let dual = info(&["--variant", "dual", "--qubits", "8", "--ell", "2"]);
    assert_eq!((dual[3].as_str(), dual[5].as_str()), ("32", "34"));
}

#[test]
fn fidelity_study_without_noise_is_all_ones() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&qnerf(tmp.path(), &["study", "fidelity", "--qubits", "4", "--ell", "1", "--set", "study_sigmas=0", "--set", "study_runs=5", "--out", "st"]));
    let csv = std::fs::read_to_string(tmp.path().join("st/fidelity.csv")).unwrap();
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    assert!(rows.iter().all(|r| r.ends_with(",0,1")), "{csv}");
}
