use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_heightfuse"))
}

fn synth(dir: &Path, scenes: &str) {
    let out = bin().args(["synth", "--scenes", scenes, "--size", "32", "--out"]).arg(dir).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn usage_errors_exit_with_2() {
    let o = bin().args(["train", "--epochs", "3"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
    let o = bin().args(["train", "--data", "x", "--out", "y", "--variant", "mid"]).output().unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn early_training_without_sar_tiles_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "2");
    fs::remove_dir_all(data.join("sar")).unwrap();
    let o = bin()
        .args(["train", "--variant", "early", "--epochs", "1"])
        .arg("--data")
        .arg(&data)
        .arg("--out")
        .arg(dir.path().join("m.ckpt"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn mismatched_tile_sets_name_the_difference() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    synth(&data, "3");
    let pred = dir.path().join("pred");
    fs::create_dir_all(&pred).unwrap();
    for name in ["scene_0000.tif", "scene_0001.tif"] {
        fs::copy(data.join("dsm").join(name), pred.join(name)).unwrap();
    }
    let o = bin()
        .arg("eval-height")
        .arg("--pred")
        .arg(&pred)
        .arg("--gt")
        .arg(&data)
        .arg("--report")
        .arg(dir.path().join("h.txt"))
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("scene_0002"), "{}", stderr(&o));
}

#[test]
fn score_combines_two_reports() {
    let dir = tempfile::tempdir().unwrap();
    let h = dir.path().join("h.txt");
    let m = dir.path().join("m.txt");
    fs::write(&h, "delta1: 0.306\nrmse: 12.7\nmae: NA\nr2: NA\nap50: NA\ncombined_score: NA\n").unwrap();
    fs::write(&m, "delta1: NA\nrmse: NA\nmae: NA\nr2: NA\nap50: 0.5\ncombined_score: NA\n").unwrap();
    let o = bin().arg("score").arg("--height-report").arg(&h).arg("--mask-report").arg(&m).output().unwrap();
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "0.403");
}

#[test]
fn score_without_height_metrics_fails() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    fs::write(&m, "delta1: NA\nrmse: NA\nmae: NA\nr2: NA\nap50: 0.5\ncombined_score: NA\n").unwrap();
    let o = bin().arg("score").arg("--height-report").arg(&m).arg("--mask-report").arg(&m).output().unwrap();
    assert_eq!(o.status.code(), Some(3));
}
