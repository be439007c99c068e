use std::path::Path;
use std::process::{Command, Output};

fn restora(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_restora")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

#[test]
fn stage2_without_stage1_checkpoint_is_a_state_error() {
    let tmp = tempfile::tempdir().unwrap();
    let out = s(&tmp.path().join("run"));
    assert_eq!(code(&restora(&["train-stage2", "--out", &out])), 3);
    let missing = s(&tmp.path().join("nope.tar"));
    assert_eq!(code(&restora(&["train-stage2", "--out", &out, "--init", &missing])), 3);
}

#[test]
fn wrong_stage_checkpoint_is_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    let pre = tmp.path().join("pre");
    let o = restora(&["pretrain-ae", "--out", &s(&pre), "--steps", "1", "--set", "heads.steps=1", "--set", "pretrain.batch_size=1", "--set", "heads.batch_size=1", "--set", "pretrain.eval_images=1"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let init = s(&pre.join("checkpoint.tar"));
    let o = restora(&["train-stage2", "--out", &s(&tmp.path().join("s2")), "--init", &init]);
    assert_eq!(code(&o), 3);
    assert!(String::from_utf8_lossy(&o.stderr).contains("pretrain"));
}

#[test]
fn config_errors_exit_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "model.channels = 16,32\nthis line has no equals sign\n").unwrap();
    let out = s(&tmp.path().join("run"));
    assert_eq!(code(&restora(&["synth", "--config", &s(&cfg), "--out", &out])), 2);
    assert_eq!(code(&restora(&["synth", "--out", &out, "--set", "synth.severities=9"])), 2);
}

#[test]
fn missing_config_file_is_an_io_error() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = s(&tmp.path().join("absent.cfg"));
    assert_eq!(code(&restora(&["synth", "--config", &cfg, "--out", &s(&tmp.path().join("run"))])), 4);
}

#[test]
fn corrupt_checkpoint_is_a_format_error() {
    let tmp = tempfile::tempdir().unwrap();
    let ck = tmp.path().join("ck.tar");
    std::fs::write(&ck, b"not a tar archive").unwrap();
    let o = restora(&["eval", "--checkpoint", &s(&ck), "--out", &s(&tmp.path().join("run"))]);
    assert_eq!(code(&o), 4);
}

#[test]
fn synth_writes_manifest_with_relative_paths() {
    let tmp = tempfile::tempdir().unwrap();
    let run = tmp.path().join("run");
    let o = restora(&["synth", "--out", &s(&run), "--set", "synth.toy_images=2", "--set", "synth.kinds=fog", "--set", "synth.severities=2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(run.join("manifest.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 2);
    assert!(!text.contains(&s(tmp.path())));
    assert!(run.join("digests.json").exists());
}
