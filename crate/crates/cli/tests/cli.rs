use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn talknet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_talknet")).args(args).output().expect("binary runs")
}

fn ok_json(out: Output) -> Value {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("stdout is JSON")
}

fn error_kind(out: Output) -> String {
    assert!(!out.status.success());
    let v: Value = serde_json::from_slice(&out.stderr).expect("stderr is JSON");
    v["error"].as_str().expect("error kind").to_string()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn fixtures_prepare_train_infer() {
    let dir = tempfile::tempdir().unwrap();
    let fx = dir.path().join("fx");
    let prep = dir.path().join("prep");
    let ckpt = dir.path().join("ckpt");
    std::fs::create_dir_all(&ckpt).unwrap();

    ok_json(talknet(&["fixtures", "--out", s(&fx)]));
    let summary = ok_json(talknet(&["prepare", "--manifest", s(&fx.join("manifest.jsonl")), "--lattices", s(&fx.join("lattices")), "--out", s(&prep)]));
    assert_eq!(summary["prepared"], 10);

    let config = dir.path().join("quick.json");
    std::fs::write(&config, r#"{"batch_size": 4, "steps": 3, "channel_scale": 0.125, "eval_every": 3}"#).unwrap();
    for kind in ["duration", "pitch", "mel"] {
        let out = ckpt.join(format!("{kind}.ckpt"));
        let r = ok_json(talknet(&["train", kind, "--data", s(&prep), "--config", s(&config), "--out", s(&out)]));
        assert_eq!(r["steps"], 3);
        assert!(out.is_file());
        assert!(ckpt.join(format!("{kind}.metrics.jsonl")).is_file());
    }

    let mel = dir.path().join("mel.ten");
    let a = ok_json(talknet(&["infer", "--text", "the cat", "--ckpt-dir", s(&ckpt), "--out", s(&mel)]));
    let durs: u64 = a["durations"].as_array().unwrap().iter().map(|d| d.as_u64().unwrap()).sum();
    assert_eq!(a["frames"].as_u64().unwrap(), durs);
    assert!(mel.is_file());
    let b = ok_json(talknet(&["infer", "--text", "the cat", "--ckpt-dir", s(&ckpt), "--out", s(&mel), "--durations-scale", "2"]));
    assert_eq!(b["frames"].as_u64().unwrap(), 2 * durs);

    let bench = ok_json(talknet(&["bench", "--ckpt-dir", s(&ckpt), "--batch", "2", "--count", "4"]));
    assert!(bench["rtf"].as_f64().unwrap() > 0.0);

    assert_eq!(error_kind(talknet(&["infer", "--text", "the cat", "--ckpt-dir", s(dir.path()), "--out", s(&mel)])), "CheckpointMissing");
    assert_eq!(error_kind(talknet(&["infer", "--text", "  ", "--ckpt-dir", s(&ckpt), "--out", s(&mel)])), "EmptyInput");
}

#[test]
fn align_reports_durations_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    ok_json(talknet(&["fixtures", "--out", s(dir.path())]));
    let lattice = dir.path().join("lattices/utt00.ten");
    let vocab = dir.path().join("lattices/vocab.txt");
    let r = ok_json(talknet(&["align", "--lattice", s(&lattice), "--text", "the cat sat", "--vocab", s(&vocab)]));
    let durs = r["durations"].as_array().unwrap();
    assert_eq!(durs.len(), 23);
    assert_eq!(durs[0], 3);
    assert_eq!(error_kind(talknet(&["align", "--lattice", s(&lattice), "--text", "the cat sat!", "--vocab", s(&vocab)])), "UnknownSymbol");
    assert_eq!(error_kind(talknet(&["align", "--lattice", s(&lattice), "--text", &"the cat sat ".repeat(20), "--vocab", s(&vocab)])), "Infeasible");
}

#[test]
fn bad_manifest_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = dir.path().join("m.jsonl");
    std::fs::write(&manifest, "{\"id\":\"a\",\"audio_path\":\"missing.wav\",\"text\":\"hi\"}\n").unwrap();
    let out = talknet(&["prepare", "--manifest", s(&manifest), "--lattices", s(dir.path()), "--out", s(&dir.path().join("o"))]);
    assert_eq!(error_kind(out), "Manifest");
}
