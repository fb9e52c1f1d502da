use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use acvae::env::{DiscreteAction, SpritesEnv};
use acvae::governance::{predict_with_override, replay_matches, ActionChoice, EpisodeTrace, Override};
use acvae::persist::load_checkpoint;
use acvae::Checkpoint;

const TINY: &str = r#"
[model]
encoder_hidden = [16]
decoder_hidden = [16]
head_hidden = 8

[train]
total_steps = 64
num_envs = 2
rollout_len = 4
checkpoint_every = 32

[env]
horizon = 16

[metrics]
samples = 60
trees = 3
depths = [2, 4]
"#;

fn acvae(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_acvae"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = acvae(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn trained(dir: &Path, name: &str, seed: &str) -> PathBuf {
    let cfg = dir.join("tiny.toml");
    std::fs::write(&cfg, TINY).unwrap();
    let out = dir.join(name);
    ok(&["train", "--config", s(&cfg), "--seed", seed, "--out", s(&out)]);
    out
}

#[test]
fn train_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = trained(dir.path(), "a", "5");
    let b = trained(dir.path(), "b", "5");
    for f in ["checkpoint.json", "checkpoint-32.json", "reports.jsonl"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    let reports = std::fs::read_to_string(a.join("reports.jsonl")).unwrap();
    assert_eq!(reports.lines().count(), 8);
    let ck: Checkpoint = load_checkpoint(&a.join("checkpoint.json")).unwrap();
    assert_eq!((ck.seed, ck.step_count), (5, 64));

    let c = trained(dir.path(), "c", "6");
    assert_ne!(std::fs::read(a.join("checkpoint.json")).unwrap(), std::fs::read(c.join("checkpoint.json")).unwrap());
}

#[test]
fn traverse_matches_predict_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", "1");
    let ckp = run.join("checkpoint.json");
    let pgm = dir.path().join("grid.pgm");
    ok(&[
        "traverse", "--checkpoint", s(&ckp), "--dim", "3", "--min", "-2", "--max", "2", "--steps", "5", "--seed", "11",
        "--out", s(&pgm),
    ]);
    let bytes = std::fs::read(&pgm).unwrap();
    let header = b"P5 324 64 255\n";
    assert_eq!(&bytes[..header.len()], header);
    let body = &bytes[header.len()..];
    assert_eq!(body.len(), 324 * 64);

    let ck: Checkpoint = load_checkpoint(&ckp).unwrap();
    let (obs, _) = SpritesEnv::new(ck.config.env).reset(11);
    for (i, v) in [-2.0, -1.0, 0.0, 1.0, 2.0].into_iter().enumerate() {
        let p = predict_with_override(
            &ck.model,
            &obs,
            &[Override { dim: 3, value: v }],
            ActionChoice::Given(DiscreteAction::Noop),
        )
        .unwrap();
        let expected = p.frame().data;
        let c0 = i * 65;
        for r in 0..64 {
            assert_eq!(&body[r * 324 + c0..r * 324 + c0 + 64], &expected[r * 64..(r + 1) * 64], "tile {i} row {r}");
        }
        if i > 0 {
            assert_eq!(body[c0 - 1], 255, "separator");
        }
    }
}

#[test]
fn metrics_effects_and_govern_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let run = trained(dir.path(), "run", "2");
    let ckp = run.join("checkpoint.json");
    let sched = dir.path().join("schedule.json");
    std::fs::write(&sched, r#"{"entries": [{"start": 0, "end": 8, "dim": 2, "value": 2.0}]}"#).unwrap();
    let d = dir.path();
    for tag in ["1", "2"] {
        ok(&["metrics", "--checkpoint", s(&ckp), "--samples", "60", "--seed", "4", "--out", s(&d.join(format!("m{tag}.json")))]);
        ok(&["effects", "--checkpoint", s(&ckp), "--bases", "3", "--out", s(&d.join(format!("e{tag}.json")))]);
        ok(&["govern", "--checkpoint", s(&ckp), "--schedule", s(&sched), "--seed", "9", "--out", s(&d.join(format!("g{tag}.json")))]);
    }
    for f in ["m", "e", "g"] {
        let a = std::fs::read(d.join(format!("{f}1.json"))).unwrap();
        assert_eq!(a, std::fs::read(d.join(format!("{f}2.json"))).unwrap(), "{f}");
    }

    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("m1.json")).unwrap()).unwrap();
    let ad = report["avg_disentanglement"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&ad));
    assert_eq!(report["samples"], 60);

    let effects: serde_json::Value = serde_json::from_slice(&std::fs::read(d.join("e1.json")).unwrap()).unwrap();
    assert_eq!(effects["std"].as_array().unwrap().len(), 10);

    let trace: EpisodeTrace = serde_json::from_slice(&std::fs::read(d.join("g1.json")).unwrap()).unwrap();
    assert_eq!(trace.steps.len(), 16);
    assert_eq!(trace.steps[0].applied_overrides, vec![Override { dim: 2, value: 2.0 }]);
    assert!(trace.steps[8].applied_overrides.is_empty());
    let ck: Checkpoint = load_checkpoint(&ckp).unwrap();
    assert!(replay_matches(&ck.model, ck.config.env, &trace).unwrap());
}

#[test]
fn exit_codes_follow_error_kind() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let code = |args: &[&str]| acvae(args).status.code().unwrap();

    assert_eq!(code(&["train", "--bogus"]), 2);
    let bad_cfg = d.join("bad.toml");
    std::fs::write(&bad_cfg, "[train]\nlearning_rate = 1.0\n").unwrap();
    assert_eq!(code(&["train", "--config", s(&bad_cfg), "--out", s(&d.join("x"))]), 2);

    let missing = d.join("missing.json");
    assert_eq!(code(&["effects", "--checkpoint", s(&missing), "--out", s(&d.join("e.json"))]), 3);

    let run = trained(d, "run", "0");
    let ckp = run.join("checkpoint.json");
    assert_eq!(code(&["traverse", "--checkpoint", s(&ckp), "--dim", "11", "--out", s(&d.join("t.pgm"))]), 2);

    let mut text = std::fs::read_to_string(&ckp).unwrap();
    let at = text.find("\"payload\":\"").unwrap() + 30;
    let replacement = if &text[at..at + 1] == "A" { "B" } else { "A" };
    text.replace_range(at..at + 1, replacement);
    let corrupt = d.join("corrupt.json");
    std::fs::write(&corrupt, text).unwrap();
    assert_eq!(code(&["metrics", "--checkpoint", s(&corrupt), "--out", s(&d.join("m.json"))]), 3);
}
