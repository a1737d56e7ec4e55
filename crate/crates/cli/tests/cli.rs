use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn portrait(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_portrait"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn summary(dir: &Path) -> Value {
    let text = std::fs::read_to_string(dir.join("run_summary.json")).unwrap();
    serde_json::from_str(&text).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const TINY: [&str; 2] = ["--set", "profile=\"tiny\""];

#[test]
fn animate_with_missing_checkpoint_names_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("no_such_ckpt");
    let out = portrait(&["animate", "--ckpt", s(&missing), "--driving", s(tmp.path()), "--out", s(&tmp.path().join("o"))]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains(s(&missing)), "{}", stderr(&out));
}

#[test]
fn bad_override_names_the_field() {
    let tmp = tempfile::tempdir().unwrap();
    let out = portrait(&["--set", "stage1.stepz=3", "synth", "--out", s(tmp.path())]);
    assert!(!out.status.success());
    assert!(stderr(&out).contains("stepz"), "{}", stderr(&out));
}

#[test]
fn synth_writes_clips_manifest_and_summary() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("corpus");
    let out = portrait(&["--seed", "5", "synth", "--out", s(&dir), "--videos", "3", "--frames", "4", "--size", "32"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = std::fs::read_to_string(dir.join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 3);
    let sum = summary(&dir);
    assert_eq!(sum["command"], "synth");
    assert_eq!(sum["seed"], 5);
    assert_eq!(sum["config"]["seed"], 5);
}

/// Stage ordering end to end on the tiny profile: stage 1, a rejected
/// stage 2, gaze fine-tune, stage 2, then animation.
#[test]
fn stage_chain_enforces_order() {
    let tmp = tempfile::tempdir().unwrap();
    let p = |n: &str| tmp.path().join(n);
    let corpus = p("corpus");
    let ok = |o: Output| assert!(o.status.success(), "{}", stderr(&o));
    ok(portrait(&["synth", "--out", s(&corpus), "--videos", "2", "--frames", "40", "--size", "32"]));
    let steps = ["--set", "stage1.steps=2", "--set", "gaze_ft.steps=1", "--set", "stage2.steps=1"];
    let train = |cmd: &str, input: Option<&Path>, out: &Path| {
        let mut args: Vec<&str> = TINY.iter().chain(steps.iter()).copied().collect();
        args.extend([cmd, "--corpus", s(&corpus), "--out", s(out)]);
        if let Some(i) = input {
            args.extend(["--ckpt", s(i)]);
        }
        portrait(&args)
    };
    ok(train("train-stage1", None, &p("s1")));
    let log = std::fs::read_to_string(p("s1").join("train_log.jsonl")).unwrap();
    let first: Value = serde_json::from_str(log.lines().next().unwrap()).unwrap();
    assert_eq!(first["stage"], "stage1");

    let bad = train("train-stage2", Some(&p("s1")), &p("bad"));
    assert!(!bad.status.success());
    assert!(stderr(&bad).contains("gaze_ft"), "{}", stderr(&bad));

    ok(train("finetune-gaze", Some(&p("s1")), &p("g")));
    ok(train("train-stage2", Some(&p("g")), &p("s2")));
    let manifest: Value = serde_json::from_str(&std::fs::read_to_string(p("s2").join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["stage"], "stage2");
    assert_eq!(manifest["step_count"], 4);

    let (ckpt, driving, anim) = (p("s2"), corpus.join("clip_0000"), p("anim"));
    let mut args: Vec<&str> = TINY.to_vec();
    args.extend(["--set", "diffusion.sample_steps=2", "animate", "--ckpt", s(&ckpt), "--driving", s(&driving)]);
    args.extend(["--frames", "5", "--out", s(&anim), "--y4m"]);
    ok(portrait(&args));
    assert!(p("anim").join("frame_0004.png").is_file());
    assert!(p("anim").join("animation.y4m").is_file());
    assert_eq!(summary(&p("anim"))["result"]["frames"], 5);
}

#[test]
fn audit_passes_and_lists_each_check() {
    let tmp = tempfile::tempdir().unwrap();
    let mut args = TINY.to_vec();
    args.extend(["audit", "--out", s(tmp.path()), "--trials", "5"]);
    let out = portrait(&args);
    assert!(out.status.success(), "{}", stderr(&out));
    let sum = summary(tmp.path());
    assert_eq!(sum["result"]["passed"], true);
    let names: Vec<&str> = sum["result"]["checks"].as_array().unwrap().iter().map(|c| c["name"].as_str().unwrap()).collect();
    for want in ["conditioning_neutrality", "temporal_identity", "injection_sites", "freeze_stage1", "freeze_stage2"] {
        assert!(names.contains(&want), "{names:?}");
    }
}

#[test]
fn preprocess_scores_and_masks() {
    let tmp = tempfile::tempdir().unwrap();
    let corpus = tmp.path().join("c");
    assert!(portrait(&["synth", "--out", s(&corpus), "--videos", "2", "--frames", "3", "--size", "32"]).status.success());
    let out = tmp.path().join("pre");
    let o = portrait(&["preprocess", "--corpus", s(&corpus), "--out", s(&out), "--gaze-fraction", "0.5"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let clips = summary(&out)["result"]["clips"].as_array().unwrap().clone();
    assert_eq!(clips.len(), 2);
    assert_eq!(clips.iter().filter(|c| c["selected"] == true).count(), 1);
    assert!(out.join("clip_0001").join("frame_0002.png").is_file());
}
