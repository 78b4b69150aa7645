mod common;

use std::fs;
use std::path::Path;

use capl_kit::pipeline::RunManifest;
use common::{capl, p, run, text};

fn manifest(dir: &Path) -> RunManifest {
    serde_json::from_str(&fs::read_to_string(dir.join("run_manifest.json")).unwrap()).unwrap()
}

#[test]
fn help_matches_snapshot() {
    let out = run(&["--help"]);
    assert!(out.status.success());
    let expected = include_str!("snapshots/help.txt");
    assert_eq!(String::from_utf8_lossy(&out.stdout), expected);
}

#[test]
fn gen_then_self_eval_is_perfect() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    let out = run(&["gen", "--domain", "target", "--split", "test", "--n", "3", "--size", "32", "--seed", "4", "--out", p(&gt)]);
    assert!(out.status.success(), "{}", text(&out));
    let m = manifest(&gt);
    assert_eq!((m.command.as_str(), m.seed), ("gen", Some(4)));
    assert_eq!(m.config["n"], 3);

    let rep = dir.path().join("rep");
    let out = run(&["eval", "--gt", p(&gt), "--pred", p(&gt), "--out", p(&rep)]);
    assert!(out.status.success(), "{}", text(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("F_avg") && stdout.contains("1.0000"));
    let agg: serde_json::Value = serde_json::from_str(&fs::read_to_string(rep.join("aggregate.json")).unwrap()).unwrap();
    assert_eq!(agg["aji"], 1.0);
    assert_eq!(agg["f_avg"], 1.0);
    assert_eq!(fs::read_dir(rep.join("per_image")).unwrap().count(), 3);
    assert_eq!(manifest(&rep).command, "eval");
}

#[test]
fn eval_with_missing_predictions_lists_them() {
    let dir = tempfile::tempdir().unwrap();
    let gt = dir.path().join("gt");
    assert!(run(&["gen", "--n", "2", "--size", "32", "--out", p(&gt)]).status.success());
    let empty = dir.path().join("empty");
    fs::create_dir(&empty).unwrap();
    let out = run(&["eval", "--gt", p(&gt), "--pred", p(&empty), "--out", p(&dir.path().join("rep"))]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("s00000") && err.contains("s00001"), "{err}");
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train-stage1", "--source", "/nonexistent/src", "--target", "/nonexistent/tgt", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(2), "{}", text(&out));
    assert_eq!(run(&["gen", "--domain", "mars", "--out", p(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["gradcheck", "--loss", "nope"]).status.code(), Some(2));
}

#[test]
fn seed_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let out = capl().args(["gen", "--n", "2", "--size", "32", "--out", p(&a)]).env("CAPL_SEED", "77").output().unwrap();
    assert!(out.status.success());
    assert!(run(&["gen", "--n", "2", "--size", "32", "--seed", "77", "--out", p(&b)]).status.success());
    assert_eq!(manifest(&a).seed, Some(77));
    for f in ["manifest.json", "s00001.image.caplt", "s00001.instances.caplt"] {
        assert_eq!(fs::read(a.join(f)).unwrap(), fs::read(b.join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_passes_and_catches_a_sign_bug() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["gradcheck", "--loss", "dice", "--loss", "ce", "--instances", "5", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(0), "{}", text(&out));
    let log = text(&out);
    assert_eq!(log.matches("PASS").count(), 2);
    assert!(dir.path().join("gradcheck.json").exists());
    assert_eq!(manifest(dir.path()).command, "gradcheck");

    let out = run(&["gradcheck", "--loss", "dice", "--instances", "5", "--inject-fault", "dice-sign"]);
    assert_eq!(out.status.code(), Some(1), "{}", text(&out));
    assert!(text(&out).contains("FAIL"));
}

#[test]
fn stepwise_commands_chain() {
    let dir = tempfile::tempdir().unwrap();
    let d = |n: &str| dir.path().join(n);
    for (domain, split, out) in [("source", "train", "src"), ("target", "train", "tgt"), ("target", "test", "test")] {
        let o = run(&["gen", "--domain", domain, "--split", split, "--n", "3", "--size", "32", "--seed", "2", "--out", p(&d(out))]);
        assert!(o.status.success(), "{}", text(&o));
    }
    let (src, tgt, s1, s2, pl) = (d("src"), d("tgt"), d("s1"), d("s2"), d("pl"));
    let short = ["--warm-epochs", "1", "--epochs", "2", "--stage2-epochs", "1", "--batch-size", "2", "--threads", "2"];
    let mut args = vec!["train-stage1", "--source", p(&src), "--target", p(&tgt), "--mode", "class-aware", "--out", p(&s1)];
    args.extend(short);
    let o = run(&args);
    assert!(o.status.success(), "{}", text(&o));
    let csv = fs::read_to_string(d("s1").join("loss_history.csv")).unwrap();
    assert!(csv.starts_with("epoch,L_F,L_dis,L_p\n"), "{csv}");
    assert_eq!(csv.lines().count(), 4);

    let o = run(&["pseudo-label", "--checkpoint", p(&d("s1")), "--target", p(&d("tgt")), "--out", p(&d("pl"))]);
    assert!(o.status.success(), "{}", text(&o));

    let mut args = vec!["train-stage2", "--checkpoint", p(&s1), "--target", p(&tgt), "--pseudo", p(&pl), "--out", p(&s2)];
    args.extend(short);
    let o = run(&args);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(manifest(&d("s2")).command, "train-stage2");

    // a stage-2 checkpoint cannot seed another stage 2
    let o = run(&["train-stage2", "--checkpoint", p(&d("s2")), "--target", p(&d("tgt")), "--pseudo", p(&d("pl")), "--out", p(&d("s3"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = run(&["eval", "--gt", p(&d("test")), "--checkpoint", p(&d("s2")), "--out", p(&d("ev"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(d("ev").join("predictions/s00002.instances.caplt").exists());
    let o = run(&["eval", "--gt", p(&d("test")), "--pred", p(&d("ev").join("predictions")), "--out", p(&d("ev2"))]);
    assert!(o.status.success(), "{}", text(&o));
    assert_eq!(fs::read(d("ev").join("aggregate.json")).unwrap(), fs::read(d("ev2").join("aggregate.json")).unwrap());
}

#[test]
fn pipeline_skip_stage2_has_baseline_and_stage1_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(&[
        "pipeline", "--seed", "3", "--n-train", "3", "--n-test", "2", "--size", "32", "--warm-epochs", "1", "--epochs", "1",
        "--skip-stage2", "--out", p(dir.path()),
    ]);
    assert!(o.status.success(), "{}", text(&o));
    let table = fs::read_to_string(dir.path().join("comparison.txt")).unwrap();
    let rows: Vec<_> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(rows, ["source-only", "class-agnostic", "class-aware"]);
    assert!(!dir.path().join("stage-2").exists());
    let m = manifest(dir.path());
    assert_eq!((m.command.as_str(), m.seed), ("pipeline", Some(3)));
    assert_eq!(m.config["skip_stage2"], true);
}
