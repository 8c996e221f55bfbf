use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};

use seedsmith_core::model::train::read_metrics_csv;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_seedsmith"))
}

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn help_exits_zero_and_usage_errors_exit_one() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["pairs", "--help"])), 0);
    let bad = run(&["pairs", "--no-such-flag"]);
    assert_eq!(code(&bad), 1);
    assert!(String::from_utf8_lossy(&bad.stderr).contains("--no-such-flag"));
    assert_eq!(code(&run(&["frobnicate"])), 1);
}

#[test]
fn config_errors_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = run(&["prepare", "--config", s(&cfg), "--workdir", s(dir.path())]);
    assert_eq!(code(&out), 1, "{}", String::from_utf8_lossy(&out.stderr));

    fs::write(&cfg, "rng_seed = 1\n").unwrap();
    let out = run(&["prepare", "--config", s(&cfg), "--workdir", s(dir.path())]);
    assert_eq!(code(&out), 1, "no corpus configured");
}

#[test]
fn missing_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.txt");
    let out = run(&["pairs", "--input", s(&missing), "--workdir", s(dir.path())]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let out = run(&[
        "tally",
        "--votes",
        s(&missing),
        "--truth",
        s(&missing),
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn toy_pipeline_writes_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let out = run(&["pipeline", "--config", s(&config("toy.cfg")), "--workdir", s(wd)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for name in [
        "train.txt",
        "dev.txt",
        "test.txt",
        "pairs.train.tsv",
        "vocab.bpe",
        "model.ckpt",
        "metrics.csv",
        "test.k4.tsv",
        "gen.k4.jsonl",
        "report.txt",
        "report.json",
    ] {
        assert!(wd.join(name).is_file(), "{name} missing");
    }
    for name in ["pairs.train.tsv", "vocab.bpe", "model.ckpt", "gen.k4.jsonl"] {
        let meta = fs::read_to_string(wd.join(format!("{name}.meta"))).unwrap();
        let v: serde_json::Value = serde_json::from_str(&meta).unwrap();
        assert_eq!(v["config"]["rng_seed"], "7", "{name}");
    }
    let report = fs::read_to_string(wd.join("report.txt")).unwrap();
    assert!(report.contains("Perfect"), "{report}");

    // Over a memorization run, 10-epoch window means never go up until the
    // loss reaches the floor, where Adam noise of about 1e-2 takes over.
    let metrics = read_metrics_csv(&wd.join("metrics.csv")).unwrap();
    let windows: Vec<f64> = metrics
        .chunks_exact(10)
        .map(|c| c.iter().map(|r| r.loss).sum::<f64>() / 10.0)
        .collect();
    assert!(windows.len() >= 2);
    const FLOOR: f64 = 0.02;
    assert!(
        windows.windows(2).all(|w| w[1] <= w[0] || w[0].max(w[1]) < FLOOR),
        "{windows:?}"
    );
    assert!(windows.last().unwrap() < &FLOOR);
}

#[test]
fn generate_reports_bad_lines_without_aborting() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let cfg = config("smoke.cfg");
    for args in [
        vec!["prepare", "--config", s(&cfg), "--demo-corpus", "200", "--workdir", s(wd)],
        vec!["pairs", "--config", s(&cfg), "--workdir", s(wd)],
        vec!["bpe-train", "--config", s(&cfg), "--workdir", s(wd)],
        vec!["train", "--config", s(&cfg), "--workdir", s(wd)],
    ] {
        let out = run(&args);
        assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let inputs = wd.join("inputs.txt");
    fs::write(&inputs, b"wagon __ river\n\xff\xfe __ cart\nhorse\n").unwrap();
    let gen = wd.join("gen.jsonl");
    let out = run(&[
        "generate",
        "--config",
        s(&cfg),
        "--workdir",
        s(wd),
        "--inputs",
        s(&inputs),
        "--out",
        s(&gen),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let rows: Vec<serde_json::Value> = fs::read_to_string(&gen)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[0]["error"].is_null());
    assert!(!rows[1]["error"].is_null(), "invalid UTF-8 should carry an error");
    assert!(rows[2]["error"].is_null());
}

#[test]
fn judging_resumes_where_it_stopped() {
    let dir = tempfile::tempdir().unwrap();
    let wd = dir.path();
    let pairs = wd.join("blind.jsonl");
    let truth = wd.join("truth.jsonl");
    let gen = wd.join("gen.jsonl");
    let refs = wd.join("refs.txt");
    let mut g = String::new();
    let mut r = String::new();
    for i in 0..6 {
        g.push_str(&format!(
            "{{\"input\":\"x\",\"output\":\"the cart number {i} rolled on .\",\"score\":-1.0}}\n"
        ));
        r.push_str(&format!("a horse number {i} ran away .\n"));
    }
    fs::write(&gen, g).unwrap();
    fs::write(&refs, r).unwrap();
    let out = run(&[
        "pairs-select",
        "--generations",
        s(&gen),
        "--references",
        s(&refs),
        "--mode",
        "cross",
        "--num-pairs",
        "3",
        "--out-pairs",
        s(&pairs),
        "--out-truth",
        s(&truth),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));

    let votes = wd.join("votes.csv");
    let judge = |answers: &str| {
        let mut child = bin()
            .args(["judge", "--pairs", s(&pairs), "--judge-id", "j1", "--votes", s(&votes)])
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .unwrap();
        child.stdin.take().unwrap().write_all(answers.as_bytes()).unwrap();
        let out = child.wait_with_output().unwrap();
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        String::from_utf8(out.stdout).unwrap()
    };
    // "x" is rejected and asked again; input ends after two votes.
    let first = judge("a\nx\nb\n");
    assert!(first.contains("[1/3]"));
    assert!(first.contains("Please answer"));
    let second = judge("c\n");
    assert!(second.contains("[1/1]"), "{second}");

    let out = run(&["tally", "--votes", s(&votes), "--truth", s(&truth)]);
    assert_eq!(code(&out), 0);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("judges          1"), "{text}");
    assert!(text.contains("scored pairs    3"), "{text}");
}
