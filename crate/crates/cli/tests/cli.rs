use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use serde_json::Value;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_groundcomm"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn groundcomm")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "groundcomm {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// A small dataset and a briefly trained checkpoint, shared by the tests.
struct Fixture {
    _dir: tempfile::TempDir,
    dataset: PathBuf,
    run: PathBuf,
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let data = dir.path().join("data");
        ok(&["collect", "--env", "pp_v0", "--episodes", "20", "--out", s(&data)]);
        let dataset = data.join("grounding.jsonl");
        let run = dir.path().join("train");
        ok(&[
            "train", "--env", "pp_v0", "--variant", "langground", "--lambda", "1", "--grounding", s(&dataset),
            "--epochs", "3", "--set", "batch_steps=60", "--set", "hidden=16", "--out", s(&run),
        ]);
        Fixture { _dir: dir, dataset, run }
    })
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

#[test]
fn langground_without_grounding_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--variant", "langground", "--lambda", "1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--grounding"));
}

#[test]
fn unknown_keys_and_bad_flags_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(&["train", "--variant", "ic3net", "--set", "learning_rate=0.1", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("learning_rate"));
    assert_eq!(run(&["train", "--env", "pp_v9"]).status.code(), Some(2));
    assert_eq!(run(&["train", "--variant", "ic3net", "--lambda", "1", "--out", s(dir.path())]).status.code(), Some(2));
    assert_eq!(run(&["train", "--hold-out", "1;2"]).status.code(), Some(2));
}

#[test]
fn help_lists_every_subcommand_and_flag() {
    let top = String::from_utf8(ok(&["--help"]).stdout).unwrap();
    for sub in ["train", "collect", "eval", "zeroshot", "adhoc", "analyze", "serve"] {
        assert!(top.contains(sub), "{sub}");
    }
    let train = String::from_utf8(ok(&["train", "--help"]).stdout).unwrap();
    for flag in [
        "--env", "--variant", "--lambda", "--grounding", "--grounding-fraction", "--hold-out", "--no-gating", "--seed",
        "--epochs", "--preset", "--config", "--set", "--out",
    ] {
        assert!(train.contains(flag), "{flag}");
    }
}

#[test]
fn collect_writes_dataset_and_config() {
    let f = fixture();
    let data = f.dataset.parent().unwrap();
    assert!(read(&data.join("config.toml")).contains("episodes = 20"));
    let lines = read(&f.dataset).lines().count();
    let report: Value = serde_json::from_str(&read(&data.join("collect.json"))).unwrap();
    assert_eq!(report["entries"].as_u64().unwrap() as usize, lines);
}

#[test]
fn train_rerun_from_resolved_config_is_bit_identical() {
    let f = fixture();
    let again = f.run.parent().unwrap().join("train_again");
    ok(&["train", "--config", s(&f.run.join("config.toml")), "--out", s(&again)]);
    assert_eq!(read(&f.run.join("metrics.csv")), read(&again.join("metrics.csv")));
    assert_eq!(read(&f.run.join("config.toml")), read(&again.join("config.toml")));
    assert_eq!(std::fs::read(f.run.join("checkpoint.bin")).unwrap(), std::fs::read(again.join("checkpoint.bin")).unwrap());
    assert_eq!(read(&f.run.join("metrics.csv")).lines().count(), 4);
}

#[test]
fn ic3net_matches_langground_at_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    let common = ["--env", "pp_v0", "--epochs", "2", "--set", "batch_steps=40", "--set", "hidden=8"];
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&[&["train", "--variant", "ic3net", "--out", s(&a)][..], &common].concat());
    ok(&[&["train", "--variant", "langground", "--lambda", "0", "--out", s(&b)][..], &common].concat());
    assert_eq!(read(&a.join("metrics.csv")), read(&b.join("metrics.csv")));
}

#[test]
fn eval_is_reproducible_and_writes_every_file() {
    let f = fixture();
    let ck = f.run.join("checkpoint.bin");
    let root = f.run.parent().unwrap();
    let (a, b) = (root.join("eval_a"), root.join("eval_b"));
    for out in [&a, &b] {
        ok(&["eval", "--checkpoint", s(&ck), "--episodes", "2", "--seeds", "2", "--grounding", s(&f.dataset), "--out", s(out)]);
    }
    for file in ["report.json", "report.csv", "clusters.csv", "zero_shot.csv", "comm_space.svg", "traces.jsonl", "config.toml"] {
        assert_eq!(read(&a.join(file)), read(&b.join(file)), "{file}");
    }
    let report: Value = serde_json::from_str(&read(&a.join("report.json"))).unwrap();
    assert_eq!(report["performance"]["rows"].as_array().unwrap().len(), 4);
    assert_eq!(report["variant"], "langground+langground+langground");
    assert!(read(&a.join("report.csv")).starts_with("metric,mean,sd,n\nepisode_length,"));
    // Re-running from the written config reproduces the metrics.
    let c = root.join("eval_c");
    ok(&["eval", "--config", s(&a.join("config.toml")), "--out", s(&c)]);
    assert_eq!(read(&a.join("report.csv")), read(&c.join("report.csv")));
}

#[test]
fn adhoc_mixed_team_plays_24_episodes() {
    let f = fixture();
    let ck = f.run.join("checkpoint.bin");
    let out = f.run.parent().unwrap().join("adhoc");
    let team = format!("{0},{0},oracle", s(&ck));
    ok(&["adhoc", "--team", &team, "--episodes", "8", "--seeds", "3", "--grounding", s(&f.dataset), "--out", s(&out)]);
    let report: Value = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert_eq!(report["performance"]["rows"].as_array().unwrap().len(), 24);
    assert_eq!(report["variant"], "langground+langground+oracle");

    // Mixed teams need a dataset for the bridge; wrong team sizes are rejected.
    let bad = f.run.parent().unwrap().join("adhoc_bad");
    let mut args = vec!["adhoc", "--team", &team, "--out", s(&bad), "--set", "grounding=/nonexistent"];
    assert_ne!(run(&args).status.code(), Some(0));
    args = vec!["adhoc", "--team", "oracle,oracle", "--env", "pp_v0", "--out", s(&bad)];
    assert_eq!(run(&args).status.code(), Some(2));
    ok(&["adhoc", "--team", "oracle,oracle,oracle", "--env", "pp_v0", "--episodes", "3", "--seeds", "1", "--out", s(&bad)]);
}

#[test]
fn analyze_recomputes_message_metrics_from_traces() {
    let f = fixture();
    let ck = f.run.join("checkpoint.bin");
    let root = f.run.parent().unwrap();
    let ev = root.join("eval_for_analyze");
    ok(&["eval", "--checkpoint", s(&ck), "--episodes", "3", "--seeds", "1", "--grounding", s(&f.dataset), "--out", s(&ev)]);
    let out = root.join("analyze");
    ok(&[
        "analyze", "--traces", s(&ev.join("traces.jsonl")), "--env", "pp_v0", "--grounding", s(&f.dataset), "--out",
        s(&out),
    ]);
    let a: Value = serde_json::from_str(&read(&ev.join("report.json"))).unwrap();
    let b: Value = serde_json::from_str(&read(&out.join("report.json"))).unwrap();
    assert_eq!(a["topographic"], b["topographic"]);
    assert_eq!(a["alignment"], b["alignment"]);
    assert_eq!(a["clusters"], b["clusters"]);
}

#[test]
fn zeroshot_reports_each_held_out_cell() {
    let f = fixture();
    let root = f.run.parent().unwrap();
    let run_dir = root.join("train_holdout");
    ok(&[
        "train", "--env", "pp_v0", "--variant", "langground", "--grounding", s(&f.dataset), "--hold-out",
        "1,1;1,3;3,1;3,3", "--epochs", "1", "--set", "batch_steps=40", "--set", "hidden=8", "--out", s(&run_dir),
    ]);
    assert!(read(&run_dir.join("config.toml")).contains("held_out_prey_spawns = [[1, 1], [1, 3], [3, 1], [3, 3]]"));
    let out = root.join("zeroshot");
    ok(&["zeroshot", "--checkpoint", s(&run_dir.join("checkpoint.bin")), "--episodes", "2", "--seeds", "1", "--out", s(&out)]);
    let csv = read(&out.join("zero_shot.csv"));
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 4);
    assert!(rows[0].starts_with("1,1,2,"));
    // A checkpoint trained without held-out cells needs them on the command line.
    let none = run(&["zeroshot", "--checkpoint", s(&f.run.join("checkpoint.bin")), "--out", s(&root.join("zs_none"))]);
    assert_eq!(none.status.code(), Some(2));
}

#[test]
fn serve_plays_a_session_with_an_external_seat() {
    let f = fixture();
    let ck = f.run.join("checkpoint.bin");
    let out = f.run.parent().unwrap().join("serve");
    let team = format!("{0},{0},external", s(&ck));
    let mut child = bin()
        .args([
            "serve", "--team", &team, "--grounding", s(&f.dataset), "--listen", "127.0.0.1:0", "--sessions", "1",
            "--timeout-ms", "5000", "--out", s(&out),
        ])
        .stdout(Stdio::piped())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let mut stderr = BufReader::new(child.stderr.take().unwrap());
    let mut line = String::new();
    stderr.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").expect("listen line").to_string();

    let stream = TcpStream::connect(&addr).unwrap();
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut writer = stream;
    let mut observations = 0;
    loop {
        let mut l = String::new();
        if reader.read_line(&mut l).unwrap() == 0 {
            panic!("server closed before done");
        }
        let msg: Value = serde_json::from_str(&l).unwrap();
        match msg["type"].as_str().unwrap() {
            "obs" => {
                observations += 1;
                assert_eq!(msg["agent"], 2);
                assert_eq!(msg["name"], "Predator 3");
                assert!(msg["text"].as_str().unwrap().contains("You are at"));
                writeln!(writer, r#"{{"type":"act","text":"Message to team: \"holding\" Action selection: stay"}}"#).unwrap();
            }
            "done" => {
                assert_eq!(msg["rounds"].as_u64().unwrap() as usize, observations);
                break;
            }
            other => panic!("unexpected {other}: {l}"),
        }
    }
    assert!(child.wait().unwrap().success());
    assert!(out.join("s0.jsonl").exists());
    let sessions = read(&out.join("sessions.jsonl"));
    assert!(sessions.contains(r#""session":"s0""#));
}
