use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

fn faultline(cwd: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_faultline"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

const RUN: &str = "[data]\ncorpus = [\"data/corpus.log\"]\nlabels = \"data/labels.jsonl\"\n[corpus]\nsequences = 30\n[trainer]\nrl_updates_per_epoch = 5\n";

/// Temp dir holding a small generated corpus and `run.toml`.
fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("run.toml"), RUN).unwrap();
    let o = faultline(dir.path(), &["--config", "run.toml", "gen-corpus", "--out", "data"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn fitted() -> tempfile::TempDir {
    let dir = workspace();
    let o = faultline(dir.path(), &["--config", "run.toml", "fit", "--epochs", "2", "--seed", "7", "--out", "fit"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    dir
}

fn manifest_hash(dir: &Path) -> String {
    let m: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.join("manifest.json")).unwrap()).unwrap();
    m["config_hash"].as_str().unwrap().to_string()
}

#[test]
fn parse_writes_one_template_row_per_record() {
    let dir = workspace();
    let o = faultline(dir.path(), &["parse", "data/corpus.log", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = std::fs::read_to_string(dir.path().join("p/templates.jsonl")).unwrap().lines().count();
    assert_eq!(rows, 30 * 32);
    let stats: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("p/parse_stats.json")).unwrap()).unwrap();
    assert_eq!(stats["records"], 960);
    assert_eq!(stats["scales"], serde_json::json!([3, 5, 7]));
    for f in ["events.jsonl", "codebook.lidc", "config.toml", "manifest.json"] {
        assert!(dir.path().join("p").join(f).exists(), "{f}");
    }
}

#[test]
fn parse_single_scale_flag() {
    let dir = workspace();
    let o = faultline(dir.path(), &["parse", "data/corpus.log", "--scales", "3", "--out", "p"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let stats = std::fs::read_to_string(dir.path().join("p/parse_stats.json")).unwrap();
    assert!(stats.contains("\"scales\": [\n    3\n  ]"), "{stats}");
    let echo = std::fs::read_to_string(dir.path().join("p/config.toml")).unwrap();
    assert!(echo.contains("scales = [3]"), "{echo}");
}

#[test]
fn parse_bad_path_exits_one_and_names_it() {
    let dir = tempfile::tempdir().unwrap();
    let o = faultline(dir.path(), &["parse", "missing.log", "--out", "p"]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("missing.log"), "{}", stderr(&o));
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.toml"), "[trainer]\nepoch = 3\n").unwrap();
    let o = faultline(dir.path(), &["--config", "bad.toml", "gen-corpus", "--out", "x"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("epoch"), "{}", stderr(&o));
    let o = faultline(dir.path(), &["fit", "--out", "x"]);
    assert_eq!(code(&o), 2, "missing dataset: {}", stderr(&o));
    let o = faultline(dir.path(), &["bench", "--sweep", "16,32", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn toy_fit_is_fast_and_reproducible() {
    let dir = workspace();
    let start = Instant::now();
    let args = ["--config", "run.toml", "fit", "--epochs", "2", "--seed", "7", "--out"];
    let o = faultline(dir.path(), &[&args[..], &["a"]].concat());
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(start.elapsed() < Duration::from_secs(60));
    let o = faultline(dir.path(), &[&args[..], &["b"]].concat());
    assert_eq!(code(&o), 0);
    let read = |d: &str| std::fs::read(dir.path().join(d).join("history.csv")).unwrap();
    assert_eq!(read("a"), read("b"));
    let history = String::from_utf8(read("a")).unwrap();
    assert_eq!(history.lines().next().unwrap(), "epoch,l_fault,l_causal,l_rl,kl,total,val_total");
    assert_eq!(history.lines().count(), 3);
    assert_eq!(manifest_hash(&dir.path().join("a")), manifest_hash(&dir.path().join("b")));
    let summary = String::from_utf8_lossy(&o.stdout);
    assert!(summary.contains("measured in environment steps"), "{summary}");
}

#[test]
fn config_hash_tracks_config() {
    let dir = workspace();
    let run = |args: &[&str], out: &str| {
        let o = faultline(dir.path(), &[args, &["parse", "data/corpus.log", "--out", out]].concat());
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        manifest_hash(&dir.path().join(out))
    };
    let a = run(&[], "a");
    assert_eq!(a, run(&[], "b"));
    assert_ne!(a, run(&["--seed", "99"], "c"));
}

#[test]
fn simulate_writes_traces_and_pairs() {
    let dir = fitted();
    let sim = |mode: &str, out: &str| {
        let o = faultline(dir.path(), &["simulate", "--checkpoint", "fit/checkpoint.lidp", "--mode", mode, "--out", out]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        std::fs::read_to_string(dir.path().join(out).join("pairs.csv")).unwrap()
    };
    let greedy = sim("greedy", "g");
    assert_eq!(std::fs::read_dir(dir.path().join("g/traces")).unwrap().count(), 20);
    assert_eq!(greedy.lines().count(), 21);
    let sample = sim("sample", "s");
    // the baseline column and the seeds are untouched by the planner's mode
    let column = |csv: &str, i: usize| csv.lines().map(|l| l.split(',').nth(i).unwrap().to_string()).collect::<Vec<_>>();
    assert_eq!(column(&greedy, 0), column(&sample, 0));
    assert_eq!(column(&greedy, 2), column(&sample, 2));
    let o = faultline(dir.path(), &["simulate", "--checkpoint", "fit/checkpoint.lidp", "--seeds", "5", "--out", "x"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn corrupted_or_foreign_checkpoints_exit_four() {
    let dir = fitted();
    let ck = dir.path().join("fit/checkpoint.lidp");
    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[0] = b'X';
    std::fs::write(dir.path().join("bad.lidp"), &bytes).unwrap();
    let o = faultline(dir.path(), &["simulate", "--checkpoint", "bad.lidp", "--out", "x"]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));

    let mut bytes = std::fs::read(&ck).unwrap();
    bytes[4..6].copy_from_slice(&9u16.to_le_bytes());
    std::fs::write(dir.path().join("future.lidp"), &bytes).unwrap();
    let o = faultline(dir.path(), &["simulate", "--checkpoint", "future.lidp", "--out", "x"]);
    assert_eq!(code(&o), 4);
    let msg = stderr(&o);
    assert!(msg.contains("version 9") && msg.contains("expected 1"), "{msg}");
}

#[test]
fn infer_scores_labeled_sequences() {
    let dir = fitted();
    let o = faultline(dir.path(), &["--config", "run.toml", "infer", "--checkpoint", "fit/checkpoint.lidp", "--out", "inf"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = std::fs::read_to_string(dir.path().join("inf/scores.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 30);
    assert!(String::from_utf8_lossy(&o.stdout).contains("top-1"));
    let o = faultline(dir.path(), &["infer", "--checkpoint", "fit/checkpoint.lidp", "data/corpus.log", "--out", "inf2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let rows = std::fs::read_to_string(dir.path().join("inf2/scores.jsonl")).unwrap();
    assert_eq!(rows.lines().count(), 30);
}

#[test]
fn bench_rejects_small_corpus() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("b.toml"), "[bench]\nrecords = 500\n").unwrap();
    let o = faultline(dir.path(), &["--config", "b.toml", "bench", "--out", "b"]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("1000"), "{}", stderr(&o));
}
