//! End-to-end tests of the `soclm` command-line interface: the flag surface,
//! exit codes, artifact layout, and byte-level reproducibility.

use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

/// Override set that shrinks the default world enough for fast CLI runs.
fn micro_sets(seed: u64) -> Vec<String> {
    [
        format!("seed={seed}"),
        "world.n_users=16".into(),
        "world.n_tweets=48".into(),
        "world.edges_per_user=8".into(),
        "twhin.epochs=3".into(),
        "pretrain.stage1.steps=30".into(),
        "pretrain.stage2.steps=20".into(),
        "eval.engagement.epochs=2".into(),
        "eval.hits.k=2".into(),
        "eval.hits.n_candidates=5".into(),
        "eval.finetune.epochs=1".into(),
        "eval.sweep.budgets=[2,4]".into(),
        "eval.sweep.n_runs=2".into(),
    ]
    .into_iter()
    .collect()
}

fn run_soclm(args: &[&str], sets: &[String]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_soclm"));
    cmd.args(args);
    for s in sets {
        cmd.arg("--set").arg(s);
    }
    cmd.output().expect("soclm binary runs")
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

#[test]
fn all_runs_end_to_end_and_writes_artifacts() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let out = run_soclm(&["all", "--out-dir", out_dir], &micro_sets(9));
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));

    // One "wrote <manifest>" line per stage plus the combined `all` manifest.
    let stdout = stdout_of(&out);
    let wrote: Vec<&str> = stdout.lines().filter(|l| l.starts_with("wrote ")).collect();
    assert_eq!(wrote.len(), 10, "stdout: {stdout}");
    assert!(stdout.contains("manifests/all.json"), "stdout: {stdout}");

    for rel in [
        "world/graph.tsv",
        "world/corpus.tsv",
        "world/labels.tsv",
        "world/records.bin",
        "world/records.bin.ids",
        "twhin/users.emb",
        "twhin/tweets.emb",
        "twhin/losses.csv",
        "index/index.bin",
        "index/pairs.tsv",
        "pretrain/vocab.tsv",
        "pretrain/stage1.ckpt",
        "pretrain/stage2.ckpt",
        "eval/engagement.json",
        "eval/hashtag.json",
        "eval/sweep.csv",
        "eval/metrics.json",
        "manifests/gen.json",
        "manifests/all.json",
    ] {
        assert!(
            dir.path().join(rel).is_file(),
            "missing artifact {rel} after `all`"
        );
    }

    // The combined metrics report is a JSON array whose records carry the
    // full documented key set.
    let text = std::fs::read_to_string(dir.path().join("eval/metrics.json")).unwrap();
    let records: Vec<serde_json::Value> = serde_json::from_str(&text).unwrap();
    assert!(!records.is_empty());
    for rec in &records {
        let obj = rec.as_object().unwrap();
        for key in ["task", "pooling", "seed", "metric_name", "value", "n_runs", "median"] {
            assert!(obj.contains_key(key), "metric record lacks `{key}`: {rec}");
        }
    }
}

#[test]
fn deterministic_reruns_write_identical_metrics() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    for dir in [&a, &b] {
        let out = run_soclm(
            &["all", "--out-dir", dir.path().to_str().unwrap()],
            &micro_sets(21),
        );
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }
    let read = |d: &TempDir, rel: &str| std::fs::read(d.path().join(rel)).unwrap();
    for rel in ["eval/metrics.json", "index/pairs.tsv", "pretrain/stage2.ckpt"] {
        assert_eq!(read(&a, rel), read(&b, rel), "{rel} differs between runs");
    }
}

#[test]
fn missing_upstream_artifacts_name_the_producing_stage() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();
    let sets = micro_sets(5);

    for (cmd, missing_stage) in [
        ("embed-graph", "gen"),
        ("mine-pairs", "build-index"),
        ("pretrain2", "pretrain1"),
        ("eval-engagement", "pretrain2"),
    ] {
        let out = run_soclm(&[cmd, "--out-dir", out_dir], &sets);
        assert_eq!(out.status.code(), Some(1), "{cmd} should fail on empty dir");
        let err = stderr_of(&out);
        assert!(
            err.contains(&format!("`{missing_stage}`")),
            "{cmd} stderr should name {missing_stage}: {err}"
        );
    }

    // With the corpus and stage-1 checkpoint present but no mined pairs,
    // `pretrain2` names the pair-mining stage.
    for cmd in ["gen", "pretrain1"] {
        let out = run_soclm(&[cmd, "--out-dir", out_dir], &sets);
        assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    }
    let out = run_soclm(&["pretrain2", "--out-dir", out_dir], &sets);
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("`mine-pairs`"), "stderr: {err}");
}

#[test]
fn config_validation_failures_exit_1_with_the_offending_path() {
    let dir = TempDir::new().unwrap();
    let out_dir = dir.path().to_str().unwrap();

    // Semantic validation failure inside a block.
    let out = run_soclm(
        &["gen", "--out-dir", out_dir],
        &["world.n_topics=0".to_string()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("world"), "stderr: {}", stderr_of(&out));

    // Unknown key caught at deserialization, reported with its path.
    let out = run_soclm(
        &["gen", "--out-dir", out_dir],
        &["twhin.learning_rate=1".to_string()],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr_of(&out).contains("twhin"), "stderr: {}", stderr_of(&out));
}

#[test]
fn unreadable_or_malformed_configs_exit_2() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("absent.json");
    let out = run_soclm(&["gen", "--config", missing.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(!stderr_of(&out).is_empty());

    let malformed = dir.path().join("broken.json");
    std::fs::write(&malformed, "{ not json").unwrap();
    let out = run_soclm(&["gen", "--config", malformed.to_str().unwrap()], &[]);
    assert_eq!(out.status.code(), Some(2), "stderr: {}", stderr_of(&out));
    assert!(
        stderr_of(&out).contains("broken.json"),
        "stderr: {}",
        stderr_of(&out)
    );
}

#[test]
fn bad_usage_exits_1_and_help_exits_0() {
    let out = run_soclm(&["frobnicate"], &[]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!stderr_of(&out).is_empty());

    let out = run_soclm(&["--help"], &[]);
    assert_eq!(out.status.code(), Some(0));
    let stdout = stdout_of(&out);
    assert!(stdout.contains("Usage"), "stdout: {stdout}");
    for sub in ["gen", "embed-graph", "mine-pairs", "pretrain1", "all"] {
        assert!(stdout.contains(sub), "help should list `{sub}`: {stdout}");
    }
}

#[test]
fn config_file_plus_overrides_round_trip_through_a_run() {
    let dir = TempDir::new().unwrap();
    let out_root = dir.path().join("runs");
    let cfg_path = dir.path().join("config.json");

    // Start from the default config, shrink it, and point it at a directory
    // that only the config names (no --out-dir flag).
    let mut sets = micro_sets(33);
    sets.push(format!(
        "out_dir={}",
        serde_json::to_string(out_root.to_str().unwrap()).unwrap()
    ));
    // Materialize a config file by asking serde for the default and editing.
    let out = run_soclm(&["gen"], &sets);
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(out_root.join("world/graph.tsv").is_file());

    // Now write an explicit config file and run with a --set on top of it.
    let cfg = serde_json::json!({
        "seed": 33,
        "out_dir": out_root.to_str().unwrap(),
        "world": {"n_users": 16, "n_tweets": 48, "edges_per_user": 8},
        "twhin": {"epochs": 2}
    });
    std::fs::write(&cfg_path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    let out = run_soclm(
        &["embed-graph", "--config", cfg_path.to_str().unwrap()],
        &["twhin.dim=16".to_string()],
    );
    assert_eq!(out.status.code(), Some(0), "stderr: {}", stderr_of(&out));
    assert!(out_root.join("twhin/tweets.emb").is_file());

    let emb = soclm::embed::io::load_embeddings(Path::new(
        out_root.join("twhin/tweets.emb").to_str().unwrap(),
    ))
    .unwrap();
    assert_eq!(emb.dim, 16, "--set twhin.dim should override the config file");
}
