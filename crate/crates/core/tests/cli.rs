use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_convstruct"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn synth(dir: &Path, n: &str, seed: &str) {
    let o = run(dir, &["synth", "--out", "corpus.jsonl", "--n-conversations", n, "--seed", seed]);
    assert!(o.status.success(), "{}", stderr(&o));
}

#[test]
fn usage_errors_exit_with_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["eval", "--bogus"]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(run(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(run(dir.path(), &["gradcheck", "--loss", "hinge"]).status.code(), Some(1));
}

#[test]
fn eval_of_gold_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "5", "1");
    let o = run(
        dir.path(),
        &["eval", "--pred", "corpus.jsonl", "--gold", "corpus.jsonl", "--mode", "reddit", "--out", "report.json"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("report.json")).unwrap()).unwrap();
    assert_eq!(report["graph_acc"], 1.0);
    assert_eq!(report["conv_acc"], 1.0);
    assert!(stdout(&o).contains("graph"));

    let wrong_mode = run(dir.path(), &["eval", "--pred", "corpus.jsonl", "--gold", "corpus.jsonl", "--mode", "irc"]);
    assert_eq!(wrong_mode.status.code(), Some(2));
}

#[test]
fn data_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.jsonl"), "{\"conv_id\": 3}\n").unwrap();
    let o = run(dir.path(), &["stats", "--input", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 1"), "{}", stderr(&o));
    let o = run(dir.path(), &["stats", "--input", "missing.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn stats_and_split() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "20", "2");
    let o = run(dir.path(), &["stats", "--input", "corpus.jsonl", "--json", "stats.json"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("conversations     20"));
    let o = run(dir.path(), &["build-corpus", "--input", "corpus.jsonl", "--out-dir", "split", "--seed", "4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = |f: &str| std::fs::read_to_string(dir.path().join("split").join(f)).unwrap().lines().count();
    assert_eq!((lines("train.jsonl"), lines("dev.jsonl"), lines("test.jsonl")), (16, 2, 2));
}

#[test]
fn config_precedence_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("synth.toml"), "n_conversations = 7\nambiguity = 0.2\nseed = 5\n").unwrap();
    let o = run(dir.path(), &["synth", "--config", "synth.toml", "--seed", "9", "--out", "c.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let err = stderr(&o);
    assert!(err.contains("config n_conversations = 7 (file)"), "{err}");
    assert!(err.contains("config seed = 9 (flag)"), "{err}");
    assert!(err.contains("config n_utterances = 12 (default)"), "{err}");
    let text = std::fs::read_to_string(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(text.lines().count(), 7);

    std::fs::write(dir.path().join("typo.toml"), "n_conversation = 7\n").unwrap();
    let o = run(dir.path(), &["synth", "--config", "typo.toml", "--out", "d.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(!dir.path().join("d.jsonl").exists());
}

#[test]
fn diverged_training_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "6", "3");
    let o = run(
        dir.path(),
        &[
            "train", "--train", "corpus.jsonl", "--dev", "corpus.jsonl", "--out", "m.ckpt", "--max-tokens", "8",
            "--stage1-lr", "1e300", "--stage1-epochs", "3",
        ],
    );
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(!dir.path().join("m.ckpt").exists());
}

#[test]
fn gradcheck_passes() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--out", "g.json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(stdout(&o).matches("pass").count(), 2);
}

#[test]
fn predict_first_decode() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), "4", "6");
    let o = run(dir.path(), &["decode", "--predict-first", "--input", "corpus.jsonl", "--out", "p.jsonl"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let o = run(dir.path(), &["eval", "--pred", "p.jsonl", "--gold", "corpus.jsonl", "--out", "r.json"]);
    assert!(o.status.success());
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(dir.path().join("r.json")).unwrap()).unwrap();
    let acc = report["graph_acc"].as_f64().unwrap();
    assert!(acc > 0.0 && acc < 1.0, "{acc}");
}

#[test]
fn ablate_ranks_ancestor_above_no_mask() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    let o = run(p, &["synth", "--out", "corpus.jsonl", "--n-conversations", "100", "--seed", "7"]);
    assert!(o.status.success());
    let o = run(p, &["build-corpus", "--input", "corpus.jsonl", "--out-dir", ".", "--split", "0.6,0.2,0.2", "--seed", "7"]);
    assert!(o.status.success());
    let o = run(
        p,
        &[
            "ablate", "--train", "train.jsonl", "--dev", "dev.jsonl", "--test", "test.jsonl", "--masks", "ancestor,none",
            "--out", "ablation.csv", "--max-tokens", "8", "--dropout", "0", "--stage1-lr", "3e-3", "--stage2-lr", "1e-4",
            "--stage1-epochs", "8", "--stage2-epochs", "2", "--seed", "1",
        ],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = std::fs::read_to_string(p.join("ablation.csv")).unwrap();
    let rows: Vec<(&str, f64)> = csv
        .lines()
        .skip(1)
        .map(|l| {
            let mut f = l.split(',');
            (f.next().unwrap(), f.next().unwrap().parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 2, "{csv}");
    assert_eq!((rows[0].0, rows[1].0), ("ancestor", "none"));
    assert!(rows[0].1 > rows[1].1, "{csv}");
}
