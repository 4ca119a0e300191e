use std::path::Path;
use std::process::{Command, Output};

fn gem(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gem"))
        .args(args)
        .current_dir(dir)
        .env_remove("GEM_SEED")
        .output()
        .unwrap()
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = gem(dir, args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(gem(dir.path(), &["--help"]).status.code(), Some(0));
    assert_eq!(gem(dir.path(), &["--version"]).status.code(), Some(0));
    assert_eq!(gem(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(gem(dir.path(), &["mask-dump", "--m", "x", "--k", "1", "--n", "1"]).status.code(), Some(1));
    let missing = gem(dir.path(), &["build-vocab", "--corpus", "nope.txt", "--out", "v.json"]);
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.txt"));
    assert_eq!(gem(dir.path(), &["mask-dump", "--m", "0", "--k", "0", "--n", "0"]).status.code(), Some(2));
}

#[test]
fn mask_dump_draws_the_bottleneck() {
    let dir = tempfile::tempdir().unwrap();
    let text = ok(dir.path(), &["mask-dump", "--m", "2", "--k", "1", "--n", "2"]);
    let rows: Vec<&str> = text.lines().filter(|l| !l.trim().is_empty()).collect();
    assert!(rows.len() >= 5);
    assert_eq!(text, ok(dir.path(), &["mask-dump", "--m", "2", "--k", "1", "--n", "2"]));
}

#[test]
fn seed_flag_and_env_agree() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-corpus", "--out", "a.txt", "--distinct", "5", "--rows", "10", "--held", "0", "--seed", "9"]);
    let out = Command::new(env!("CARGO_BIN_EXE_gem"))
        .args(["gen-corpus", "--out", "b.txt", "--distinct", "5", "--rows", "10", "--held", "0"])
        .current_dir(dir.path())
        .env("GEM_SEED", "9")
        .output()
        .unwrap();
    assert!(out.status.success());
    ok(dir.path(), &["gen-corpus", "--out", "c.txt", "--distinct", "5", "--rows", "10", "--held", "0"]);
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.txt"), read("b.txt"));
    assert_ne!(read("a.txt"), read("c.txt"));
    assert_eq!(String::from_utf8(read("a.txt")).unwrap().lines().count(), 10);
}

#[test]
fn train_embed_eval_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("cfg.json"),
        r#"{"batch_size": 4, "max_seq_len": 64, "switch_step": 3, "total_steps": 6,
            "model": {"n_layers": 1, "n_heads": 2, "d_model": 16, "d_ff": 32, "max_positions": 64}}"#,
    )
    .unwrap();
    ok(d, &["gen-corpus", "--out", "c.txt", "--held-out", "h.txt", "--distinct", "20", "--rows", "40", "--held", "25"]);
    ok(d, &["train", "--corpus", "c.txt", "--config", "cfg.json", "--ckpt", "m.ckpt", "--total-steps", "4", "--k", "2"]);

    let log = std::fs::read_to_string(d.join("m.csv")).unwrap();
    assert!(log.contains("\"total_steps\":4"));
    assert!(log.contains("\"k_specials\":2"));
    assert_eq!(log.lines().filter(|l| l.starts_with(|c: char| c.is_ascii_digit())).count(), 4);

    ok(d, &["embed", "--ckpt", "m.ckpt", "--input", "h.txt", "--out", "e.jsonl", "--k", "2", "--pooling", "concat"]);
    let lines: Vec<serde_json::Value> = std::fs::read_to_string(d.join("e.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(lines.len(), 25);
    assert_eq!(lines[0]["dim"], 32);
    assert_eq!(lines[0]["vector"].as_array().unwrap().len(), 32);
    assert!(d.join("e.jsonl.meta.json").exists());

    ok(d, &["eval", "--ckpt", "m.ckpt", "--corpus", "h.txt", "--suite", "retrieval", "--out", "r.csv", "--baseline"]);
    let csv = std::fs::read_to_string(d.join("r.csv")).unwrap();
    let mut it = csv.lines();
    assert!(it.next().unwrap().starts_with("# config: "));
    assert_eq!(it.next().unwrap(), "suite,metric,value,seed,ckpt");
    let metrics: Vec<&str> = it.map(|l| l.split(',').nth(1).unwrap()).collect();
    assert_eq!(metrics, ["recall_at_1", "ndcg_at_10"]);

    let rec = ok(d, &["reconstruct", "--ckpt", "m.ckpt", "--text", "hello there", "--max-len", "3"]);
    assert!(rec.contains("accuracy:"));

    let bad = gem(d, &["train", "--corpus", "c.txt", "--config", "cfg.json", "--ckpt", "n.ckpt", "--p-raw", "1.5"]);
    assert_eq!(bad.status.code(), Some(2));
}
