use std::path::Path;
use std::process::{Command, Output};

fn meshquery(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_meshquery"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

#[test]
fn help_exits_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshquery(dir.path(), &["--help"]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("ingest"));
}

#[test]
fn unknown_flag_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(
        meshquery(dir.path(), &["ingest", "--bogus"]).status.code(),
        Some(2)
    );
}

#[test]
fn missing_input_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = meshquery(
        dir.path(),
        &["ingest", "--events", "nope.tsv", "--out", "c"],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("error[usage]"));
}

#[test]
fn unknown_config_key_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("c.toml"),
        "version = 1\n[train]\nlerning_rate = 0.1\n",
    )
    .unwrap();
    let out = meshquery(
        dir.path(),
        &[
            "--config",
            "c.toml",
            "synth",
            "--out",
            "d",
            "--sessions",
            "5",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn malformed_events_fail_with_line_number() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("e.tsv"),
        "u1\t100\tquery\tdata engineer\nu1\tsoon\tquery\tx\n",
    )
    .unwrap();
    let out = meshquery(dir.path(), &["ingest", "--events", "e.tsv", "--out", "c"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains('2'));
}

#[test]
fn small_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    std::fs::write(
        p.join("run.toml"),
        "version = 1\n[ingest]\nvocab_size = 300\n[model]\nd_model = 16\nn_heads = 2\nn_enc_layers = 1\nn_dec_layers = 1\nd_ff = 32\n[train]\nmax_steps = 5\neval_interval = 0\n[suggest]\nwidth = 2\nk = 2\nmax_len = 6\n",
    )
    .unwrap();
    let steps: [&[&str]; 7] = [
        &["synth", "--out", "d", "--sessions", "120"],
        &["ingest", "--events", "d/events.tsv", "--out", "c"],
        &["train", "--corpus", "c", "--out", "m"],
        &[
            "suggest",
            "--model",
            "m/model.json",
            "--vocab",
            "c/vocab.txt",
            "--sessions",
            "c/test.jsonl",
            "--out",
            "s.tsv",
            "--export-attention",
            "att.tsv",
        ],
        &["mps", "build", "--corpus", "c", "--out", "pool.tsv"],
        &[
            "mps",
            "suggest",
            "--pool",
            "pool.tsv",
            "--sessions",
            "c/test.jsonl",
            "--out",
            "mps.tsv",
        ],
        &[
            "evaluate",
            "--sessions",
            "c/test.jsonl",
            "--suggestions",
            "s.tsv",
            "--out",
            "r/mesh",
            "--embedder",
            "onehot",
        ],
    ];
    for s in steps {
        let mut args = vec!["--config", "run.toml"];
        args.extend_from_slice(s);
        let out = meshquery(p, &args);
        assert!(
            out.status.success(),
            "{s:?}: {}",
            String::from_utf8_lossy(&out.stderr)
        );
    }
    let out = meshquery(
        p,
        &[
            "--config",
            "run.toml",
            "evaluate",
            "--sessions",
            "c/test.jsonl",
            "--suggestions",
            "mps.tsv",
            "--out",
            "r/mps",
            "--embedder",
            "onehot",
        ],
    );
    assert!(out.status.success());
    let out = meshquery(
        p,
        &[
            "--config",
            "run.toml",
            "analyze",
            "--reports",
            "r",
            "--out",
            "a",
            "--sessions",
            "c/test.jsonl",
        ],
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in [
        "a/length_buckets.tsv",
        "a/win_tie_loss.tsv",
        "a/click_contingency.tsv",
        "r/mesh/aggregate.txt",
        "att.tsv",
    ] {
        assert!(p.join(f).exists(), "{f} missing");
    }
    let agg = std::fs::read_to_string(p.join("r/mesh/aggregate.txt")).unwrap();
    assert!(agg.contains("wer@1="));
}
