use std::path::Path;
use std::process::{Command, Output};
use std::time::{Duration, Instant};

const SMALL: [&str; 12] = [
    "--set",
    "generator.n_patients=400",
    "--set",
    "glove.dim=16",
    "--set",
    "glove.iterations=5",
    "--set",
    "rnn.epochs=2",
    "--set",
    "baselines.lsa_dim=10",
    "--set",
    "baselines.lda.iterations=5",
];

fn patrep(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patrep"))
        .arg("--workdir")
        .arg(workdir)
        .args(SMALL)
        .args(args)
        .env_remove("PATREP_CONFIG")
        .output()
        .expect("binary runs")
}

fn ok(workdir: &Path, args: &[&str]) -> String {
    let out = patrep(workdir, args);
    assert!(
        out.status.success(),
        "patrep {args:?} failed: {}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn generate_is_deterministic_per_seed() {
    let (a, b, c) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    ok(a.path(), &["--seed", "7", "generate"]);
    ok(b.path(), &["--seed", "7", "generate"]);
    ok(c.path(), &["--seed", "8", "generate"]);
    for f in ["cohort.jsonl", "relations.tsv"] {
        let x = std::fs::read(a.path().join(f)).unwrap();
        assert_eq!(x, std::fs::read(b.path().join(f)).unwrap(), "{f} differs between identical runs");
    }
    assert_ne!(std::fs::read(a.path().join("cohort.jsonl")).unwrap(), std::fs::read(c.path().join("cohort.jsonl")).unwrap());
}

#[test]
fn resolved_configuration_is_echoed() {
    let dir = tempfile::tempdir().unwrap();
    let stdout = ok(dir.path(), &["--seed", "3", "--set", "curves.repeats=4", "generate"]);
    assert!(stdout.starts_with("# resolved configuration"));
    assert!(stdout.contains("seed = 3"));
    assert!(stdout.contains("repeats = 4"));
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(patrep(dir.path(), &["no-such-command"]).status.code(), Some(2));
    assert_eq!(patrep(dir.path(), &["--set", "glove.nope=1", "generate"]).status.code(), Some(2));
    assert_eq!(patrep(dir.path(), &["--set", "generator.n_patients=0", "generate"]).status.code(), Some(2));
    let missing = patrep(dir.path(), &["train-glove"]);
    assert_eq!(missing.status.code(), Some(3));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("vocab.tsv"));
    assert_eq!(patrep(dir.path(), &["--config", "/nonexistent/run.conf", "generate"]).status.code(), Some(3));
}

#[test]
fn config_file_and_env_are_honoured() {
    let dir = tempfile::tempdir().unwrap();
    let conf = dir.path().join("run.conf");
    std::fs::write(&conf, "seed = 21\n[curves]\nrepeats = 2\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_patrep"))
        .args(["--workdir", dir.path().to_str().unwrap(), "--set", "curves.repeats=3", "generate"])
        .args(SMALL)
        .env("PATREP_CONFIG", &conf)
        .output()
        .unwrap();
    assert!(out.status.success());
    let stdout = String::from_utf8(out.stdout).unwrap();
    assert!(stdout.contains("seed = 21"));
    assert!(stdout.contains("repeats = 3"));
}

#[test]
fn small_end_to_end_run() {
    let start = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let w = dir.path();
    for args in [
        &["generate"][..],
        &["preprocess"],
        &["train-glove"],
        &["train-rnn"],
        &["fit-baseline", "--kind", "tfidf"],
        &["fit-baseline", "--kind", "lsa"],
        &["fit-baseline", "--kind", "lda"],
        &["represent", "--method", "ea"],
        &["represent", "--method", "tfidf"],
        &["represent", "--method", "lsa"],
        &["represent", "--method", "lda"],
        &["represent", "--method", "rnn"],
        &["represent", "--method", "wd", "--parts", "rnn,tfidf"],
    ] {
        ok(w, args);
    }
    for f in ["glove.txt", "rnn.ckpt", "rnn_trace.csv", "tfidf.json", "lsa.txt", "lda.txt", "reps/ea_glove.csv", "reps/wd_rnn_tfidf.csv"] {
        assert!(w.join(f).is_file(), "missing {f}");
    }

    ok(w, &["eval-curves", "--methods", "tfidf", "--tasks", "mortality", "--sizes", "50,100", "--repeats", "3", "--workers", "1"]);
    let curves = std::fs::read_to_string(w.join("results/curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2 * 3);
    assert!(curves.starts_with("method,task,n,repeat,seed,auroc"));

    ok(w, &["eval-curves", "--methods", "ea_glove,tfidf,wd_rnn_tfidf", "--tasks", "mortality", "--sizes", "100", "--repeats", "2"]);
    let report = ok(w, &["report"]);
    assert!(report.contains("AUROC, mortality"));
    assert!(w.join("results/curves.svg").is_file());

    let intrinsic = ok(w, &["eval-intrinsic", "--embedding", "glove"]);
    assert!(intrinsic.contains("may_treat"));
    assert!(w.join("results/relatedness_glove.csv").is_file());

    ok(w, &["--set", "notes.max_notes=200", "--set", "notes.targets=2", "eval-notes", "--method", "ea"]);
    let notes = std::fs::read_to_string(w.join("results/notes_ea_glove.csv")).unwrap();
    assert!(notes.lines().last().unwrap().starts_with("mean,"));

    assert!(start.elapsed() < Duration::from_secs(300), "small run took {:?}", start.elapsed());
}
