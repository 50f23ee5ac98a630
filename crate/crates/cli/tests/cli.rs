use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use capguide::classifier::Classifier;
use capguide::lm::Lm;
use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_capguide"))
}

fn run(args: &[&str]) -> Output {
    let out = bin().args(args).output().expect("spawn capguide");
    if !out.status.success() {
        eprintln!("capguide {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) {
    let out = run(args);
    assert!(out.status.success(), "capguide {args:?} failed");
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> String {
    std::fs::read_to_string(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn json(p: &Path) -> Value {
    serde_json::from_str(&read(p)).unwrap()
}

/// Demo corpora with briefly trained models, shared by the tests below.
struct Trained {
    _dir: TempDir,
    root: PathBuf,
}

impl Trained {
    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }
}

fn trained() -> &'static Trained {
    static T: OnceLock<Trained> = OnceLock::new();
    T.get_or_init(|| {
        let dir = TempDir::new().unwrap();
        let root = dir.path().to_path_buf();
        let t = Trained { _dir: dir, root };
        ok(&["gen-corpus", "--kind", "lm", "--world", "demo", "--out", s(&t.p("lm_corpus"))]);
        ok(&["gen-corpus", "--kind", "classifier", "--world", "demo", "--size", "200", "--out", s(&t.p("clf_corpus"))]);
        ok(&["train-lm", "--corpus", s(&t.p("lm_corpus")), "--epochs", "2", "--batch-size", "16", "--out", s(&t.p("lm"))]);
        ok(&["train-classifier", "--corpus", s(&t.p("clf_corpus")), "--epochs", "2", "--out", s(&t.p("clf"))]);
        t
    })
}

#[test]
fn gen_corpus_defaults_and_determinism() {
    let dir = TempDir::new().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    ok(&["gen-corpus", "--kind", "classifier", "--out", s(&a)]);
    ok(&["gen-corpus", "--kind", "classifier", "--seed", "0", "--out", s(&b)]);
    let mut labels = (0, 0);
    for split in ["train.jsonl", "val.jsonl", "test.jsonl"] {
        let text = read(&a.join(split));
        assert_eq!(text, read(&b.join(split)), "{split} differs between identical runs");
        for line in text.lines() {
            match json_line(line)["label"].as_str().unwrap() {
                "audible" => labels.0 += 1,
                "non_audible" => labels.1 += 1,
                other => panic!("label {other}"),
            }
        }
    }
    assert_eq!(labels, (5000, 5000));
    assert_eq!(read(&a.join("vocab.txt")), read(&b.join("vocab.txt")));

    let c = dir.path().join("c");
    ok(&["gen-corpus", "--kind", "classifier", "--seed", "1", "--out", s(&c)]);
    assert_ne!(read(&a.join("train.jsonl")), read(&c.join("train.jsonl")));
}

fn json_line(line: &str) -> Value {
    serde_json::from_str(line).unwrap()
}

#[test]
fn gen_corpus_rejects_bad_requests() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("x");
    assert_eq!(code(&["gen-corpus", "--kind", "lm", "--size", "100000000", "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-corpus", "--kind", "lm", "--world", "moon", "--out", s(&out)]), 2);
    assert_eq!(code(&["gen-corpus", "--out", s(&out)]), 2);
}

#[test]
fn unknown_config_key_is_a_usage_error() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(&cfg, r#"{"epochs": 1, "learning_rate_typo": 0.1}"#).unwrap();
    let out = dir.path().join("lm");
    let args = ["train-lm", "--corpus", s_static(t.p("lm_corpus")), "--config", s(&cfg), "--out", s(&out)];
    assert_eq!(code(&args), 2);
    std::fs::write(&cfg, r#"{"optim": {"epochs": 1}}"#).unwrap();
    assert_eq!(code(&args), 2);
}

#[test]
fn missing_corpus_is_a_usage_error() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nothing");
    assert_eq!(code(&["train-lm", "--corpus", s(&missing), "--out", s(&dir.path().join("o"))]), 2);
}

#[test]
fn checkpoints_load_and_training_reproduces() {
    let t = trained();
    let (lm, vocab) = Lm::load(&t.p("lm/lm.ckpt")).unwrap();
    let (clf, clf_vocab) = Classifier::load(&t.p("clf/classifier.ckpt")).unwrap();
    assert_eq!(vocab, clf_vocab);
    let manifest = json(&t.p("lm/manifest.json"));
    assert_eq!(manifest["fingerprints"]["lm"].as_str().unwrap(), lm.fingerprint());
    assert_eq!(json(&t.p("clf/manifest.json"))["fingerprints"]["classifier"].as_str().unwrap(), clf.fingerprint());
    let report = json(&t.p("lm/train_report.json"));
    assert_eq!(report["epochs"].as_array().unwrap().len(), 2);

    let dir = TempDir::new().unwrap();
    let again = dir.path().join("lm");
    ok(&["train-lm", "--corpus", s(&t.p("lm_corpus")), "--epochs", "2", "--batch-size", "16", "--out", s(&again)]);
    assert_eq!(std::fs::read(again.join("lm.ckpt")).unwrap(), std::fs::read(t.p("lm/lm.ckpt")).unwrap());
    assert_eq!(read(&again.join("epochs.jsonl")), read(&t.p("lm/epochs.jsonl")));
}

fn caption(t: &Trained, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "caption",
        "--lm",
        s_static(t.p("lm/lm.ckpt")),
        "--clf",
        s_static(t.p("clf/classifier.ckpt")),
        "--prefixes",
        s_static(t.p("lm_corpus/test_prefixes.jsonl")),
        "--out",
        s(out),
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

fn s_static(p: PathBuf) -> &'static str {
    Box::leak(p.into_os_string().into_string().unwrap().into_boxed_str())
}

#[test]
fn guidance_no_ops_match_baseline_bytes() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let path = |name: &str| {
        let d = dir.path().join(name);
        std::fs::create_dir_all(&d).unwrap();
        d.join("captions.jsonl")
    };
    let base = path("baseline");
    caption(t, &base, &["--mode", "baseline"]);
    let no_fluency = path("lambda1_zero");
    caption(t, &no_fluency, &["--mode", "guided", "--lambda1", "0"]);
    let no_steps = path("steps_zero");
    caption(t, &no_steps, &["--mode", "guided", "--steps", "0"]);
    let threaded = path("threaded");
    caption(t, &threaded, &["--mode", "baseline", "--threads", "3"]);
    let expected = std::fs::read(&base).unwrap();
    assert!(!expected.is_empty());
    for p in [&no_fluency, &no_steps, &threaded] {
        assert_eq!(std::fs::read(p).unwrap(), expected, "{} differs from baseline", p.display());
    }
    let guided = path("guided");
    caption(t, &guided, &["--mode", "guided", "--threads", "2"]);
    let guided_again = path("guided_again");
    caption(t, &guided_again, &["--mode", "guided"]);
    assert_eq!(std::fs::read(&guided).unwrap(), std::fs::read(&guided_again).unwrap());
    let trace = guided.with_file_name("captions.trace.jsonl");
    assert_eq!(read(&trace).lines().count(), 4);
}

#[test]
fn caption_usage_errors() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let out = s_static(dir.path().join("c.jsonl"));
    let lm = s_static(t.p("lm/lm.ckpt"));
    let prefixes = s_static(t.p("lm_corpus/test_prefixes.jsonl"));
    assert_eq!(code(&["caption", "--lm", lm, "--prefixes", prefixes, "--mode", "guided", "--out", out]), 2);

    let other = dir.path().join("std_corpus");
    ok(&["gen-corpus", "--kind", "classifier", "--size", "200", "--out", s(&other)]);
    let std_clf = dir.path().join("std_clf");
    ok(&["train-classifier", "--corpus", s(&other), "--epochs", "1", "--out", s(&std_clf)]);
    let clf = s_static(std_clf.join("classifier.ckpt"));
    assert_eq!(code(&["caption", "--lm", lm, "--clf", clf, "--prefixes", prefixes, "--mode", "guided", "--out", out]), 2);
    let missing = s_static(dir.path().join("none.ckpt"));
    assert_eq!(code(&["caption", "--lm", missing, "--prefixes", prefixes, "--mode", "baseline", "--out", out]), 2);
}

fn write_candidates(path: &Path, refs: &Path, keep: usize) {
    let mut out = String::new();
    for line in read(refs).lines().take(keep) {
        let r = json_line(line);
        let rec = serde_json::json!({
            "prefix": r["prefix"],
            "caption": r["references"][0],
            "ended_with_eos": true,
            "trace": {"file": "absent.trace.jsonl", "line": 0},
        });
        out.push_str(&rec.to_string());
        out.push('\n');
    }
    std::fs::write(path, out).unwrap();
}

#[test]
fn evaluate_scores_and_errors() {
    let dir = TempDir::new().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["gen-corpus", "--kind", "lm", "--size", "2000", "--out", s(&corpus)]);
    let refs = corpus.join("test_prefixes.jsonl");
    let n = read(&refs).lines().count();
    let cands = dir.path().join("cands.jsonl");
    write_candidates(&cands, &refs, n);
    let report = dir.path().join("report.json");
    ok(&["evaluate", "--candidates", s(&cands), "--references", s(&refs), "--out", s(&report)]);
    let r = json(&report);
    assert_eq!(r["captions"].as_u64().unwrap() as usize, n);
    assert!((r["bleu4"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!((r["rouge_l"].as_f64().unwrap() - 1.0).abs() < 1e-9);
    assert!(r["cider"].as_f64().unwrap() > 0.0);
    assert!(read(&dir.path().join("report.txt")).contains("BLEU-4"));

    let missing = dir.path().join("missing.jsonl");
    assert_eq!(code(&["evaluate", "--candidates", s(&cands), "--references", s(&missing), "--out", s(&report)]), 2);
    let short = dir.path().join("short.jsonl");
    write_candidates(&short, &refs, n - 1);
    assert_eq!(code(&["evaluate", "--candidates", s(&short), "--references", s(&refs), "--out", s(&report)]), 2);
}

#[test]
fn evaluate_refuses_the_guidance_classifier() {
    let t = trained();
    let dir = TempDir::new().unwrap();
    let captions = dir.path().join("guided.jsonl");
    caption(t, &captions, &["--mode", "guided"]);
    let refs = t.p("lm_corpus/test_prefixes.jsonl");
    let report = dir.path().join("report.json");
    let clf = t.p("clf/classifier.ckpt");
    let args = ["evaluate", "--candidates", s(&captions), "--references", s(&refs), "--clf", s(&clf), "--out", s(&report)];
    assert_eq!(code(&args), 2);
}
