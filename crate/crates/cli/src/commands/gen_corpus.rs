use std::path::{Path, PathBuf};

use capguide::corpus::{
    generate_classifier_corpus, generate_lm_corpus, references_by_prefix, world_vocabulary_text, CorpusSpec, WorldKind,
};
use capguide::io::write_jsonl;
use capguide::tokenizer::Vocabulary;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::config::{check_keys, fields, overlay, read_flat};
use crate::error::{CliError, CliResult};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::overrides;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CorpusKind {
    Classifier,
    Lm,
}

pub fn parse_world(s: &str) -> Result<WorldKind, String> {
    serde_json::from_value(serde_json::Value::String(s.to_string())).map_err(|_| format!("unknown world {s:?} (standard, demo)"))
}

#[derive(Args, Clone, Debug)]
pub struct GenCorpusArgs {
    #[arg(long, value_enum)]
    pub kind: CorpusKind,
    /// Template world: standard or demo (the V=16 toy).
    #[arg(long, value_parser = parse_world)]
    pub world: Option<WorldKind>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Total sentences (classifier) or captions (lm).
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub captions_per_prefix: Option<usize>,
    #[arg(long)]
    pub audible_fraction: Option<f64>,
    /// Flat JSON file with corpus settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

/// One line of `test_prefixes.jsonl`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrefixRecord {
    pub prefix: String,
    #[serde(default)]
    pub references: Vec<String>,
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const PREFIX_FILE: &str = "test_prefixes.jsonl";

pub fn create_dir(dir: &Path) -> CliResult<()> {
    std::fs::create_dir_all(dir).map_err(|e| CliError::usage(format!("cannot create {}: {e}", dir.display())))
}

pub fn run(args: &GenCorpusArgs) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("gen-corpus");
    let file = read_flat(args.config.as_deref())?;
    let defaults = CorpusSpec::default();
    check_keys(&file, &[&fields(&defaults)], &[])?;
    let size_key = match args.kind {
        CorpusKind::Classifier => "classifier_size",
        CorpusKind::Lm => "lm_size",
    };
    let mut flags = overrides! {
        "seed" => args.seed,
        "world" => args.world,
        "captions_per_prefix" => args.captions_per_prefix,
        "audible_fraction" => args.audible_fraction,
    };
    if let Some(n) = args.size {
        flags.insert(size_key.to_string(), n.into());
    }
    let spec: CorpusSpec = overlay(&defaults, &file, &flags)?;
    if let Some(c) = &args.config {
        mb.input(c);
    }
    create_dir(&args.out)?;
    let vocab = Vocabulary::build(&world_vocabulary_text(spec.world), 1)?;
    let vocab_path = args.out.join(VOCAB_FILE);
    vocab.save(&vocab_path)?;
    mb.output(&vocab_path);
    let path = |name: &str| args.out.join(format!("{name}.jsonl"));
    let counts = match args.kind {
        CorpusKind::Classifier => {
            let s = generate_classifier_corpus(&spec)?;
            for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                write_jsonl(&path(name), part)?;
                mb.output(&path(name));
            }
            [s.train.len(), s.val.len(), s.test.len()]
        }
        CorpusKind::Lm => {
            let s = generate_lm_corpus(&spec)?;
            for (name, part) in [("train", &s.train), ("val", &s.val), ("test", &s.test)] {
                write_jsonl(&path(name), part)?;
                mb.output(&path(name));
            }
            let prefixes: Vec<PrefixRecord> =
                references_by_prefix(&s.test).into_iter().map(|(prefix, references)| PrefixRecord { prefix, references }).collect();
            let p = args.out.join(PREFIX_FILE);
            write_jsonl(&p, &prefixes)?;
            mb.output(&p);
            [s.train.len(), s.val.len(), s.test.len()]
        }
    };
    println!(
        "{:?} corpus ({:?} world, seed {}): train {} / val {} / test {} -> {}",
        args.kind, spec.world, spec.seed, counts[0], counts[1], counts[2], args.out.display()
    );
    mb.config(serde_json::json!({ "kind": args.kind, "spec": spec })).seed("corpus", spec.seed);
    mb.finish(&args.out.join("manifest.json"))
}
