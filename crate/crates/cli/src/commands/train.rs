use std::path::{Path, PathBuf};

use capguide::classifier::ClassifierConfig;
use capguide::corpus::{ConditionedCaption, LabeledCaption};
use capguide::io::{read_jsonl, write_json, write_jsonl};
use capguide::lm::LmConfig;
use capguide::tokenizer::Vocabulary;
use capguide::trainer::{evaluate_classifier, train_classifier, train_lm, OptimConfig, TrainReport};
use clap::Args;
use serde::de::DeserializeOwned;

use crate::commands::gen_corpus::{create_dir, VOCAB_FILE};
use crate::config::{check_keys, fields, overlay, read_flat, Flat};
use crate::error::{CliError, CliResult};
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::overrides;

#[derive(Args, Clone, Debug)]
pub struct TrainArgs {
    /// Directory written by gen-corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Flat JSON file with optimiser and model settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub decay_every: Option<usize>,
    #[arg(long)]
    pub decay_factor: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

impl TrainArgs {
    fn flags(&self) -> Flat {
        overrides! {
            "lr" => self.lr,
            "batch_size" => self.batch_size,
            "epochs" => self.epochs,
            "decay_every" => self.decay_every,
            "decay_factor" => self.decay_factor,
            "weight_decay" => self.weight_decay,
            "seed" => self.seed,
        }
    }
}

pub const LM_CHECKPOINT: &str = "lm.ckpt";
pub const CLASSIFIER_CHECKPOINT: &str = "classifier.ckpt";

fn corpus_file(dir: &Path, name: &str) -> CliResult<PathBuf> {
    let p = dir.join(name);
    if !p.is_file() {
        return Err(CliError::usage(format!("corpus file {} not found", p.display())));
    }
    Ok(p)
}

fn load_splits<T: DeserializeOwned>(dir: &Path, mb: &mut ManifestBuilder) -> CliResult<(Vec<T>, Vec<T>, Vec<T>)> {
    let mut read = |name: &str| -> CliResult<Vec<T>> {
        let p = corpus_file(dir, name)?;
        mb.input(&p);
        Ok(read_jsonl(&p)?)
    };
    Ok((read("train.jsonl")?, read("val.jsonl")?, read("test.jsonl")?))
}

fn load_vocab(dir: &Path, mb: &mut ManifestBuilder) -> CliResult<Vocabulary> {
    let p = corpus_file(dir, VOCAB_FILE)?;
    mb.input(&p);
    Ok(Vocabulary::load(&p)?)
}

/// Writes `train_report.json` and `epochs.jsonl` next to the checkpoint.
fn write_report(out: &Path, report: &TrainReport, mb: &mut ManifestBuilder) -> CliResult<()> {
    let rp = out.join("train_report.json");
    write_json(&rp, report)?;
    let ep = out.join("epochs.jsonl");
    write_jsonl(&ep, &report.epochs)?;
    mb.output(&rp).output(&ep);
    Ok(())
}

/// Model keys accepted in a flat config, without the corpus-derived vocabulary size.
fn model_fields<T: serde::Serialize>(cfg: &T) -> Flat {
    let mut f = fields(cfg);
    f.remove("vocab_size");
    f
}

pub fn run_lm(args: &TrainArgs) -> CliResult<RunManifest> {
    run_lm_with(args, OptimConfig::default())
}

/// `train-lm` with a caller-chosen optimiser baseline under the file and flags.
pub fn run_lm_with(args: &TrainArgs, base: OptimConfig) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("train-lm");
    let file = read_flat(args.config.as_deref())?;
    let vocab = load_vocab(&args.corpus, &mut mb)?;
    let model_base = LmConfig::new(vocab.len());
    check_keys(&file, &[&fields(&base), &model_fields(&model_base)], &[])?;
    let optim: OptimConfig = overlay(&base, &file, &args.flags())?;
    let mut config: LmConfig = overlay(&model_base, &file, &Flat::new())?;
    config.vocab_size = vocab.len();
    let (train, val, _test) = load_splits::<ConditionedCaption>(&args.corpus, &mut mb)?;
    create_dir(&args.out)?;
    let (lm, mut report) = train_lm(&train, &val, &vocab, config.clone(), &optim)?;
    let ckpt = args.out.join(LM_CHECKPOINT);
    lm.save(&ckpt, &vocab)?;
    report.checkpoint = Some(LM_CHECKPOINT.into());
    mb.output(&ckpt);
    write_report(&args.out, &report, &mut mb)?;
    println!(
        "lm: {} epochs, best epoch {} (val perplexity {:.4}), fingerprint {} -> {}",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_metric,
        &report.fingerprint[..16],
        ckpt.display()
    );
    mb.config(serde_json::json!({ "optim": optim, "model": config }))
        .seed("init_and_shuffle", optim.seed)
        .fingerprint("lm", report.fingerprint.clone());
    mb.finish(&args.out.join("manifest.json"))
}

pub fn run_classifier(args: &TrainArgs) -> CliResult<RunManifest> {
    run_classifier_with(args, OptimConfig::default())
}

pub fn run_classifier_with(args: &TrainArgs, base: OptimConfig) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("train-classifier");
    let file = read_flat(args.config.as_deref())?;
    let vocab = load_vocab(&args.corpus, &mut mb)?;
    let model_base = ClassifierConfig::new(vocab.len());
    check_keys(&file, &[&fields(&base), &model_fields(&model_base)], &[])?;
    let optim: OptimConfig = overlay(&base, &file, &args.flags())?;
    let mut config: ClassifierConfig = overlay(&model_base, &file, &Flat::new())?;
    config.vocab_size = vocab.len();
    let (train, val, test) = load_splits::<LabeledCaption>(&args.corpus, &mut mb)?;
    create_dir(&args.out)?;
    let (clf, mut report) = train_classifier(&train, &val, &vocab, config.clone(), &optim)?;
    let test_acc = evaluate_classifier(&clf, &vocab, &test)?;
    let ckpt = args.out.join(CLASSIFIER_CHECKPOINT);
    clf.save(&ckpt, &vocab)?;
    report.checkpoint = Some(CLASSIFIER_CHECKPOINT.into());
    report.test_metric = Some(test_acc);
    mb.output(&ckpt);
    write_report(&args.out, &report, &mut mb)?;
    println!(
        "classifier: {} epochs, best epoch {} (val accuracy {:.4}), test accuracy {:.4}, fingerprint {} -> {}",
        report.epochs.len(),
        report.best_epoch,
        report.best_val_metric,
        test_acc,
        &report.fingerprint[..16],
        ckpt.display()
    );
    mb.config(serde_json::json!({ "optim": optim, "model": config, "test_accuracy": test_acc }))
        .seed("init_and_shuffle", optim.seed)
        .fingerprint("classifier", report.fingerprint.clone());
    mb.finish(&args.out.join("manifest.json"))
}
