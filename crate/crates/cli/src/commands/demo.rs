use std::path::PathBuf;

use capguide::corpus::SoundLexicon;
use capguide::io::{read_json, read_jsonl};
use capguide::metrics::MetricsReport;
use clap::Args;

use crate::commands::caption::{self, CaptionArgs, CaptionRecord, Mode};
use crate::commands::evaluate::{self, EvaluateArgs};
use crate::commands::gen_corpus::{self, CorpusKind, GenCorpusArgs, PREFIX_FILE};
use crate::commands::train::{self, TrainArgs, CLASSIFIER_CHECKPOINT, LM_CHECKPOINT};
use crate::error::CliResult;
use crate::manifest::{ManifestBuilder, RunManifest};
use crate::recipes;

#[derive(Args, Clone, Debug)]
pub struct DemoArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Worker threads for captioning; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long, default_value_t = recipes::DEMO_LM_EPOCHS)]
    pub lm_epochs: usize,
}

fn train_args(corpus: PathBuf, out: PathBuf) -> TrainArgs {
    TrainArgs {
        corpus,
        config: None,
        lr: None,
        batch_size: None,
        epochs: None,
        decay_every: None,
        decay_factor: None,
        weight_decay: None,
        seed: None,
        out,
    }
}

/// Layout of a demo output directory.
pub struct DemoPaths {
    pub root: PathBuf,
}

impl DemoPaths {
    pub fn classifier_corpus(&self) -> PathBuf {
        self.root.join("corpus/classifier")
    }
    pub fn lm_corpus(&self) -> PathBuf {
        self.root.join("corpus/lm")
    }
    pub fn prefixes(&self) -> PathBuf {
        self.lm_corpus().join(PREFIX_FILE)
    }
    pub fn guidance_clf(&self) -> PathBuf {
        self.root.join("models/classifier").join(CLASSIFIER_CHECKPOINT)
    }
    pub fn eval_clf(&self) -> PathBuf {
        self.root.join("models/eval_classifier").join(CLASSIFIER_CHECKPOINT)
    }
    pub fn lm(&self) -> PathBuf {
        self.root.join("models/lm").join(LM_CHECKPOINT)
    }
    pub fn captions(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("captions/{}.jsonl", mode_name(mode)))
    }
    pub fn report(&self, mode: Mode) -> PathBuf {
        self.root.join(format!("reports/{}.json", mode_name(mode)))
    }
}

fn mode_name(mode: Mode) -> &'static str {
    match mode {
        Mode::Baseline => "baseline",
        Mode::Guided => "guided",
    }
}

pub fn run(args: &DemoArgs) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("demo");
    let paths = DemoPaths { root: args.out.clone() };
    let spec = recipes::demo_corpus(args.seed);
    for (kind, dir) in [(CorpusKind::Classifier, paths.classifier_corpus()), (CorpusKind::Lm, paths.lm_corpus())] {
        gen_corpus::run(&GenCorpusArgs {
            kind,
            world: Some(spec.world),
            seed: Some(spec.seed),
            size: Some(if kind == CorpusKind::Classifier { spec.classifier_size } else { spec.lm_size }),
            captions_per_prefix: None,
            audible_fraction: None,
            config: None,
            out: dir,
        })?;
    }
    let clf_dir = |p: PathBuf| p.parent().expect("checkpoint dir").to_path_buf();
    let guide = train::run_classifier_with(
        &train_args(paths.classifier_corpus(), clf_dir(paths.guidance_clf())),
        recipes::demo_classifier(args.seed),
    )?;
    let eval = train::run_classifier_with(
        &train_args(paths.classifier_corpus(), clf_dir(paths.eval_clf())),
        recipes::demo_classifier(args.seed + recipes::EVAL_SEED_OFFSET),
    )?;
    let lm = train::run_lm_with(&train_args(paths.lm_corpus(), clf_dir(paths.lm())), recipes::demo_lm(args.seed, args.lm_epochs))?;
    for mode in [Mode::Baseline, Mode::Guided] {
        caption::run(&CaptionArgs {
            lm: paths.lm(),
            clf: Some(paths.guidance_clf()),
            prefixes: paths.prefixes(),
            mode,
            lambda0: None,
            lambda1: None,
            steps: None,
            alpha: None,
            topk: None,
            max_new: None,
            seed: Some(args.seed),
            limit: None,
            config: None,
            threads: args.threads,
            out: paths.captions(mode),
        })?;
        evaluate::run(&EvaluateArgs {
            candidates: paths.captions(mode),
            references: paths.prefixes(),
            clf: Some(paths.eval_clf()),
            out: paths.report(mode),
        })?;
    }
    let base: Vec<CaptionRecord> = read_jsonl(&paths.captions(Mode::Baseline))?;
    let guided: Vec<CaptionRecord> = read_jsonl(&paths.captions(Mode::Guided))?;
    let lex = SoundLexicon::get();
    println!("\n{:<22} {:<28} {:<28}", "prefix", "baseline", "guided");
    let mut flips = 0;
    for (b, g) in base.iter().zip(&guided) {
        let flipped = !lex.is_audible(&b.caption) && lex.is_audible(&g.caption);
        flips += usize::from(flipped);
        println!("{:<22} {:<28} {:<28}{}", b.prefix, b.caption, g.caption, if flipped { "  *" } else { "" });
    }
    let rb: MetricsReport = read_json(&paths.report(Mode::Baseline))?;
    let rg: MetricsReport = read_json(&paths.report(Mode::Guided))?;
    let pct = |r: &MetricsReport| r.audibility.map_or("-".into(), |a| format!("{:.1}", 100.0 * a));
    println!(
        "\nAud (eval classifier): baseline {} -> guided {}; lexicon: {:.1} -> {:.1}; {} of {} captions flipped to audible",
        pct(&rb),
        pct(&rg),
        100.0 * rb.audibility_lexicon,
        100.0 * rg.audibility_lexicon,
        flips,
        base.len()
    );
    for (name, m) in [("classifier", &guide), ("eval_classifier", &eval), ("lm", &lm)] {
        for fp in m.fingerprints.values() {
            mb.fingerprint(name, fp.clone());
        }
    }
    mb.config(serde_json::json!({ "seed": args.seed, "lm_epochs": args.lm_epochs }))
        .seed("demo", args.seed)
        .threads(args.threads)
        .output(&args.out);
    mb.finish(&args.out.join("manifest.json"))
}
