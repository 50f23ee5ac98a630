use std::path::PathBuf;

use capguide::classifier::Classifier;
use capguide::guidance::{baseline_decode, guided_decode, Decoded, GuidanceConfig, TraceRow};
use capguide::io::{read_jsonl, write_jsonl};
use capguide::lm::Lm;
use capguide::tokenizer::Vocabulary;
use capguide::trainer::lm_context;
use clap::{Args, ValueEnum};
use serde::{Deserialize, Serialize};

use crate::commands::gen_corpus::PrefixRecord;
use crate::config::{check_keys, fields, overlay, read_flat};
use crate::error::{CliError, CliResult};
use crate::manifest::{sibling, ManifestBuilder, RunManifest};
use crate::overrides;

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Baseline,
    Guided,
}

#[derive(Args, Clone, Debug)]
pub struct CaptionArgs {
    #[arg(long)]
    pub lm: PathBuf,
    /// Guidance classifier; required for guided mode, optional (trace scores only) for baseline.
    #[arg(long)]
    pub clf: Option<PathBuf>,
    /// Line-delimited records with a "prefix" field.
    #[arg(long)]
    pub prefixes: PathBuf,
    #[arg(long, value_enum)]
    pub mode: Mode,
    #[arg(long)]
    pub lambda0: Option<f64>,
    #[arg(long)]
    pub lambda1: Option<f64>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub max_new: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Only the first N prefixes.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Flat JSON file with guidance settings; flags take precedence.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Worker threads over prefixes. Output does not depend on this.
    #[arg(long, default_value_t = 1)]
    pub threads: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TracePointer {
    /// File name, relative to the captions file's directory.
    pub file: String,
    /// 0-based line in the trace file.
    pub line: usize,
}

/// One line of the captions file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CaptionRecord {
    pub prefix: String,
    pub caption: String,
    pub ended_with_eos: bool,
    pub trace: TracePointer,
}

/// One line of the trace file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    pub prefix_index: usize,
    pub prefix: String,
    pub mode: Mode,
    pub rows: Vec<TraceRow>,
}

/// Decodes every context on `threads` workers; results keep input order.
pub fn decode_all(
    lm: &Lm,
    clf: Option<&Classifier>,
    contexts: &[Vec<u32>],
    mode: Mode,
    cfg: &GuidanceConfig,
    threads: usize,
) -> CliResult<Vec<Decoded>> {
    let frozen = (lm.fingerprint(), clf.map(Classifier::fingerprint));
    let one = |ctx: &Vec<u32>| -> CliResult<Decoded> {
        let d = match (mode, clf) {
            (Mode::Guided, Some(c)) => guided_decode(lm, c, ctx, cfg),
            _ => baseline_decode(lm, clf, ctx, cfg),
        }?;
        // weights must never move during decoding
        if (lm.fingerprint(), clf.map(Classifier::fingerprint)) != frozen {
            return Err(CliError::numeric("model weights changed during decoding"));
        }
        Ok(d)
    };
    let threads = threads.max(1).min(contexts.len().max(1));
    if threads == 1 {
        return contexts.iter().map(one).collect();
    }
    let mut slots: Vec<Option<CliResult<Decoded>>> = (0..contexts.len()).map(|_| None).collect();
    std::thread::scope(|s| {
        let chunk = contexts.len().div_ceil(threads);
        for (ctxs, out) in contexts.chunks(chunk).zip(slots.chunks_mut(chunk)) {
            s.spawn(move || {
                for (c, o) in ctxs.iter().zip(out) {
                    *o = Some(one(c));
                }
            });
        }
    });
    slots.into_iter().map(|r| r.expect("every slot decoded")).collect()
}

pub fn run(args: &CaptionArgs) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("caption");
    let file = read_flat(args.config.as_deref())?;
    let defaults = GuidanceConfig::default();
    check_keys(&file, &[&fields(&defaults)], &[])?;
    let flags = overrides! {
        "lambda0" => args.lambda0,
        "lambda1" => args.lambda1,
        "steps" => args.steps,
        "alpha" => args.alpha,
        "top_k" => args.topk,
        "max_new" => args.max_new,
        "seed" => args.seed,
    };
    let cfg: GuidanceConfig = overlay(&defaults, &file, &flags)?;
    cfg.validate()?;
    if args.mode == Mode::Guided && args.clf.is_none() {
        return Err(CliError::usage("--mode guided needs --clf"));
    }
    let (lm, vocab) = Lm::load(&args.lm).map_err(|e| CliError::from(e).context(format!("loading {}", args.lm.display())))?;
    mb.input(&args.lm).fingerprint("lm", lm.fingerprint());
    let clf = match &args.clf {
        Some(p) => {
            let (c, v): (Classifier, Vocabulary) =
                Classifier::load(p).map_err(|e| CliError::from(e).context(format!("loading {}", p.display())))?;
            if v != vocab {
                return Err(CliError::usage(format!(
                    "vocabulary mismatch: {} ({} tokens) vs {} ({} tokens)",
                    args.lm.display(),
                    vocab.len(),
                    p.display(),
                    v.len()
                )));
            }
            mb.input(p).fingerprint("classifier", c.fingerprint());
            Some(c)
        }
        None => None,
    };
    let mut prefixes: Vec<PrefixRecord> = read_jsonl(&args.prefixes)?;
    mb.input(&args.prefixes);
    if let Some(n) = args.limit {
        prefixes.truncate(n);
    }
    if prefixes.is_empty() {
        return Err(CliError::data(format!("{}: no prefixes", args.prefixes.display())));
    }
    let contexts = prefixes
        .iter()
        .map(|p| lm_context(&vocab, &p.prefix))
        .collect::<Result<Vec<_>, _>>()?;
    let decoded = decode_all(&lm, clf.as_ref(), &contexts, args.mode, &cfg, args.threads)?;
    let trace_path = sibling(&args.out, "trace.jsonl");
    let trace_name = trace_path.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    let mut captions = Vec::with_capacity(decoded.len());
    let mut traces = Vec::with_capacity(decoded.len());
    for (i, (p, d)) in prefixes.iter().zip(decoded).enumerate() {
        captions.push(CaptionRecord {
            prefix: p.prefix.clone(),
            caption: vocab.decode(&d.tokens)?,
            ended_with_eos: d.ended_with_eos,
            trace: TracePointer { file: trace_name.clone(), line: i },
        });
        traces.push(TraceRecord { prefix_index: i, prefix: p.prefix.clone(), mode: args.mode, rows: d.trace });
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::commands::gen_corpus::create_dir(dir)?;
    }
    write_jsonl(&args.out, &captions)?;
    write_jsonl(&trace_path, &traces)?;
    mb.output(&args.out).output(&trace_path);
    println!("{} {:?} captions -> {}", captions.len(), args.mode, args.out.display());
    mb.config(serde_json::json!({ "mode": args.mode, "guidance": cfg, "limit": args.limit }))
        .seed("guidance", cfg.seed)
        .threads(args.threads);
    mb.finish(&sibling(&args.out, "manifest.json"))
}
