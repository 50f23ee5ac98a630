use std::path::{Path, PathBuf};

use capguide::classifier::Classifier;
use capguide::io::{read_json, read_jsonl, write_json};
use capguide::metrics::MetricsReport;
use clap::Args;

use crate::commands::caption::{CaptionRecord, TraceRecord};
use crate::commands::gen_corpus::PrefixRecord;
use crate::error::{CliError, CliResult};
use crate::manifest::{sibling, ManifestBuilder, RunManifest};

#[derive(Args, Clone, Debug)]
pub struct EvaluateArgs {
    /// Captions file written by `caption`.
    #[arg(long)]
    pub candidates: PathBuf,
    /// Line-delimited {"prefix", "references"} records, in candidate order.
    #[arg(long)]
    pub references: PathBuf,
    /// Held-out evaluation classifier (must differ from the guidance classifier).
    #[arg(long)]
    pub clf: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

fn require(p: &Path) -> CliResult<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(CliError::usage(format!("{} not found", p.display())))
    }
}

/// Per-token KL values from the trace file the candidates point at.
fn kl_values(candidates: &Path, cands: &[CaptionRecord]) -> CliResult<Vec<f64>> {
    let Some(first) = cands.first() else { return Ok(Vec::new()) };
    let path = candidates.parent().unwrap_or(Path::new("")).join(&first.trace.file);
    if !path.is_file() {
        log::warn!("trace file {} missing; KL not reported", path.display());
        return Ok(Vec::new());
    }
    let traces: Vec<TraceRecord> = read_jsonl(&path)?;
    let mut out = Vec::new();
    for c in cands {
        let t = traces.get(c.trace.line).ok_or_else(|| CliError::data(format!("trace line {} missing", c.trace.line)))?;
        out.extend(t.rows.iter().map(|r| r.kl));
    }
    Ok(out)
}

pub fn run(args: &EvaluateArgs) -> CliResult<RunManifest> {
    let mut mb = ManifestBuilder::new("evaluate");
    require(&args.candidates)?;
    require(&args.references)?;
    let cands: Vec<CaptionRecord> = read_jsonl(&args.candidates)?;
    let refs: Vec<PrefixRecord> = read_jsonl(&args.references)?;
    mb.input(&args.candidates).input(&args.references);
    if cands.len() != refs.len() {
        return Err(CliError::usage(format!(
            "{} candidates but {} reference records",
            cands.len(),
            refs.len()
        )));
    }
    if let Some((i, (c, r))) = cands.iter().zip(&refs).enumerate().find(|(_, (c, r))| c.prefix != r.prefix) {
        return Err(CliError::data(format!("line {i}: candidate prefix {:?} vs reference prefix {:?}", c.prefix, r.prefix)));
    }
    let eval = match &args.clf {
        Some(p) => {
            let (clf, vocab) = Classifier::load(p)?;
            let fp = clf.fingerprint();
            let cand_manifest = sibling(&args.candidates, "manifest.json");
            if cand_manifest.is_file() {
                let m: RunManifest = read_json(&cand_manifest)?;
                if m.fingerprints.get("classifier") == Some(&fp) {
                    return Err(CliError::usage(
                        "the evaluation classifier is the one that guided these captions; use a separately trained checkpoint",
                    ));
                }
            }
            mb.input(p).fingerprint("eval_classifier", fp);
            Some((clf, vocab))
        }
        None => None,
    };
    let candidates: Vec<String> = cands.iter().map(|c| c.caption.clone()).collect();
    let references: Vec<Vec<String>> = refs.into_iter().map(|r| r.references).collect();
    let kl = kl_values(&args.candidates, &cands)?;
    let report = MetricsReport::compute(&candidates, &references, eval.as_ref().map(|(c, v)| (c, v)), &kl)?;
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        crate::commands::gen_corpus::create_dir(dir)?;
    }
    write_json(&args.out, &report)?;
    let table = sibling(&args.out, "txt");
    std::fs::write(&table, report.to_table()).map_err(|e| CliError::data(format!("{}: {e}", table.display())))?;
    mb.output(&args.out).output(&table);
    print!("{}", report.to_table());
    mb.config(serde_json::json!({ "captions": report.captions }));
    mb.finish(&sibling(&args.out, "manifest.json"))
}
