//! Caption metrics: corpus BLEU-4, ROUGE-L, CIDEr-D, audibility accuracy.
//!
//! All text is tokenized with [`split_words`] before scoring.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;

use log::warn;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierError};
use crate::corpus::SoundLexicon;
use crate::tokenizer::{split_words, Vocabulary};

pub const ROUGE_BETA: f64 = 1.2;
pub const CIDER_SIGMA: f64 = 6.0;
const MAX_N: usize = 4;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("no candidates to score")]
    EmptyCandidates,
    #[error("candidate {index} has no references")]
    NoReferences { index: usize },
    #[error("{candidates} candidates but {references} reference sets")]
    LengthMismatch { candidates: usize, references: usize },
    #[error("idf corpus is empty")]
    EmptyIdfCorpus,
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

type Ngram = Vec<String>;

fn words(text: &str) -> Vec<String> {
    split_words(text).collect()
}

fn ngram_counts(w: &[String], n: usize) -> HashMap<Ngram, usize> {
    let mut out = HashMap::new();
    for g in w.windows(n) {
        *out.entry(g.to_vec()).or_insert(0) += 1;
    }
    out
}

fn check_pairs<R: AsRef<[String]>>(candidates: &[String], references: &[R]) -> Result<(), MetricsError> {
    if candidates.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    if candidates.len() != references.len() {
        return Err(MetricsError::LengthMismatch { candidates: candidates.len(), references: references.len() });
    }
    if let Some(index) = references.iter().position(|r| r.as_ref().is_empty()) {
        return Err(MetricsError::NoReferences { index });
    }
    Ok(())
}

/// Corpus BLEU-4 with uniform weights and clipped counts.
///
/// An n ≥ 2 precision with zero matches is smoothed to (0+1)/(total+1); a zero
/// unigram precision gives 0. The brevity penalty uses, per candidate, the
/// reference length closest to it (shorter on ties).
pub fn bleu4<R: AsRef<[String]>>(candidates: &[String], references: &[R]) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    let mut matched = [0usize; MAX_N];
    let mut total = [0usize; MAX_N];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (cand, refs) in candidates.iter().zip(references) {
        let c = words(cand);
        let rs: Vec<Vec<String>> = refs.as_ref().iter().map(|r| words(r)).collect();
        cand_len += c.len();
        ref_len += rs.iter().map(Vec::len).min_by_key(|&l| (l.abs_diff(c.len()), l)).unwrap_or(0);
        for n in 1..=MAX_N {
            let mut max_ref: HashMap<Ngram, usize> = HashMap::new();
            for r in &rs {
                for (g, k) in ngram_counts(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngram_counts(&c, n) {
                matched[n - 1] += k.min(max_ref.get(&g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 || matched[0] == 0 {
        return Ok(0.0);
    }
    let mut log_p = 0.0;
    for n in 0..MAX_N {
        let (m, t) = if matched[n] == 0 { (1, total[n] + 1) } else { (matched[n], total[n]) };
        log_p += (m as f64 / t as f64).ln();
    }
    let bp = if cand_len > ref_len { 1.0 } else { (1.0 - ref_len as f64 / cand_len as f64).exp() };
    Ok(bp * (log_p / MAX_N as f64).exp())
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

/// Sentence ROUGE-L F-score, maximised over references.
pub fn rouge_l(candidate: &str, references: &[String]) -> f64 {
    let c = words(candidate);
    if c.is_empty() || references.is_empty() {
        warn!("rouge_l on empty input scores 0");
        return 0.0;
    }
    let b2 = ROUGE_BETA * ROUGE_BETA;
    references
        .iter()
        .map(|r| {
            let r = words(r);
            let l = lcs(&c, &r);
            if l == 0 {
                return 0.0;
            }
            let p = l as f64 / c.len() as f64;
            let rec = l as f64 / r.len() as f64;
            (1.0 + b2) * p * rec / (rec + b2 * p)
        })
        .fold(0.0, f64::max)
}

/// Mean sentence ROUGE-L over the corpus.
pub fn rouge_l_corpus<R: AsRef<[String]>>(candidates: &[String], references: &[R]) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    let sum: f64 = candidates.iter().zip(references).map(|(c, r)| rouge_l(c, r.as_ref())).sum();
    Ok(sum / candidates.len() as f64)
}

struct TfIdf {
    vec: [HashMap<Ngram, f64>; MAX_N],
    norm: [f64; MAX_N],
    // bigram count, the conventional CIDEr-D length
    length: f64,
}

struct DocFreq {
    df: HashMap<Ngram, f64>,
    log_docs: f64,
}

impl DocFreq {
    fn new<R: AsRef<[String]>>(corpus: &[R]) -> Result<Self, MetricsError> {
        if corpus.is_empty() {
            return Err(MetricsError::EmptyIdfCorpus);
        }
        let mut df = HashMap::new();
        for refs in corpus {
            let mut seen = HashSet::new();
            for r in refs.as_ref() {
                let w = words(r);
                for n in 1..=MAX_N {
                    seen.extend(ngram_counts(&w, n).into_keys());
                }
            }
            for g in seen {
                *df.entry(g).or_insert(0.0) += 1.0;
            }
        }
        Ok(Self { df, log_docs: (corpus.len() as f64).ln() })
    }

    fn tfidf(&self, text: &str) -> TfIdf {
        let w = words(text);
        let mut vec: [HashMap<Ngram, f64>; MAX_N] = Default::default();
        let mut norm = [0.0; MAX_N];
        for n in 1..=MAX_N {
            for (g, tf) in ngram_counts(&w, n) {
                let df = self.df.get(&g).copied().unwrap_or(0.0).max(1.0);
                let x = tf as f64 * (self.log_docs - df.ln());
                norm[n - 1] += x * x;
                vec[n - 1].insert(g, x);
            }
        }
        TfIdf { vec, norm: norm.map(f64::sqrt), length: w.len().saturating_sub(1) as f64 }
    }
}

fn cider_sim(h: &TfIdf, r: &TfIdf) -> f64 {
    let delta = h.length - r.length;
    let penalty = (-(delta * delta) / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
    let mut sum = 0.0;
    for n in 0..MAX_N {
        let mut val: f64 = h.vec[n]
            .iter()
            .map(|(g, &x)| {
                let y = r.vec[n].get(g).copied().unwrap_or(0.0);
                x.min(y) * y
            })
            .sum();
        if h.norm[n] != 0.0 && r.norm[n] != 0.0 {
            val /= h.norm[n] * r.norm[n];
        }
        sum += val * penalty;
    }
    sum / MAX_N as f64
}

/// CIDEr-D: clipped tf-idf cosine over 1..4-grams with a Gaussian length
/// penalty, averaged over references, ×10, then averaged over candidates.
/// Document frequencies come from `idf_corpus`, one reference set per item.
pub fn cider<R: AsRef<[String]>, I: AsRef<[String]>>(
    candidates: &[String],
    references: &[R],
    idf_corpus: &[I],
) -> Result<f64, MetricsError> {
    check_pairs(candidates, references)?;
    let df = DocFreq::new(idf_corpus)?;
    let mut total = 0.0;
    for (cand, refs) in candidates.iter().zip(references) {
        let h = df.tfidf(cand);
        let refs = refs.as_ref();
        let s: f64 = refs.iter().map(|r| cider_sim(&h, &df.tfidf(r))).sum();
        total += s / refs.len() as f64 * 10.0;
    }
    Ok(total / candidates.len() as f64)
}

/// Fraction of captions the classifier labels audible (ties count as not
/// audible). Captions with no words are scored as not audible.
pub fn audibility_accuracy(clf: &Classifier, vocab: &Vocabulary, captions: &[String]) -> Result<f64, MetricsError> {
    if captions.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    let encoded: Vec<Vec<u32>> = captions.iter().map(|c| vocab.encode(c)).collect();
    let nonempty: Vec<&[u32]> = encoded.iter().filter(|e| !e.is_empty()).map(Vec::as_slice).collect();
    let mut audible = 0;
    for chunk in nonempty.chunks(512) {
        audible += clf.probs_batch(chunk)?.iter().filter(|p| p[1] > p[0]).count();
    }
    Ok(audible as f64 / captions.len() as f64)
}

/// Fraction of captions containing a sound-lexicon word.
pub fn lexicon_accuracy(captions: &[String]) -> Result<f64, MetricsError> {
    if captions.is_empty() {
        return Err(MetricsError::EmptyCandidates);
    }
    let lex = SoundLexicon::get();
    Ok(captions.iter().filter(|c| lex.is_audible(c)).count() as f64 / captions.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KlSummary {
    pub median: f64,
    pub mean: f64,
    pub count: usize,
}

impl KlSummary {
    pub fn from_values(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let mid = v.len() / 2;
        let median = if v.len().is_multiple_of(2) { (v[mid - 1] + v[mid]) / 2.0 } else { v[mid] };
        Some(Self { median, mean: v.iter().sum::<f64>() / v.len() as f64, count: v.len() })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub captions: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    /// Held-out classifier, fraction in [0, 1].
    pub audibility: Option<f64>,
    pub audibility_lexicon: f64,
    pub kl: Option<KlSummary>,
}

impl MetricsReport {
    /// Scores `candidates` against their references; the idf corpus is the
    /// full reference set.
    pub fn compute<R: AsRef<[String]>>(
        candidates: &[String],
        references: &[R],
        eval_clf: Option<(&Classifier, &Vocabulary)>,
        kl_values: &[f64],
    ) -> Result<Self, MetricsError> {
        Ok(Self {
            captions: candidates.len(),
            bleu4: bleu4(candidates, references)?,
            rouge_l: rouge_l_corpus(candidates, references)?,
            cider: cider(candidates, references, references)?,
            audibility: eval_clf.map(|(c, v)| audibility_accuracy(c, v, candidates)).transpose()?,
            audibility_lexicon: lexicon_accuracy(candidates)?,
            kl: KlSummary::from_values(kl_values),
        })
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let mut row = |k: &str, v: String| writeln!(s, "{k:<22}{v}").unwrap();
        row("captions", self.captions.to_string());
        row("BLEU-4", format!("{:.4}", self.bleu4));
        row("ROUGE-L", format!("{:.4}", self.rouge_l));
        row("CIDEr-D", format!("{:.4}", self.cider));
        row("Aud (classifier) %", self.audibility.map_or("-".into(), |a| format!("{:.1}", 100.0 * a)));
        row("Aud (lexicon) %", format!("{:.1}", 100.0 * self.audibility_lexicon));
        if let Some(kl) = self.kl {
            row("KL median", format!("{:.6}", kl.median));
            row("KL mean", format!("{:.6}", kl.mean));
        }
        s
    }
}
