//! Per-token inference-time optimisation of the LM's key/value cache.
//!
//! Two caches run side by side. The base cache is what the frozen model
//! computes on the emitted tokens and defines the anchoring distribution; the
//! guided cache carries the accumulated perturbations. For each token an
//! additive `delta` over the guided cache is optimised for
//! `lambda0 * CE(p, p_base) + lambda1 * -log h_a(emitted + p)[audible]`
//! with normalised gradient steps and a backtracking line search, then folded
//! in before the token is chosen.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierError, AUDIBLE};
use crate::lm::{ContextCache, Lm, LmError};
use crate::ndiff::{kl_divergence, softmax, Graph, NdError, Tensor, Var};
use crate::tokenizer::{TokenId, EOS};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GuidanceConfig {
    pub lambda0: f64,
    pub lambda1: f64,
    /// Inner optimisation steps per token.
    pub steps: usize,
    /// Step length along the unit-normalised gradient, as a fraction of the
    /// guided cache's norm when `relative_step` is set, else absolute.
    pub alpha: f64,
    pub relative_step: bool,
    pub backtracking: bool,
    pub max_halvings: usize,
    /// Candidate set: the `top_k` most likely tokens under the base model.
    pub top_k: usize,
    pub max_new: usize,
    pub beam: usize,
    /// Only perturb cache rows of generated tokens, not the conditioning context.
    pub generated_only: bool,
    pub seed: u64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self {
            lambda0: 0.2,
            lambda1: 0.6,
            steps: 4,
            alpha: 0.02,
            relative_step: true,
            backtracking: true,
            max_halvings: 10,
            top_k: 64,
            max_new: 30,
            beam: 1,
            generated_only: false,
            seed: 0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<(), GuidanceError> {
        let ok = self.lambda0 >= 0.0
            && self.lambda1 >= 0.0
            && self.alpha >= 0.0
            && self.alpha.is_finite()
            && self.top_k >= 1
            && self.max_new >= 1
            && self.beam == 1;
        if ok {
            Ok(())
        } else {
            Err(GuidanceError::Config(format!(
                "need lambda0, lambda1, alpha >= 0, top_k >= 1, max_new >= 1, beam = 1: {self:?}"
            )))
        }
    }
}

#[derive(Debug, Error)]
pub enum GuidanceError {
    #[error("invalid guidance config: {0}")]
    Config(String),
    #[error("context of {context} tokens plus {max_new} new tokens exceeds max_len {max}")]
    PrefixTooLong { context: usize, max_new: usize, max: usize },
    #[error("empty decoding context")]
    EmptyContext,
    #[error("language model and classifier disagree on vocabulary size ({lm} vs {clf})")]
    VocabMismatch { lm: usize, clf: usize },
    #[error("{which} weights changed during decoding")]
    WeightsChanged { which: &'static str },
    #[error("non-finite guidance loss at token {token_index}")]
    NonFinite { token_index: usize, trace: Vec<TraceRow> },
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
    #[error(transparent)]
    Numeric(#[from] NdError),
}

/// Audit record for one emitted token.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub index: usize,
    pub token: TokenId,
    pub clf_loss_initial: f64,
    pub clf_loss_final: f64,
    pub ce_initial: f64,
    pub ce_final: f64,
    /// Total loss before the first step, then after every accepted step.
    pub losses: Vec<f64>,
    /// `KL(guided || base)` of the next-token distributions.
    pub kl: f64,
    pub halvings: usize,
    pub rejected_steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    /// Caption tokens, without the final EOS.
    pub tokens: Vec<TokenId>,
    pub ended_with_eos: bool,
    pub trace: Vec<TraceRow>,
}

pub fn weights_fingerprint(lm: &Lm) -> String {
    lm.fingerprint()
}

/// Top-`k` token ids by probability, ties to the lower id.
pub fn top_k(p: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx.truncate(k.min(p.len()));
    idx
}

/// Highest-scoring candidate, ties to the lower id.
pub fn argmax_among(scores: &[f32], candidates: &[usize]) -> usize {
    let mut sorted = candidates.to_vec();
    sorted.sort_unstable();
    let mut best = sorted[0];
    for &c in &sorted[1..] {
        if scores[c] > scores[best] {
            best = c;
        }
    }
    best
}

/// Perturbation over every layer's cached keys and values.
#[derive(Clone, Debug, PartialEq)]
pub struct CacheDelta {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl CacheDelta {
    pub fn zeros_like(cache: &ContextCache) -> Self {
        let z = |ts: &[Tensor]| ts.iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self { keys: z(&cache.keys), values: z(&cache.values) }
    }

    fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.keys.iter().chain(&self.values)
    }

    fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.keys.iter_mut().chain(self.values.iter_mut())
    }

    pub fn norm(&self) -> f64 {
        self.tensors().flat_map(|t| t.data()).map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
    }

    pub fn is_zero(&self) -> bool {
        self.tensors().all(|t| t.data().iter().all(|&x| x == 0.0))
    }

    /// `self - scale * g`.
    fn stepped(&self, g: &CacheDelta, scale: f32) -> CacheDelta {
        let mut out = self.clone();
        for (o, gt) in out.tensors_mut().zip(g.tensors()) {
            o.data_mut().iter_mut().zip(gt.data()).for_each(|(x, &d)| *x -= scale * d);
        }
        out
    }

    fn zero_rows_before(&mut self, row: usize) {
        for t in self.tensors_mut() {
            let c = t.cols();
            let n = (row * c).min(t.numel());
            t.data_mut()[..n].fill(0.0);
        }
    }
}

pub fn cache_norm(cache: &ContextCache) -> f64 {
    cache.keys.iter().chain(&cache.values).flat_map(|t| t.data()).map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

/// Value (and optionally gradient) of the guidance objective at one delta.
#[derive(Clone, Debug)]
pub struct Objective {
    pub total: f64,
    pub ce: f64,
    pub clf: f64,
    pub grad: Option<CacheDelta>,
}

/// Everything fixed while the delta for one token is optimised.
pub struct TokenProblem<'m> {
    pub lm: &'m Lm,
    pub clf: &'m Classifier,
    pub guided: &'m ContextCache,
    /// Token being fed at position `guided.positions()`.
    pub pending: TokenId,
    /// Caption tokens emitted so far (classifier's hard input).
    pub emitted: &'m [TokenId],
    /// Base next-token distribution, held fixed.
    pub base_probs: &'m Tensor,
    pub lambda0: f64,
    pub lambda1: f64,
}

impl TokenProblem<'_> {
    /// Guided next-token logits and the objective at `delta`.
    pub fn evaluate(&self, delta: &CacheDelta, with_grad: bool) -> Result<(Objective, Vec<f32>), GuidanceError> {
        let mut g = Graph::new();
        let lmv = self.lm.params.bind(&mut g, false);
        let cv = self.clf.params.bind(&mut g, false);
        let p = self.guided.positions();
        let mut dvars: Vec<Var> = Vec::new();
        let mut cache = Vec::with_capacity(self.guided.layers());
        for l in 0..self.guided.layers() {
            let mut bind = |g: &mut Graph<'_>, d: &Tensor| {
                let v = if with_grad { g.param(d.clone()) } else { g.input(d.clone()) };
                dvars.push(v);
                v
            };
            let kb = g.constant(&self.guided.keys[l]);
            let kd = bind(&mut g, &delta.keys[l]);
            let k = g.add(kb, kd)?;
            let vb = g.constant(&self.guided.values[l]);
            let vd = bind(&mut g, &delta.values[l]);
            let v = g.add(vb, vd)?;
            cache.push((k, v));
        }
        let step = self.lm.step_graph(&mut g, &lmv, self.pending, &cache, p)?;
        let probs = g.softmax(step.logits)?;
        let ce = g.soft_cross_entropy(step.logits, self.base_probs)?;
        let clf_logits = self.clf.soft_logits_graph(&mut g, &cv, self.emitted, probs)?;
        let lc = g.nll(clf_logits, &[Some(AUDIBLE)])?;
        let a = g.scale(ce, self.lambda0 as f32)?;
        let b = g.scale(lc, self.lambda1 as f32)?;
        let total = g.add(a, b)?;
        let grad = if with_grad {
            g.backward(total)?;
            let n = self.guided.layers();
            let grab = |i: usize| g.grad(dvars[i]).cloned().unwrap_or_else(|| Tensor::zeros(g.value(dvars[i]).shape()));
            Some(CacheDelta {
                keys: (0..n).map(|l| grab(2 * l)).collect(),
                values: (0..n).map(|l| grab(2 * l + 1)).collect(),
            })
        } else {
            None
        };
        let obj = Objective {
            total: g.value(total).item()? as f64,
            ce: g.value(ce).item()? as f64,
            clf: g.value(lc).item()? as f64,
            grad,
        };
        Ok((obj, g.value(step.logits).data().to_vec()))
    }
}

struct Optimised {
    delta: CacheDelta,
    initial: Objective,
    last: Objective,
    losses: Vec<f64>,
    halvings: usize,
    rejected: usize,
}

fn optimise(problem: &TokenProblem<'_>, cfg: &GuidanceConfig, protect_rows: usize) -> Result<Optimised, GuidanceError> {
    let mut delta = CacheDelta::zeros_like(problem.guided);
    let reference = if cfg.relative_step { cache_norm(problem.guided) } else { 1.0 };
    let (mut cur, _) = problem.evaluate(&delta, true)?;
    let initial = Objective { grad: None, ..cur.clone() };
    let mut losses = vec![cur.total];
    let (mut halvings, mut rejected) = (0, 0);
    for _ in 0..cfg.steps {
        if !cur.total.is_finite() {
            break;
        }
        let mut grad = cur.grad.take().expect("gradient requested");
        if cfg.generated_only {
            grad.zero_rows_before(protect_rows);
        }
        let norm = grad.norm();
        if norm == 0.0 {
            break;
        }
        let mut scale = cfg.alpha * reference / (norm + 1e-8);
        let mut accepted = None;
        for attempt in 0..=cfg.max_halvings {
            let cand = delta.stepped(&grad, scale as f32);
            let (obj, _) = problem.evaluate(&cand, true)?;
            if !cfg.backtracking || obj.total <= cur.total {
                halvings += attempt;
                accepted = Some((cand, obj));
                break;
            }
            scale *= 0.5;
        }
        match accepted {
            Some((d, obj)) => {
                delta = d;
                losses.push(obj.total);
                cur = obj;
            }
            None => {
                // no admissible step along this gradient; keep the current delta
                halvings += cfg.max_halvings;
                rejected += 1;
                break;
            }
        }
    }
    Ok(Optimised { delta, initial, last: Objective { grad: None, ..cur }, losses, halvings, rejected })
}

/// Decoding context for a prefix: both caches hold every context token but
/// the last, which is pending.
pub struct DecodeState {
    pub base: ContextCache,
    pub guided: ContextCache,
    pub pending: TokenId,
    pub emitted: Vec<TokenId>,
    context_len: usize,
}

impl DecodeState {
    pub fn new(lm: &Lm, context: &[TokenId], max_new: usize) -> Result<Self, GuidanceError> {
        let (&pending, head) = context.split_last().ok_or(GuidanceError::EmptyContext)?;
        if context.len() + max_new > lm.config.max_len {
            return Err(GuidanceError::PrefixTooLong { context: context.len(), max_new, max: lm.config.max_len });
        }
        let (base, _) = lm.prefill(head)?;
        Ok(Self { guided: base.clone(), base, pending, emitted: Vec::new(), context_len: context.len() })
    }
}

/// One step of guided decoding: optimise, fold, choose, advance both caches.
/// With `clf` absent (or `steps == 0`) this is a plain greedy step.
pub fn guided_step(
    state: &mut DecodeState,
    lm: &Lm,
    clf: Option<&Classifier>,
    cfg: &GuidanceConfig,
) -> Result<TraceRow, GuidanceError> {
    let base_logits = lm.forward_step(state.pending, &mut state.base)?;
    let base_probs = softmax(&base_logits);
    let index = state.emitted.len();
    let mut row = TraceRow {
        index,
        token: 0,
        clf_loss_initial: 0.0,
        clf_loss_final: 0.0,
        ce_initial: 0.0,
        ce_final: 0.0,
        losses: Vec::new(),
        kl: 0.0,
        halvings: 0,
        rejected_steps: 0,
    };
    let guided_logits = match clf {
        Some(clf) if cfg.steps > 0 => {
            let base_t = Tensor::row(base_probs.clone());
            let problem = TokenProblem {
                lm,
                clf,
                guided: &state.guided,
                pending: state.pending,
                emitted: &state.emitted,
                base_probs: &base_t,
                lambda0: cfg.lambda0,
                lambda1: cfg.lambda1,
            };
            // cache rows of generated tokens start at the context length
            let opt = optimise(&problem, cfg, state.context_len)?;
            row.clf_loss_initial = opt.initial.clf;
            row.clf_loss_final = opt.last.clf;
            row.ce_initial = opt.initial.ce;
            row.ce_final = opt.last.ce;
            row.losses = opt.losses;
            row.halvings = opt.halvings;
            row.rejected_steps = opt.rejected;
            if !row.losses.iter().all(|l| l.is_finite()) {
                return Err(GuidanceError::NonFinite { token_index: index, trace: vec![row] });
            }
            if !opt.delta.is_zero() {
                for (c, d) in state.guided.keys.iter_mut().chain(state.guided.values.iter_mut()).zip(opt.delta.tensors()) {
                    c.add_assign(d)?;
                }
            }
            lm.forward_step(state.pending, &mut state.guided)?
        }
        _ => {
            if let Some(clf) = clf {
                let l = clf.loss(&crate::classifier::SoftSequence { hard: state.emitted.clone(), soft: base_probs.clone() })?;
                row.clf_loss_initial = l as f64;
                row.clf_loss_final = l as f64;
            }
            let h = crate::ndiff::entropy(&base_probs);
            row.ce_initial = h;
            row.ce_final = h;
            lm.forward_step(state.pending, &mut state.guided)?
        }
    };
    let guided_probs = softmax(&guided_logits);
    row.kl = kl_divergence(&guided_probs, &base_probs).max(0.0);
    let candidates = top_k(&base_probs, cfg.top_k);
    let token = argmax_among(&guided_logits, &candidates) as TokenId;
    row.token = token;
    state.emitted.push(token);
    state.pending = token;
    Ok(row)
}

fn decode(lm: &Lm, clf: Option<&Classifier>, context: &[TokenId], cfg: &GuidanceConfig) -> Result<Decoded, GuidanceError> {
    cfg.validate()?;
    if let Some(c) = clf {
        if c.config.vocab_size != lm.config.vocab_size {
            return Err(GuidanceError::VocabMismatch { lm: lm.config.vocab_size, clf: c.config.vocab_size });
        }
    }
    let lm_fp = lm.fingerprint();
    let clf_fp = clf.map(Classifier::fingerprint);
    let mut state = DecodeState::new(lm, context, cfg.max_new)?;
    let mut trace = Vec::new();
    let mut ended = false;
    while state.emitted.len() < cfg.max_new {
        let row = match guided_step(&mut state, lm, clf, cfg) {
            Ok(r) => r,
            Err(GuidanceError::NonFinite { token_index, trace: mut last }) => {
                let mut all = trace;
                all.append(&mut last);
                return Err(GuidanceError::NonFinite { token_index, trace: all });
            }
            Err(e) => return Err(e),
        };
        let tok = row.token;
        trace.push(row);
        if tok == EOS {
            ended = true;
            break;
        }
    }
    if lm.fingerprint() != lm_fp {
        return Err(GuidanceError::WeightsChanged { which: "language model" });
    }
    if clf.map(Classifier::fingerprint) != clf_fp {
        return Err(GuidanceError::WeightsChanged { which: "classifier" });
    }
    let mut tokens = state.emitted;
    if ended {
        tokens.pop();
    }
    Ok(Decoded { tokens, ended_with_eos: ended, trace })
}

/// Greedy decoding over the base model's top-k candidates. The classifier,
/// if given, is only used to fill in trace scores.
pub fn baseline_decode(lm: &Lm, clf: Option<&Classifier>, context: &[TokenId], cfg: &GuidanceConfig) -> Result<Decoded, GuidanceError> {
    let plain = GuidanceConfig { steps: 0, ..cfg.clone() };
    decode(lm, clf, context, &plain)
}

pub fn guided_decode(lm: &Lm, clf: &Classifier, context: &[TokenId], cfg: &GuidanceConfig) -> Result<Decoded, GuidanceError> {
    decode(lm, Some(clf), context, cfg)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::ClassifierConfig;
    use crate::lm::LmConfig;

    fn models() -> (Lm, Classifier) {
        let lm = Lm::new(LmConfig { vocab_size: 10, d_model: 8, heads: 2, layers: 2, d_ff: 16, max_len: 16, ln_eps: 1e-5 }, 1)
            .unwrap();
        let clf = Classifier::new(ClassifierConfig { vocab_size: 10, d_embed: 4, hidden: 6 }, 2).unwrap();
        (lm, clf)
    }

    #[test]
    fn top_k_and_argmax_break_ties_low() {
        assert_eq!(top_k(&[0.2, 0.4, 0.2, 0.2], 3), vec![1, 0, 2]);
        assert_eq!(argmax_among(&[1.0, 3.0, 3.0, 0.0], &[3, 2, 1]), 1);
    }

    #[test]
    fn zero_lambda1_and_zero_steps_match_baseline() {
        let (lm, clf) = models();
        let cfg = GuidanceConfig { max_new: 8, ..GuidanceConfig::default() };
        let base = baseline_decode(&lm, Some(&clf), &[2, 5, 6], &cfg).unwrap();
        let g0 = guided_decode(&lm, &clf, &[2, 5, 6], &GuidanceConfig { lambda1: 0.0, ..cfg.clone() }).unwrap();
        let n0 = guided_decode(&lm, &clf, &[2, 5, 6], &GuidanceConfig { steps: 0, ..cfg.clone() }).unwrap();
        assert_eq!(g0.tokens, base.tokens);
        assert_eq!(n0.tokens, base.tokens);
        assert!(g0.trace.iter().all(|r| r.kl == 0.0));
    }

    #[test]
    fn accepted_losses_never_increase() {
        let (lm, clf) = models();
        let cfg = GuidanceConfig { max_new: 6, alpha: 0.5, ..GuidanceConfig::default() };
        let out = guided_decode(&lm, &clf, &[2, 5], &cfg).unwrap();
        for row in &out.trace {
            assert!(row.losses.windows(2).all(|w| w[1] <= w[0]), "{row:?}");
        }
    }

    #[test]
    fn generated_only_leaves_context_rows() {
        let (lm, clf) = models();
        let cfg = GuidanceConfig { alpha: 1.0, generated_only: true, ..GuidanceConfig::default() };
        let mut state = DecodeState::new(&lm, &[2, 5, 6], 4).unwrap();
        let before = state.guided.clone();
        guided_step(&mut state, &lm, Some(&clf), &cfg).unwrap();
        // the first step has no generated rows to move
        for l in 0..2 {
            let p = before.positions();
            assert_eq!(&state.guided.keys[l].data()[..p * 8], before.keys[l].data());
        }
    }

    #[test]
    fn context_must_fit() {
        let (lm, clf) = models();
        let cfg = GuidanceConfig { max_new: 14, ..GuidanceConfig::default() };
        assert!(matches!(guided_decode(&lm, &clf, &[2, 5, 6], &cfg), Err(GuidanceError::PrefixTooLong { .. })));
        assert!(matches!(guided_decode(&lm, &clf, &[], &GuidanceConfig::default()), Err(GuidanceError::EmptyContext)));
    }
}
