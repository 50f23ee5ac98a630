//! Check routines shared by the crate test suites and the acceptance run.

use std::ops::Range;

use capguide::classifier::Classifier;
use capguide::guidance::{CacheDelta, TokenProblem};
use capguide::lm::{ContextCache, Lm};
use capguide::ndiff::{analytic_gradients, finite_diff_check, softmax, GradCheckConfig, GradCheckReport, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{guidance_loss_delta, RefCache, RefClassifier, RefLm};

/// `n` random sequences with lengths in `1..=max_len` over ids `0..vocab`.
pub fn random_sequences(vocab: usize, n: usize, max_len: usize, seed: u64) -> Vec<Vec<u32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let len = rng.random_range(1..=max_len);
            (0..len).map(|_| rng.random_range(0..vocab as u32)).collect()
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default)]
pub struct CacheAgreement {
    /// Token-by-token cached decoding vs one full forward pass.
    pub incremental_vs_full: f32,
    /// Full forward pass vs the f64 reference.
    pub full_vs_reference: f64,
}

pub fn cache_agreement(lm: &Lm, seqs: &[Vec<u32>]) -> CacheAgreement {
    let reference = RefLm::new(lm);
    let mut out = CacheAgreement::default();
    for ids in seqs {
        let full = lm.forward_full(ids).expect("full forward");
        let mut cache = ContextCache::empty(&lm.config);
        for (t, &tok) in ids.iter().enumerate() {
            let step = lm.forward_step(tok, &mut cache).expect("cached step");
            for (a, b) in step.iter().zip(full.row_slice(t)) {
                out.incremental_vs_full = out.incremental_vs_full.max((a - b).abs());
            }
        }
        for (t, row) in reference.forward(ids).iter().enumerate() {
            for (a, &b) in row.iter().zip(full.row_slice(t)) {
                out.full_vs_reference = out.full_vs_reference.max((a - b as f64).abs());
            }
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    Key,
    Value,
}

/// A block of cache rows in one layer's keys or values.
#[derive(Clone, Debug)]
pub struct CacheSite {
    pub layer: usize,
    pub slot: Slot,
    pub rows: Range<usize>,
}

impl CacheSite {
    fn index(&self) -> usize {
        2 * self.layer + usize::from(self.slot == Slot::Value)
    }

    fn label(&self, what: &str) -> String {
        let s = if self.slot == Slot::Key { "K" } else { "V" };
        format!("{what} d/d{s}[layer {}, rows {}..{}]", self.layer, self.rows.start, self.rows.end)
    }
}

fn rows_of(t: &Tensor, rows: &Range<usize>) -> Tensor {
    let d = t.cols();
    Tensor::new(vec![rows.len(), d], t.data()[rows.start * d..rows.end * d].to_vec()).expect("row block")
}

fn cache_bufs(cache: &ContextCache) -> Vec<&Tensor> {
    cache.keys.iter().zip(&cache.values).flat_map(|(k, v)| [k, v]).collect()
}

/// Deterministic weights for a linear functional of the logits.
fn probe(vocab: usize, seed: u64) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..vocab).map(|_| rng.random_range(-1.0..1.0)).collect()
}

/// Gradient of `sum(r * logits)` for the step after `ids`, taken through the
/// graph, against central differences of the f64 reference.
pub fn logits_cache_gradcheck(lm: &Lm, ids: &[u32], site: &CacheSite, cfg: &GradCheckConfig) -> GradCheckReport {
    let (head, pending) = (&ids[..ids.len() - 1], ids[ids.len() - 1]);
    let (cache, _) = lm.prefill(head).expect("prefill");
    let bufs = cache_bufs(&cache);
    let target = bufs[site.index()];
    let d = target.cols();
    let r = probe(lm.config.vocab_size, 99);
    let param = rows_of(target, &site.rows);
    let before = rows_of(target, &(0..site.rows.start));
    let after = rows_of(target, &(site.rows.end..target.rows()));
    let (_, grads) = analytic_gradients(std::slice::from_ref(&param), |g, vars| {
        let vars_lm = lm.params.bind(g, false);
        let mut parts = Vec::new();
        if before.numel() > 0 {
            parts.push(g.input(before.clone()));
        }
        parts.push(vars[0]);
        if after.numel() > 0 {
            parts.push(g.input(after.clone()));
        }
        let spliced = g.concat_rows(&parts)?;
        let mut kv = Vec::new();
        for l in 0..cache.layers() {
            let k = if site.index() == 2 * l { spliced } else { g.input(cache.keys[l].clone()) };
            let v = if site.index() == 2 * l + 1 { spliced } else { g.input(cache.values[l].clone()) };
            kv.push((k, v));
        }
        let step = lm.step_graph(g, &vars_lm, pending, &kv, cache.positions()).expect("step graph");
        let w = g.input(Tensor::row(r.clone()));
        let m = g.mul(step.logits, w)?;
        g.sum(m)
    })
    .expect("analytic gradient");
    let reference = RefLm::new(lm);
    let base = RefCache::from_tensors(&cache.keys, &cache.values);
    finite_diff_check(&site.label("logits"), &[param], &grads, cfg, |x| {
        let mut c = base.clone();
        let buf = if site.slot == Slot::Key { &mut c.keys[site.layer] } else { &mut c.values[site.layer] };
        buf[site.rows.start * d..site.rows.end * d].copy_from_slice(&x[0]);
        let logits = reference.step(pending, &mut c);
        logits.iter().zip(&r).map(|(l, &w)| l * w as f64).sum()
    })
}

/// Inputs for one token's guidance objective: the cache holds every token
/// of `ids` but the last, which is pending; the final `emitted` tokens of
/// `ids` count as caption tokens for the classifier.
pub struct GuidanceFixture<'a> {
    pub lm: &'a Lm,
    pub clf: &'a Classifier,
    pub ids: &'a [u32],
    pub emitted: usize,
    pub lambda0: f64,
    pub lambda1: f64,
}

/// Gradient of the guidance objective w.r.t. the cache perturbation, as
/// computed by the decoder, against the f64 reference.
pub fn guidance_gradcheck(fx: &GuidanceFixture<'_>, site: &CacheSite, cfg: &GradCheckConfig) -> GradCheckReport {
    let (head, pending) = (&fx.ids[..fx.ids.len() - 1], fx.ids[fx.ids.len() - 1]);
    let emitted = &fx.ids[fx.ids.len() - fx.emitted..];
    let (cache, _) = fx.lm.prefill(head).expect("prefill");
    let base_logits = fx.lm.forward_step(pending, &mut cache.clone()).expect("base step");
    let base_probs = softmax(&base_logits);
    let base_t = Tensor::row(base_probs.clone());
    let problem = TokenProblem {
        lm: fx.lm,
        clf: fx.clf,
        guided: &cache,
        pending,
        emitted,
        base_probs: &base_t,
        lambda0: fx.lambda0,
        lambda1: fx.lambda1,
    };
    let zero = CacheDelta::zeros_like(&cache);
    let (obj, _) = problem.evaluate(&zero, true).expect("objective");
    let grad = obj.grad.expect("gradient");
    let gbufs: Vec<&Tensor> = grad.keys.iter().zip(&grad.values).flat_map(|(k, v)| [k, v]).collect();
    let analytic = rows_of(gbufs[site.index()], &site.rows);
    let param = Tensor::zeros(analytic.shape());
    let d = analytic.cols();
    let lm_ref = RefLm::new(fx.lm);
    let clf_ref = RefClassifier::new(fx.clf);
    let base = RefCache::from_tensors(&cache.keys, &cache.values);
    let probs64: Vec<f64> = base_probs.iter().map(|&p| p as f64).collect();
    let sizes: Vec<usize> = cache_bufs(&cache).iter().map(|t| t.numel()).collect();
    finite_diff_check(&site.label("guidance loss"), &[param], &[analytic], cfg, |x| {
        let mut delta: Vec<Vec<f64>> = sizes.iter().map(|&n| vec![0.0; n]).collect();
        delta[site.index()][site.rows.start * d..site.rows.end * d].copy_from_slice(&x[0]);
        guidance_loss_delta(&lm_ref, &clf_ref, &base, &delta, pending, emitted, &probs64, fx.lambda0, fx.lambda1)
    })
}

/// Gradient of `-log p(audible)` w.r.t. the soft position's distribution.
pub fn soft_input_gradcheck(clf: &Classifier, hard: &[u32], soft: &[f32], cfg: &GradCheckConfig) -> GradCheckReport {
    let param = Tensor::row(soft.to_vec());
    let (_, grads) = analytic_gradients(std::slice::from_ref(&param), |g, vars| {
        let cv = clf.params.bind(g, false);
        let logits = clf.soft_logits_graph(g, &cv, hard, vars[0]).expect("soft logits");
        g.nll(logits, &[Some(capguide::classifier::AUDIBLE)])
    })
    .expect("analytic gradient");
    let reference = RefClassifier::new(clf);
    finite_diff_check("classifier loss d/dsoft", &[param], &grads, cfg, |x| reference.loss(hard, &x[0]))
}
