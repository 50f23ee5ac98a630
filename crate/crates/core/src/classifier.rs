//! Audibility classifier: mean-pooled token embeddings into a two-layer MLP.
//!
//! Besides hard token ids it accepts one trailing "soft" position given as a
//! distribution over the vocabulary, embedded as the expected embedding so
//! the score is differentiable in that distribution.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::lm::{load_model, save_model};
use crate::ndiff::{softmax, Graph, NdError, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary};

/// Output index of the audible class.
pub const AUDIBLE: usize = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierConfig {
    pub vocab_size: usize,
    pub d_embed: usize,
    pub hidden: usize,
}

impl ClassifierConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, d_embed: 32, hidden: 64 }
    }
}

#[derive(Debug, Error)]
pub enum ClassifierError {
    #[error("cannot classify an empty token sequence")]
    EmptyInput,
    #[error("soft token distribution is invalid: {0}")]
    BadSoft(String),
    #[error("token id {0} is outside the vocabulary")]
    BadToken(TokenId),
    #[error("invalid classifier config: {0}")]
    Config(String),
    #[error(transparent)]
    Numeric(#[from] NdError),
    #[error(transparent)]
    Io(#[from] IoError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierParams {
    pub emb: Tensor,
    pub w1: Tensor,
    pub b1: Tensor,
    pub w2: Tensor,
    pub b2: Tensor,
}

#[derive(Clone, Copy, Debug)]
pub struct ClassifierVars {
    pub emb: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl ClassifierVars {
    pub fn all(&self) -> Vec<Var> {
        vec![self.emb, self.w1, self.b1, self.w2, self.b2]
    }
}

const NAMES: [&str; 5] = ["emb", "w1", "b1", "w2", "b2"];

impl ClassifierParams {
    pub fn init(cfg: &ClassifierConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = |shape: &[usize], std: f32| {
            let normal = Normal::new(0.0f32, std).expect("valid std");
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        Self {
            emb: w(&[cfg.vocab_size, cfg.d_embed], 0.1),
            w1: w(&[cfg.d_embed, cfg.hidden], (1.0 / cfg.d_embed as f32).sqrt()),
            b1: Tensor::zeros(&[1, cfg.hidden]),
            w2: w(&[cfg.hidden, 2], (1.0 / cfg.hidden as f32).sqrt()),
            b2: Tensor::zeros(&[1, 2]),
        }
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        NAMES.iter().map(|n| n.to_string()).zip([&self.emb, &self.w1, &self.b1, &self.w2, &self.b2]).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.emb, &mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    pub fn fingerprint(&self) -> String {
        let named = self.named();
        io::fingerprint(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> ClassifierVars {
        let mut bind = |t: &'a Tensor| if trainable { g.param_ref(t) } else { g.constant(t) };
        ClassifierVars { emb: bind(&self.emb), w1: bind(&self.w1), b1: bind(&self.b1), w2: bind(&self.w2), b2: bind(&self.b2) }
    }
}

/// Emitted tokens plus one soft position (a distribution over the vocabulary).
#[derive(Clone, Debug, PartialEq)]
pub struct SoftSequence {
    pub hard: Vec<TokenId>,
    pub soft: Vec<f32>,
}

impl SoftSequence {
    pub fn validate(&self, vocab_size: usize) -> Result<(), ClassifierError> {
        if self.soft.len() != vocab_size {
            return Err(ClassifierError::BadSoft(format!("length {} for vocabulary {vocab_size}", self.soft.len())));
        }
        if self.soft.iter().any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(ClassifierError::BadSoft("entries must be finite and non-negative".into()));
        }
        let sum: f64 = self.soft.iter().map(|&p| p as f64).sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(ClassifierError::BadSoft(format!("sums to {sum}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Classifier {
    pub config: ClassifierConfig,
    pub params: ClassifierParams,
}

impl Classifier {
    pub fn new(config: ClassifierConfig, seed: u64) -> Result<Self, ClassifierError> {
        if config.vocab_size == 0 || config.d_embed == 0 || config.hidden == 0 {
            return Err(ClassifierError::Config(format!("all sizes must be positive: {config:?}")));
        }
        let params = ClassifierParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn check(&self, ids: &[TokenId]) -> Result<(), ClassifierError> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(ClassifierError::BadToken(t)),
            None => Ok(()),
        }
    }

    fn head(&self, g: &mut Graph<'_>, vars: &ClassifierVars, pooled: Var) -> Result<Var, ClassifierError> {
        let h = g.matmul(pooled, vars.w1)?;
        let h = g.add_row(h, vars.b1)?;
        let h = g.gelu(h)?;
        let o = g.matmul(h, vars.w2)?;
        Ok(g.add_row(o, vars.b2)?)
    }

    /// Pooled embeddings `[B x d_embed]`, one row per sequence.
    pub fn pooled_graph(&self, g: &mut Graph<'_>, vars: &ClassifierVars, batch: &[&[TokenId]]) -> Result<Var, ClassifierError> {
        let mut flat = Vec::new();
        let mut segments = Vec::with_capacity(batch.len());
        for ids in batch {
            if ids.is_empty() {
                return Err(ClassifierError::EmptyInput);
            }
            self.check(ids)?;
            let s = flat.len();
            flat.extend(ids.iter().map(|&t| t as usize));
            segments.push((s, flat.len()));
        }
        let e = g.gather(vars.emb, &flat)?;
        Ok(g.segment_mean(e, &segments)?)
    }

    /// Class logits `[B x 2]` for a batch of hard sequences.
    pub fn logits_graph(&self, g: &mut Graph<'_>, vars: &ClassifierVars, batch: &[&[TokenId]]) -> Result<Var, ClassifierError> {
        let pooled = self.pooled_graph(g, vars, batch)?;
        self.head(g, vars, pooled)
    }

    /// Class logits `[1 x 2]` for `hard` followed by the soft position `soft` (`[1 x V]`).
    pub fn soft_logits_graph(
        &self,
        g: &mut Graph<'_>,
        vars: &ClassifierVars,
        hard: &[TokenId],
        soft: Var,
    ) -> Result<Var, ClassifierError> {
        self.check(hard)?;
        let es = g.matmul(soft, vars.emb)?;
        let all = if hard.is_empty() {
            es
        } else {
            let ids: Vec<usize> = hard.iter().map(|&t| t as usize).collect();
            let eh = g.gather(vars.emb, &ids)?;
            g.concat_rows(&[eh, es])?
        };
        let pooled = g.segment_mean(all, &[(0, hard.len() + 1)])?;
        self.head(g, vars, pooled)
    }

    pub fn probs_hard(&self, ids: &[TokenId]) -> Result<[f32; 2], ClassifierError> {
        Ok(self.probs_batch(&[ids])?[0])
    }

    pub fn probs_batch(&self, batch: &[&[TokenId]]) -> Result<Vec<[f32; 2]>, ClassifierError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let logits = self.logits_graph(&mut g, &vars, batch)?;
        Ok(g.value(logits).data().chunks(2).map(|r| {
            let p = softmax(r);
            [p[0], p[1]]
        }).collect())
    }

    pub fn probs_soft(&self, seq: &SoftSequence) -> Result<[f32; 2], ClassifierError> {
        seq.validate(self.config.vocab_size)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let soft = g.input(Tensor::row(seq.soft.clone()));
        let logits = self.soft_logits_graph(&mut g, &vars, &seq.hard, soft)?;
        let p = softmax(g.value(logits).data());
        Ok([p[0], p[1]])
    }

    /// `-log p(audible)` for a soft sequence.
    pub fn loss(&self, seq: &SoftSequence) -> Result<f32, ClassifierError> {
        seq.validate(self.config.vocab_size)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let soft = g.input(Tensor::row(seq.soft.clone()));
        let logits = self.soft_logits_graph(&mut g, &vars, &seq.hard, soft)?;
        let l = g.nll(logits, &[Some(AUDIBLE)])?;
        Ok(g.value(l).item()?)
    }

    /// Mean-pooled embedding of a hard sequence.
    pub fn pooled(&self, ids: &[TokenId]) -> Result<Vec<f32>, ClassifierError> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let p = self.pooled_graph(&mut g, &vars, &[ids])?;
        Ok(g.value(p).data().to_vec())
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), ClassifierError> {
        if vocab.len() != self.config.vocab_size {
            return Err(ClassifierError::Config(format!(
                "vocabulary has {} tokens, classifier {}",
                vocab.len(),
                self.config.vocab_size
            )));
        }
        Ok(save_model(path, "classifier", &self.config, vocab, &self.params.named())?)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary), ClassifierError> {
        let (config, vocab, tensors): (ClassifierConfig, _, _) = load_model(path, "classifier")?;
        let bad = |detail: String| ClassifierError::Io(IoError::Format { path: path.display().to_string(), detail });
        if vocab.len() != config.vocab_size {
            return Err(bad(format!("header vocabulary has {} tokens, config {}", vocab.len(), config.vocab_size)));
        }
        let reference = ClassifierParams::init(&config, 0);
        if tensors.len() != NAMES.len() {
            return Err(bad(format!("expected {} tensors, found {}", NAMES.len(), tensors.len())));
        }
        let mut ts = Vec::new();
        for ((name, t), (want, r)) in tensors.into_iter().zip(reference.named()) {
            if name != want || t.shape() != r.shape() {
                return Err(bad(format!("tensor {name} {:?} where {want} {:?} was expected", t.shape(), r.shape())));
            }
            ts.push(t);
        }
        let mut it = ts.into_iter();
        let mut next = || it.next().expect("length checked");
        let params = ClassifierParams { emb: next(), w1: next(), b1: next(), w2: next(), b2: next() };
        Ok((Self { config, params }, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clf() -> Classifier {
        Classifier::new(ClassifierConfig { vocab_size: 12, d_embed: 6, hidden: 5 }, 3).unwrap()
    }

    #[test]
    fn outputs_are_distributions() {
        let c = clf();
        let p = c.probs_hard(&[4, 5, 6]).unwrap();
        assert!((p[0] + p[1] - 1.0).abs() < 1e-6);
        assert!(matches!(c.probs_hard(&[]), Err(ClassifierError::EmptyInput)));
        assert!(matches!(c.probs_hard(&[12]), Err(ClassifierError::BadToken(12))));
    }

    #[test]
    fn one_hot_soft_equals_hard() {
        let c = clf();
        for v in 0..12 {
            let mut soft = vec![0.0; 12];
            soft[v] = 1.0;
            let s = c.probs_soft(&SoftSequence { hard: vec![4, 7], soft }).unwrap();
            let h = c.probs_hard(&[4, 7, v as TokenId]).unwrap();
            assert!((s[1] - h[1]).abs() <= 1e-6, "{v}: {s:?} vs {h:?}");
        }
    }

    #[test]
    fn soft_vector_is_validated() {
        let c = clf();
        let bad = SoftSequence { hard: vec![4], soft: vec![0.5; 12] };
        assert!(matches!(c.probs_soft(&bad), Err(ClassifierError::BadSoft(_))));
        let short = SoftSequence { hard: vec![4], soft: vec![1.0] };
        assert!(matches!(c.probs_soft(&short), Err(ClassifierError::BadSoft(_))));
    }

    #[test]
    fn loss_is_negative_log_audible() {
        // zero output layer gives p = 0.5
        let mut c = clf();
        c.params.w2 = Tensor::zeros(&[5, 2]);
        let seq = SoftSequence { hard: vec![4], soft: vec![1.0 / 12.0; 12] };
        assert!((c.loss(&seq).unwrap() - std::f32::consts::LN_2).abs() < 1e-6);
        // loss falls as the audible bias grows
        let mut last = f32::INFINITY;
        for b in [-4.0, -1.0, 0.0, 1.0, 4.0, 12.0] {
            c.params.b2 = Tensor::row(vec![0.0, b]);
            let l = c.loss(&seq).unwrap();
            assert!(l >= 0.0 && l < last);
            last = l;
        }
        assert!(last < 1e-5);
    }

    #[test]
    fn uniform_soft_pool_is_inside_hard_envelope() {
        let c = clf();
        let hard = [4, 9];
        let pooled_all: Vec<Vec<f32>> = (0..12).map(|v| c.pooled(&[4, 9, v]).unwrap()).collect();
        let mut g = Graph::new();
        let vars = c.params.bind(&mut g, false);
        let soft = g.input(Tensor::row(vec![1.0 / 12.0; 12]));
        let es = g.matmul(soft, vars.emb).unwrap();
        let eh = g.gather(vars.emb, &[4, 9]).unwrap();
        let all = g.concat_rows(&[eh, es]).unwrap();
        let p = g.segment_mean(all, &[(0, hard.len() + 1)]).unwrap();
        for (j, &x) in g.value(p).data().iter().enumerate() {
            let lo = pooled_all.iter().map(|r| r[j]).fold(f32::INFINITY, f32::min);
            let hi = pooled_all.iter().map(|r| r[j]).fold(f32::NEG_INFINITY, f32::max);
            assert!(x >= lo - 1e-6 && x <= hi + 1e-6);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let c = Classifier::new(ClassifierConfig::new(5), 1).unwrap();
        let vocab = Vocabulary::from_tokens(["<pad>", "<unk>", "<bos>", "<eos>", "x"].iter().map(|s| s.to_string()).collect())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clf.ckpt");
        c.save(&path, &vocab).unwrap();
        let (back, _) = Classifier::load(&path).unwrap();
        assert_eq!(back.fingerprint(), c.fingerprint());
    }
}
