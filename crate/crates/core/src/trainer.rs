//! AdamW training loops for the classifier and the language model.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::classifier::{Classifier, ClassifierConfig, ClassifierError};
use crate::corpus::{ConditionedCaption, Label, LabeledCaption, SEPARATOR};
use crate::lm::{Lm, LmConfig, LmError};
use crate::ndiff::{Graph, NdError, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary, BOS, EOS, PAD};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Multiply the learning rate by `decay_factor` every `decay_every` epochs.
    pub decay_every: usize,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 3e-4,
            batch_size: 64,
            epochs: 40,
            decay_every: 10,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            seed: 0,
        }
    }
}

impl OptimConfig {
    /// Learning rate for a 1-indexed epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let k = (epoch.max(1) - 1) / self.decay_every.max(1);
        self.lr * self.decay_factor.powi(k as i32)
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0) || self.epochs == 0 || self.batch_size == 0 || self.decay_every == 0 {
            return Err(TrainError::Config(format!("lr, epochs, batch_size, decay_every must be positive: {self:?}")));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(TrainError::Config("betas must be in [0,1) and eps positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data is unusable: {0}")]
    Data(String),
    #[error("{} sequence(s) exceed max_len {max}: {}", .offenders.len(), .offenders.iter().map(|(i, n)| format!("#{i} (length {n})")).collect::<Vec<_>>().join(", "))]
    TooLong { max: usize, offenders: Vec<(usize, usize)> },
    #[error("non-finite training loss at epoch {epoch}")]
    NonFinite { epoch: usize },
    #[error(transparent)]
    Numeric(#[from] NdError),
    #[error(transparent)]
    Lm(#[from] LmError),
    #[error(transparent)]
    Classifier(#[from] ClassifierError),
}

/// Decoupled weight decay applied before the adaptive update.
pub struct AdamW {
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: i32,
    cfg: OptimConfig,
}

impl AdamW {
    pub fn new(cfg: &OptimConfig, shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            t: 0,
            cfg: cfg.clone(),
        }
    }

    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t);
        let bc2 = 1.0 - c.beta2.powi(self.t);
        let (b1, b2) = (c.beta1 as f32, c.beta2 as f32);
        let decay = (1.0 - lr * c.weight_decay) as f32;
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = c.eps as f32;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((x, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                *x *= decay;
                *x -= step * *mi / (vi.sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    /// Accuracy for the classifier, perplexity for the LM.
    pub val_metric: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub model: String,
    pub metric: String,
    pub seed: u64,
    pub optim: OptimConfig,
    pub model_config: serde_json::Value,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub fingerprint: String,
    pub checkpoint: Option<String>,
    /// Held-out score, when the caller evaluated one.
    #[serde(default)]
    pub test_metric: Option<f64>,
}

fn grads_of(g: &Graph<'_>, vars: &[Var], params: &[(String, &Tensor)]) -> Vec<Tensor> {
    vars.iter()
        .zip(params)
        .map(|(&v, (_, p))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect()
}

fn batches(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(size).map(<[usize]>::to_vec).collect()
}

pub fn encode_labeled(vocab: &Vocabulary, set: &[LabeledCaption]) -> Result<Vec<(Vec<TokenId>, usize)>, TrainError> {
    set.iter()
        .enumerate()
        .map(|(i, c)| {
            let ids = vocab.encode(&c.text);
            if ids.is_empty() {
                Err(TrainError::Data(format!("labeled caption #{i} has no tokens")))
            } else {
                Ok((ids, c.label.index()))
            }
        })
        .collect()
}

pub fn evaluate_classifier(clf: &Classifier, vocab: &Vocabulary, set: &[LabeledCaption]) -> Result<f64, TrainError> {
    if set.is_empty() {
        return Err(TrainError::Data("empty evaluation set".into()));
    }
    let data = encode_labeled(vocab, set)?;
    accuracy(clf, &data)
}

fn accuracy(clf: &Classifier, data: &[(Vec<TokenId>, usize)]) -> Result<f64, TrainError> {
    let mut correct = 0;
    for chunk in data.chunks(512) {
        let refs: Vec<&[TokenId]> = chunk.iter().map(|(ids, _)| ids.as_slice()).collect();
        for (p, (_, y)) in clf.probs_batch(&refs)?.iter().zip(chunk) {
            // ties go to class 0
            let pred = usize::from(p[1] > p[0]);
            correct += usize::from(pred == *y);
        }
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Trains on `train`, keeping the parameters of the best validation epoch.
pub fn train_classifier(
    train: &[LabeledCaption],
    val: &[LabeledCaption],
    vocab: &Vocabulary,
    config: ClassifierConfig,
    optim: &OptimConfig,
) -> Result<(Classifier, TrainReport), TrainError> {
    optim.validate()?;
    if !(train.iter().any(|c| c.label == Label::Audible) && train.iter().any(|c| c.label == Label::NonAudible)) {
        return Err(TrainError::Data("training set must contain both classes".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Data("empty validation set".into()));
    }
    let tr = encode_labeled(vocab, train)?;
    let va = encode_labeled(vocab, val)?;
    let mut clf = Classifier::new(config, optim.seed)?;
    let shapes: Vec<usize> = clf.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(optim, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    rng.set_stream(11);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Classifier)> = None;
    for epoch in 1..=optim.epochs {
        let lr = optim.lr_at(epoch);
        let mut loss_sum = 0.0;
        let mut count = 0;
        for batch in batches(tr.len(), optim.batch_size, &mut rng) {
            let ids: Vec<&[TokenId]> = batch.iter().map(|&i| tr[i].0.as_slice()).collect();
            let targets: Vec<Option<usize>> = batch.iter().map(|&i| Some(tr[i].1)).collect();
            let grads = {
                let mut g = Graph::new();
                let vars = clf.params.bind(&mut g, true);
                let logits = clf.logits_graph(&mut g, &vars, &ids)?;
                let loss = g.nll(logits, &targets)?;
                g.backward(loss)?;
                loss_sum += g.value(loss).item()? as f64 * batch.len() as f64;
                count += batch.len();
                grads_of(&g, &vars.all(), &clf.params.named())
            };
            opt.step(&mut clf.params.tensors_mut(), &grads, lr);
        }
        let train_loss = loss_sum / count as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        let acc = accuracy(&clf, &va)?;
        log::info!("classifier epoch {epoch}: lr {lr:.2e} loss {train_loss:.4} val acc {acc:.4}");
        epochs.push(EpochRecord { epoch, lr, train_loss, val_metric: acc });
        if best.as_ref().is_none_or(|b| acc > b.1) {
            best = Some((epoch, acc, clf.clone()));
        }
    }
    let (best_epoch, best_val_metric, clf) = best.expect("at least one epoch");
    let report = TrainReport {
        model: "classifier".into(),
        metric: "accuracy".into(),
        seed: optim.seed,
        optim: optim.clone(),
        model_config: serde_json::to_value(&clf.config).expect("config serializes"),
        epochs,
        best_epoch,
        best_val_metric,
        fingerprint: clf.fingerprint(),
        checkpoint: None,
        test_metric: None,
    };
    Ok((clf, report))
}

/// One LM training sequence: `BOS prefix sep caption EOS`.
#[derive(Clone, Debug, PartialEq)]
pub struct LmExample {
    pub ids: Vec<TokenId>,
    /// Index of the separator; targets at input positions before it are masked.
    pub sep: usize,
}

impl LmExample {
    /// Next-token targets for input positions `0..len-1`, masked before the separator.
    pub fn targets(&self) -> Vec<Option<usize>> {
        (0..self.ids.len() - 1).map(|t| (t >= self.sep).then(|| self.ids[t + 1] as usize)).collect()
    }
}

/// Token ids of the separator, or an error if the vocabulary lacks it.
pub fn separator_id(vocab: &Vocabulary) -> Result<TokenId, TrainError> {
    vocab.id(SEPARATOR).ok_or_else(|| TrainError::Data(format!("vocabulary has no separator token {SEPARATOR:?}")))
}

/// `BOS prefix sep`, the context a caption is decoded from.
pub fn lm_context(vocab: &Vocabulary, prefix: &str) -> Result<Vec<TokenId>, TrainError> {
    let mut ids = vec![BOS];
    ids.extend(vocab.encode(prefix));
    ids.push(separator_id(vocab)?);
    Ok(ids)
}

pub fn lm_examples(vocab: &Vocabulary, set: &[ConditionedCaption], max_len: usize) -> Result<Vec<LmExample>, TrainError> {
    let mut out = Vec::with_capacity(set.len());
    let mut offenders = Vec::new();
    for (i, c) in set.iter().enumerate() {
        let mut ids = lm_context(vocab, &c.prefix)?;
        let sep = ids.len() - 1;
        ids.extend(vocab.encode(&c.caption));
        ids.push(EOS);
        if ids.len() > max_len {
            offenders.push((i, ids.len()));
        }
        out.push(LmExample { ids, sep });
    }
    if !offenders.is_empty() {
        return Err(TrainError::TooLong { max: max_len, offenders });
    }
    Ok(out)
}

/// Right-pads a batch to its longest input; returns (ids, targets, len).
fn pad_batch(batch: &[&LmExample], targets: &[Vec<Option<usize>>]) -> (Vec<TokenId>, Vec<Option<usize>>, usize) {
    let len = batch.iter().map(|e| e.ids.len() - 1).max().unwrap_or(0);
    let mut ids = Vec::with_capacity(batch.len() * len);
    let mut tg = Vec::with_capacity(batch.len() * len);
    for (e, t) in batch.iter().zip(targets) {
        let n = e.ids.len() - 1;
        ids.extend_from_slice(&e.ids[..n]);
        ids.extend(std::iter::repeat_n(PAD, len - n));
        tg.extend_from_slice(t);
        tg.extend(std::iter::repeat_n(None, len - n));
    }
    (ids, tg, len)
}

/// Mean next-token loss of `lm` over `batch` with explicit per-position
/// targets; entries at masked positions (before the separator) are ignored
/// whatever they hold.
pub fn lm_batch_loss(lm: &Lm, batch: &[&LmExample], targets: &[Vec<Option<usize>>]) -> Result<f32, TrainError> {
    let masked: Vec<Vec<Option<usize>>> = batch
        .iter()
        .zip(targets)
        .map(|(e, t)| t.iter().enumerate().map(|(i, &x)| if i >= e.sep { x } else { None }).collect())
        .collect();
    let (ids, tg, len) = pad_batch(batch, &masked);
    let mut g = Graph::new();
    let vars = lm.params.bind(&mut g, false);
    let logits = lm.logits_graph(&mut g, &vars, &ids, batch.len(), len)?;
    let loss = g.nll(logits, &tg)?;
    Ok(g.value(loss).item()?)
}

/// Perplexity over caption targets (exp of the token-weighted mean NLL).
pub fn lm_perplexity(lm: &Lm, data: &[LmExample]) -> Result<f64, TrainError> {
    let mut nll = 0.0f64;
    let mut tokens = 0usize;
    let refs: Vec<&LmExample> = data.iter().collect();
    for chunk in refs.chunks(128) {
        let targets: Vec<_> = chunk.iter().map(|e| e.targets()).collect();
        let n: usize = targets.iter().flatten().filter(|t| t.is_some()).count();
        if n == 0 {
            continue;
        }
        nll += lm_batch_loss(lm, chunk, &targets)? as f64 * n as f64;
        tokens += n;
    }
    if tokens == 0 {
        return Err(TrainError::Data("no caption tokens to evaluate".into()));
    }
    Ok((nll / tokens as f64).exp())
}

pub fn train_lm(
    train: &[ConditionedCaption],
    val: &[ConditionedCaption],
    vocab: &Vocabulary,
    config: LmConfig,
    optim: &OptimConfig,
) -> Result<(Lm, TrainReport), TrainError> {
    optim.validate()?;
    config.validate()?;
    if train.is_empty() || val.is_empty() {
        return Err(TrainError::Data("train and validation sets must be non-empty".into()));
    }
    if vocab.len() != config.vocab_size {
        return Err(TrainError::Config(format!("vocabulary has {} tokens, config {}", vocab.len(), config.vocab_size)));
    }
    let tr = lm_examples(vocab, train, config.max_len)?;
    let va = lm_examples(vocab, val, config.max_len)?;
    let mut lm = Lm::new(config, optim.seed)?;
    let shapes: Vec<usize> = lm.params.named().iter().map(|(_, t)| t.numel()).collect();
    let mut opt = AdamW::new(optim, &shapes);
    let mut rng = ChaCha8Rng::seed_from_u64(optim.seed);
    rng.set_stream(12);
    let mut epochs = Vec::new();
    let mut best: Option<(usize, f64, Lm)> = None;
    for epoch in 1..=optim.epochs {
        let lr = optim.lr_at(epoch);
        let mut nll = 0.0f64;
        let mut tokens = 0usize;
        for batch in batches(tr.len(), optim.batch_size, &mut rng) {
            let exs: Vec<&LmExample> = batch.iter().map(|&i| &tr[i]).collect();
            let targets: Vec<_> = exs.iter().map(|e| e.targets()).collect();
            let (ids, tg, len) = pad_batch(&exs, &targets);
            let n = tg.iter().filter(|t| t.is_some()).count();
            let grads = {
                let mut g = Graph::new();
                let vars = lm.params.bind(&mut g, true);
                let logits = lm.logits_graph(&mut g, &vars, &ids, exs.len(), len)?;
                let loss = g.nll(logits, &tg)?;
                g.backward(loss)?;
                nll += g.value(loss).item()? as f64 * n as f64;
                tokens += n;
                grads_of(&g, &vars.all(), &lm.params.named())
            };
            opt.step(&mut lm.params.tensors_mut(), &grads, lr);
        }
        let train_loss = nll / tokens.max(1) as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite { epoch });
        }
        let ppl = lm_perplexity(&lm, &va)?;
        log::info!("lm epoch {epoch}: lr {lr:.2e} loss {train_loss:.4} val ppl {ppl:.4}");
        epochs.push(EpochRecord { epoch, lr, train_loss, val_metric: ppl });
        if best.as_ref().is_none_or(|b| ppl < b.1) {
            best = Some((epoch, ppl, lm.clone()));
        }
    }
    let (best_epoch, best_val_metric, lm) = best.expect("at least one epoch");
    let report = TrainReport {
        model: "lm".into(),
        metric: "perplexity".into(),
        seed: optim.seed,
        optim: optim.clone(),
        model_config: serde_json::to_value(&lm.config).expect("config serializes"),
        epochs,
        best_epoch,
        best_val_metric,
        fingerprint: lm.fingerprint(),
        checkpoint: None,
        test_metric: None,
    };
    Ok((lm, report))
}
