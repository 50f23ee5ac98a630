//! Pre-layer-norm decoder-only transformer with an explicit key/value cache.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::io::{self, IoError};
use crate::ndiff::{AttnShape, Graph, NdError, Tensor, Var};
use crate::tokenizer::{TokenId, Vocabulary};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LmConfig {
    pub vocab_size: usize,
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub max_len: usize,
    pub ln_eps: f32,
}

impl LmConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self { vocab_size, d_model: 64, heads: 4, layers: 2, d_ff: 256, max_len: 48, ln_eps: 1e-5 }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    pub fn validate(&self) -> Result<(), LmError> {
        let bad = |m: String| Err(LmError::Config(m));
        if self.vocab_size == 0 || self.d_model == 0 || self.heads == 0 || self.layers == 0 || self.d_ff == 0 {
            return bad(format!("all sizes must be positive: {self:?}"));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.max_len < 2 {
            return bad(format!("max_len {} too small", self.max_len));
        }
        if !(self.ln_eps > 0.0) {
            return bad("ln_eps must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum LmError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of length {len} exceeds max_len {max}")]
    SequenceTooLong { len: usize, max: usize },
    #[error("context cache is full ({max} positions)")]
    CacheFull { max: usize },
    #[error("context cache does not match the model: {0}")]
    CacheMismatch(String),
    #[error("token id {0} is outside the vocabulary")]
    BadToken(TokenId),
    #[error(transparent)]
    Numeric(#[from] NdError),
    #[error(transparent)]
    Io(#[from] IoError),
}

macro_rules! layer_fields {
    ($mac:ident) => {
        $mac!(ln1_g, ln1_b, wq, wk, wv, wo, ln2_g, ln2_b, ff1_w, ff1_b, ff2_w, ff2_b);
    };
}

macro_rules! define_layer {
    ($($f:ident),*) => {
        #[derive(Clone, Debug, PartialEq)]
        pub struct LayerParams { $(pub $f: Tensor),* }

        #[derive(Clone, Copy, Debug)]
        pub struct LayerVars { $(pub $f: Var),* }

        impl LayerParams {
            const NAMES: &'static [&'static str] = &[$(stringify!($f)),*];

            fn tensors(&self) -> Vec<&Tensor> {
                vec![$(&self.$f),*]
            }

            fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
                vec![$(&mut self.$f),*]
            }

            fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> LayerVars {
                let mut bind = |t: &'a Tensor| if trainable { g.param_ref(t) } else { g.constant(t) };
                LayerVars { $($f: bind(&self.$f)),* }
            }

            fn take(map: &mut HashMap<String, Tensor>, l: usize) -> Result<Self, String> {
                Ok(Self { $($f: map.remove(&format!("layer{l}.{}", stringify!($f))).ok_or(format!("missing layer{l}.{}", stringify!($f)))?),* })
            }
        }

        impl LayerVars {
            fn all(&self) -> Vec<Var> {
                vec![$(self.$f),*]
            }
        }
    };
}

layer_fields!(define_layer);

#[derive(Clone, Debug, PartialEq)]
pub struct LmParams {
    pub tok_emb: Tensor,
    pub pos_emb: Tensor,
    pub layers: Vec<LayerParams>,
    pub lnf_g: Tensor,
    pub lnf_b: Tensor,
}

/// Graph handles for every parameter of an [`LmParams`].
#[derive(Clone, Debug)]
pub struct LmVars {
    pub tok_emb: Var,
    pub pos_emb: Var,
    pub layers: Vec<LayerVars>,
    pub lnf_g: Var,
    pub lnf_b: Var,
}

impl LmVars {
    /// Same order as [`LmParams::named`].
    pub fn all(&self) -> Vec<Var> {
        let mut v = vec![self.tok_emb, self.pos_emb];
        for l in &self.layers {
            v.extend(l.all());
        }
        v.extend([self.lnf_g, self.lnf_b]);
        v
    }
}

impl LmParams {
    pub fn init(cfg: &LmConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0f32, 0.02).expect("valid std");
        let mut w = |shape: &[usize]| {
            let n = shape.iter().product();
            Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).expect("shape")
        };
        let (d, f) = (cfg.d_model, cfg.d_ff);
        let tok_emb = w(&[cfg.vocab_size, d]);
        let pos_emb = w(&[cfg.max_len, d]);
        let layers = (0..cfg.layers)
            .map(|_| LayerParams {
                ln1_g: Tensor::full(&[1, d], 1.0),
                ln1_b: Tensor::zeros(&[1, d]),
                wq: w(&[d, d]),
                wk: w(&[d, d]),
                wv: w(&[d, d]),
                wo: w(&[d, d]),
                ln2_g: Tensor::full(&[1, d], 1.0),
                ln2_b: Tensor::zeros(&[1, d]),
                ff1_w: w(&[d, f]),
                ff1_b: Tensor::zeros(&[1, f]),
                ff2_w: w(&[f, d]),
                ff2_b: Tensor::zeros(&[1, d]),
            })
            .collect();
        Self { tok_emb, pos_emb, layers, lnf_g: Tensor::full(&[1, d], 1.0), lnf_b: Tensor::zeros(&[1, d]) }
    }

    /// Canonical parameter order, used for fingerprints and checkpoints.
    pub fn named(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![("tok_emb".to_string(), &self.tok_emb), ("pos_emb".to_string(), &self.pos_emb)];
        for (l, layer) in self.layers.iter().enumerate() {
            for (n, t) in LayerParams::NAMES.iter().zip(layer.tensors()) {
                out.push((format!("layer{l}.{n}"), t));
            }
        }
        out.push(("lnf_g".into(), &self.lnf_g));
        out.push(("lnf_b".into(), &self.lnf_b));
        out
    }

    /// Same order as [`LmParams::named`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.tok_emb, &mut self.pos_emb];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.lnf_g);
        out.push(&mut self.lnf_b);
        out
    }

    pub fn fingerprint(&self) -> String {
        let named = self.named();
        io::fingerprint(named.iter().map(|(n, t)| (n.as_str(), *t)))
    }

    /// Binds every tensor as a graph leaf; `trainable` leaves collect gradients.
    pub fn bind<'a>(&'a self, g: &mut Graph<'a>, trainable: bool) -> LmVars {
        let bind = |g: &mut Graph<'a>, t: &'a Tensor| if trainable { g.param_ref(t) } else { g.constant(t) };
        let tok_emb = bind(g, &self.tok_emb);
        let pos_emb = bind(g, &self.pos_emb);
        let layers = self.layers.iter().map(|l| l.bind(g, trainable)).collect();
        let lnf_g = bind(g, &self.lnf_g);
        let lnf_b = bind(g, &self.lnf_b);
        LmVars { tok_emb, pos_emb, layers, lnf_g, lnf_b }
    }

    fn from_named(cfg: &LmConfig, tensors: Vec<(String, Tensor)>) -> Result<Self, String> {
        let mut map: HashMap<String, Tensor> = tensors.into_iter().collect();
        let mut take = |n: &str| map.remove(n).ok_or(format!("missing {n}"));
        let tok_emb = take("tok_emb")?;
        let pos_emb = take("pos_emb")?;
        let lnf_g = take("lnf_g")?;
        let lnf_b = take("lnf_b")?;
        let layers = (0..cfg.layers).map(|l| LayerParams::take(&mut map, l)).collect::<Result<_, _>>()?;
        if let Some(extra) = map.keys().next() {
            return Err(format!("unexpected tensor {extra}"));
        }
        let p = Self { tok_emb, pos_emb, layers, lnf_g, lnf_b };
        let reference = Self::init(cfg, 0);
        for ((name, a), (_, b)) in p.named().iter().zip(reference.named()) {
            if a.shape() != b.shape() {
                return Err(format!("{name} has shape {:?}, config implies {:?}", a.shape(), b.shape()));
            }
        }
        Ok(p)
    }
}

/// Per-layer keys and values for every processed position, each `[positions x d]`
/// with heads laid out contiguously along the columns.
#[derive(Clone, Debug, PartialEq)]
pub struct ContextCache {
    pub keys: Vec<Tensor>,
    pub values: Vec<Tensor>,
}

impl ContextCache {
    pub fn empty(cfg: &LmConfig) -> Self {
        let t = Tensor::zeros(&[0, cfg.d_model]);
        Self { keys: vec![t.clone(); cfg.layers], values: vec![t; cfg.layers] }
    }

    pub fn positions(&self) -> usize {
        self.keys.first().map_or(0, |k| k.shape()[0])
    }

    pub fn layers(&self) -> usize {
        self.keys.len()
    }

    pub fn is_finite(&self) -> bool {
        self.keys.iter().chain(&self.values).all(Tensor::is_finite)
    }

    fn check(&self, cfg: &LmConfig) -> Result<(), LmError> {
        let p = self.positions();
        let ok = self.keys.len() == cfg.layers
            && self.values.len() == cfg.layers
            && self.keys.iter().chain(&self.values).all(|t| t.shape() == [p, cfg.d_model]);
        if ok {
            Ok(())
        } else {
            Err(LmError::CacheMismatch(format!("expected {} layers of [{p} x {}]", cfg.layers, cfg.d_model)))
        }
    }
}

/// Outputs of one incremental step built on a graph.
pub struct StepVars {
    /// `[1 x V]` next-token logits.
    pub logits: Var,
    /// This position's `(k, v)` rows per layer, each `[1 x d]`.
    pub new_kv: Vec<(Var, Var)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Lm {
    pub config: LmConfig,
    pub params: LmParams,
}

#[derive(Serialize, Deserialize)]
struct Header<C> {
    kind: String,
    config: C,
    vocab: Vec<String>,
}

pub(crate) fn save_model<C: Serialize>(
    path: &Path,
    kind: &str,
    config: &C,
    vocab: &Vocabulary,
    named: &[(String, &Tensor)],
) -> Result<(), IoError> {
    let header = Header { kind: kind.to_string(), config, vocab: vocab.tokens().to_vec() };
    let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
    io::save_container(path, &header, &refs)
}

pub(crate) fn load_model<C: for<'de> Deserialize<'de>>(
    path: &Path,
    kind: &str,
) -> Result<(C, Vocabulary, Vec<(String, Tensor)>), IoError> {
    let (header, tensors): (Header<C>, _) = io::load_container(path)?;
    let bad = |detail: String| IoError::Format { path: path.display().to_string(), detail };
    if header.kind != kind {
        return Err(bad(format!("expected a {kind} checkpoint, found {}", header.kind)));
    }
    let vocab = Vocabulary::from_tokens(header.vocab).map_err(|e| bad(e.to_string()))?;
    Ok((header.config, vocab, tensors))
}

impl Lm {
    pub fn new(config: LmConfig, seed: u64) -> Result<Self, LmError> {
        config.validate()?;
        let params = LmParams::init(&config, seed);
        Ok(Self { config, params })
    }

    pub fn fingerprint(&self) -> String {
        self.params.fingerprint()
    }

    fn check_tokens(&self, ids: &[TokenId]) -> Result<(), LmError> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&t) => Err(LmError::BadToken(t)),
            None => Ok(()),
        }
    }

    /// Builds next-token logits `[batch * len x V]` for right-padded rows of
    /// `ids` (`batch * len` entries, row-major).
    pub fn logits_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        vars: &LmVars,
        ids: &[TokenId],
        batch: usize,
        len: usize,
    ) -> Result<Var, LmError> {
        let cfg = &self.config;
        if len > cfg.max_len {
            return Err(LmError::SequenceTooLong { len, max: cfg.max_len });
        }
        assert_eq!(ids.len(), batch * len);
        self.check_tokens(ids)?;
        let toks: Vec<usize> = ids.iter().map(|&t| t as usize).collect();
        let pos: Vec<usize> = (0..batch).flat_map(|_| 0..len).collect();
        let te = g.gather(vars.tok_emb, &toks)?;
        let pe = g.gather(vars.pos_emb, &pos)?;
        let mut x = g.add(te, pe)?;
        let shape = AttnShape { batch, heads: cfg.heads, head_dim: cfg.head_dim(), q_len: len, k_len: len, offset: 0 };
        for lv in &vars.layers {
            let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b, cfg.ln_eps)?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let a = g.attention(q, k, v, shape)?;
            x = self.block_tail(g, lv, x, a)?;
        }
        let h = g.layer_norm(x, vars.lnf_g, vars.lnf_b, cfg.ln_eps)?;
        Ok(g.matmul_bt(h, vars.tok_emb)?)
    }

    /// Output projection, residual, and feed-forward half of a block.
    fn block_tail(&self, g: &mut Graph<'_>, lv: &LayerVars, x: Var, attn: Var) -> Result<Var, LmError> {
        let o = g.matmul(attn, lv.wo)?;
        let x = g.add(x, o)?;
        let h = g.layer_norm(x, lv.ln2_g, lv.ln2_b, self.config.ln_eps)?;
        let f = g.matmul(h, lv.ff1_w)?;
        let f = g.add_row(f, lv.ff1_b)?;
        let f = g.gelu(f)?;
        let f = g.matmul(f, lv.ff2_w)?;
        let f = g.add_row(f, lv.ff2_b)?;
        Ok(g.add(x, f)?)
    }

    /// One incremental step at position `positions`, attending over the given
    /// per-layer cache nodes (`[positions x d]` each) followed by this token's
    /// own key/value. With `positions == 0` the cache slice is ignored.
    pub fn step_graph<'a>(
        &self,
        g: &mut Graph<'a>,
        vars: &LmVars,
        token: TokenId,
        cache: &[(Var, Var)],
        positions: usize,
    ) -> Result<StepVars, LmError> {
        let cfg = &self.config;
        if positions >= cfg.max_len {
            return Err(LmError::CacheFull { max: cfg.max_len });
        }
        self.check_tokens(&[token])?;
        if positions > 0 && cache.len() != cfg.layers {
            return Err(LmError::CacheMismatch(format!("{} cache layers for {} model layers", cache.len(), cfg.layers)));
        }
        let te = g.gather(vars.tok_emb, &[token as usize])?;
        let pe = g.gather(vars.pos_emb, &[positions])?;
        let mut x = g.add(te, pe)?;
        let shape = AttnShape {
            batch: 1,
            heads: cfg.heads,
            head_dim: cfg.head_dim(),
            q_len: 1,
            k_len: positions + 1,
            offset: positions,
        };
        let mut new_kv = Vec::with_capacity(cfg.layers);
        for (l, lv) in vars.layers.iter().enumerate() {
            let h = g.layer_norm(x, lv.ln1_g, lv.ln1_b, cfg.ln_eps)?;
            let q = g.matmul(h, lv.wq)?;
            let k = g.matmul(h, lv.wk)?;
            let v = g.matmul(h, lv.wv)?;
            let (kf, vf) = if positions == 0 {
                (k, v)
            } else {
                let (ck, cv) = cache[l];
                (g.concat_rows(&[ck, k])?, g.concat_rows(&[cv, v])?)
            };
            let a = g.attention(q, kf, vf, shape)?;
            x = self.block_tail(g, lv, x, a)?;
            new_kv.push((k, v));
        }
        let h = g.layer_norm(x, vars.lnf_g, vars.lnf_b, cfg.ln_eps)?;
        let logits = g.matmul_bt(h, vars.tok_emb)?;
        Ok(StepVars { logits, new_kv })
    }

    /// Next-token logits `[T x V]` for every position of `ids`.
    pub fn forward_full(&self, ids: &[TokenId]) -> Result<Tensor, LmError> {
        if ids.is_empty() {
            return Err(LmError::Numeric(NdError::EmptyDim { op: "forward_full" }));
        }
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let logits = self.logits_graph(&mut g, &vars, ids, 1, ids.len())?;
        Ok(g.value(logits).clone())
    }

    /// Feeds `token`, appends its keys/values to `cache`, and returns the
    /// next-token logits. Cached entries are used exactly as stored.
    pub fn forward_step(&self, token: TokenId, cache: &mut ContextCache) -> Result<Vec<f32>, LmError> {
        cache.check(&self.config)?;
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let p = cache.positions();
        let cvars: Vec<(Var, Var)> =
            cache.keys.iter().zip(&cache.values).map(|(k, v)| (g.constant(k), g.constant(v))).collect();
        let step = self.step_graph(&mut g, &vars, token, &cvars, p)?;
        let logits = g.value(step.logits).data().to_vec();
        let rows: Vec<(Vec<f32>, Vec<f32>)> =
            step.new_kv.iter().map(|&(k, v)| (g.value(k).data().to_vec(), g.value(v).data().to_vec())).collect();
        drop(g);
        for (l, (k, v)) in rows.into_iter().enumerate() {
            cache.keys[l].push_row(&k)?;
            cache.values[l].push_row(&v)?;
        }
        Ok(logits)
    }

    /// Runs `ids` through [`Lm::forward_step`] from an empty cache.
    pub fn prefill(&self, ids: &[TokenId]) -> Result<(ContextCache, Vec<f32>), LmError> {
        let mut cache = ContextCache::empty(&self.config);
        let mut logits = Vec::new();
        for &t in ids {
            logits = self.forward_step(t, &mut cache)?;
        }
        Ok((cache, logits))
    }

    pub fn save(&self, path: &Path, vocab: &Vocabulary) -> Result<(), LmError> {
        if vocab.len() != self.config.vocab_size {
            return Err(LmError::Config(format!("vocabulary has {} tokens, model {}", vocab.len(), self.config.vocab_size)));
        }
        Ok(save_model(path, "lm", &self.config, vocab, &self.params.named())?)
    }

    pub fn load(path: &Path) -> Result<(Self, Vocabulary), LmError> {
        let (config, vocab, tensors): (LmConfig, _, _) = load_model(path, "lm")?;
        let bad = |detail: String| LmError::Io(IoError::Format { path: path.display().to_string(), detail });
        config.validate().map_err(|e| bad(e.to_string()))?;
        if vocab.len() != config.vocab_size {
            return Err(bad(format!("header vocabulary has {} tokens, config {}", vocab.len(), config.vocab_size)));
        }
        let params = LmParams::from_named(&config, tensors).map_err(bad)?;
        Ok((Self { config, params }, vocab))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> Lm {
        Lm::new(LmConfig { vocab_size: 11, d_model: 8, heads: 2, layers: 2, d_ff: 16, max_len: 12, ln_eps: 1e-5 }, 7)
            .unwrap()
    }

    #[test]
    fn init_is_seeded() {
        let cfg = LmConfig::new(20);
        assert_eq!(Lm::new(cfg.clone(), 1).unwrap().fingerprint(), Lm::new(cfg.clone(), 1).unwrap().fingerprint());
        assert_ne!(Lm::new(cfg.clone(), 1).unwrap().fingerprint(), Lm::new(cfg, 2).unwrap().fingerprint());
    }

    #[test]
    fn full_forward_shapes_and_limits() {
        let lm = tiny();
        assert_eq!(lm.forward_full(&[2]).unwrap().shape(), [1, 11]);
        let logits = lm.forward_full(&[2, 5, 6, 7]).unwrap();
        assert_eq!(logits.shape(), [4, 11]);
        assert!(logits.is_finite());
        assert!(matches!(lm.forward_full(&[4; 13]), Err(LmError::SequenceTooLong { len: 13, max: 12 })));
        assert!(matches!(lm.forward_full(&[11]), Err(LmError::BadToken(11))));
    }

    #[test]
    fn step_appends_and_fills() {
        let lm = tiny();
        let mut cache = ContextCache::empty(&lm.config);
        for i in 0..12 {
            lm.forward_step(4, &mut cache).unwrap();
            assert_eq!(cache.positions(), i + 1);
        }
        assert!(matches!(lm.forward_step(4, &mut cache), Err(LmError::CacheFull { max: 12 })));
    }

    #[test]
    fn cached_value_perturbation_changes_logits() {
        let lm = tiny();
        let (mut cache, _) = lm.prefill(&[2, 5, 6]).unwrap();
        let mut other = cache.clone();
        other.values[0].data_mut()[3] += 0.5;
        let a = lm.forward_step(7, &mut cache).unwrap();
        let b = lm.forward_step(7, &mut other).unwrap();
        assert!(a.iter().zip(&b).any(|(x, y)| x != y));
    }

    #[test]
    fn checkpoint_round_trip() {
        let lm = tiny();
        let vocab = Vocabulary::from_tokens(
            ["<pad>", "<unk>", "<bos>", "<eos>", "a", "b", "c", "d", "e", "f", "g"].iter().map(|s| s.to_string()).collect(),
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("lm.ckpt");
        lm.save(&path, &vocab).unwrap();
        let (back, v2) = Lm::load(&path).unwrap();
        assert_eq!(back, lm);
        assert_eq!(v2, vocab);
        assert_eq!(back.fingerprint(), lm.fingerprint());
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(Lm::load(&path), Err(LmError::Io(IoError::Format { .. }))));
    }
}
