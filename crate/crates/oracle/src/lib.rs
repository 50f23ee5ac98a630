//! Straight-line f64 re-implementations of the model forward passes, written
//! without the graph engine. Tests compare the f32 graph results and
//! gradients against these.

pub mod checks;
pub mod vectors;

use capguide::classifier::Classifier;
use capguide::lm::{LayerParams, Lm};
use capguide::ndiff::Tensor;

fn f64s(t: &Tensor) -> Vec<f64> {
    t.data().iter().map(|&v| v as f64).collect()
}

/// `x[1 x n] · w[n x m]`.
fn vecmat(x: &[f64], w: &[f64], m: usize) -> Vec<f64> {
    let mut out = vec![0.0; m];
    for (i, &xi) in x.iter().enumerate() {
        for (o, &wij) in out.iter_mut().zip(&w[i * m..(i + 1) * m]) {
            *o += xi * wij;
        }
    }
    out
}

fn layer_norm(x: &[f64], g: &[f64], b: &[f64], eps: f64) -> Vec<f64> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let r = 1.0 / (var + eps).sqrt();
    x.iter().zip(g).zip(b).map(|((v, g), b)| (v - mean) * r * g + b).collect()
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn log_softmax(x: &[f64]) -> Vec<f64> {
    let m = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + x.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    x.iter().map(|v| v - lse).collect()
}

struct Layer {
    ln1_g: Vec<f64>,
    ln1_b: Vec<f64>,
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
    ln2_g: Vec<f64>,
    ln2_b: Vec<f64>,
    ff1_w: Vec<f64>,
    ff1_b: Vec<f64>,
    ff2_w: Vec<f64>,
    ff2_b: Vec<f64>,
}

impl Layer {
    fn new(p: &LayerParams) -> Self {
        Self {
            ln1_g: f64s(&p.ln1_g),
            ln1_b: f64s(&p.ln1_b),
            wq: f64s(&p.wq),
            wk: f64s(&p.wk),
            wv: f64s(&p.wv),
            wo: f64s(&p.wo),
            ln2_g: f64s(&p.ln2_g),
            ln2_b: f64s(&p.ln2_b),
            ff1_w: f64s(&p.ff1_w),
            ff1_b: f64s(&p.ff1_b),
            ff2_w: f64s(&p.ff2_w),
            ff2_b: f64s(&p.ff2_b),
        }
    }
}

/// Per-layer keys and values, each a flat `[positions x d]` buffer.
#[derive(Clone, Debug, Default)]
pub struct RefCache {
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
}

impl RefCache {
    pub fn from_tensors(keys: &[Tensor], values: &[Tensor]) -> Self {
        Self { keys: keys.iter().map(f64s).collect(), values: values.iter().map(f64s).collect() }
    }
}

pub struct RefLm {
    vocab: usize,
    d: usize,
    heads: usize,
    ff: usize,
    eps: f64,
    tok: Vec<f64>,
    pos: Vec<f64>,
    layers: Vec<Layer>,
    lnf_g: Vec<f64>,
    lnf_b: Vec<f64>,
}

impl RefLm {
    pub fn new(lm: &Lm) -> Self {
        let c = &lm.config;
        Self {
            vocab: c.vocab_size,
            d: c.d_model,
            heads: c.heads,
            ff: c.d_ff,
            eps: c.ln_eps as f64,
            tok: f64s(&lm.params.tok_emb),
            pos: f64s(&lm.params.pos_emb),
            layers: lm.params.layers.iter().map(Layer::new).collect(),
            lnf_g: f64s(&lm.params.lnf_g),
            lnf_b: f64s(&lm.params.lnf_b),
        }
    }

    pub fn empty_cache(&self) -> RefCache {
        RefCache { keys: vec![Vec::new(); self.layers.len()], values: vec![Vec::new(); self.layers.len()] }
    }

    /// Feeds `token` after the cached positions, appends its keys/values to
    /// `cache`, and returns the next-token logits.
    pub fn step(&self, token: u32, cache: &mut RefCache) -> Vec<f64> {
        let d = self.d;
        let p = cache.keys[0].len() / d;
        let t = token as usize;
        let mut x: Vec<f64> = (0..d).map(|i| self.tok[t * d + i] + self.pos[p * d + i]).collect();
        let dh = d / self.heads;
        for (l, ly) in self.layers.iter().enumerate() {
            let h = layer_norm(&x, &ly.ln1_g, &ly.ln1_b, self.eps);
            let q = vecmat(&h, &ly.wq, d);
            cache.keys[l].extend(vecmat(&h, &ly.wk, d));
            cache.values[l].extend(vecmat(&h, &ly.wv, d));
            let (ks, vs) = (&cache.keys[l], &cache.values[l]);
            let mut attn = vec![0.0; d];
            for hd in 0..self.heads {
                let cols = hd * dh..(hd + 1) * dh;
                let scores: Vec<f64> = (0..=p)
                    .map(|j| {
                        let kj = &ks[j * d..(j + 1) * d];
                        cols.clone().map(|c| q[c] * kj[c]).sum::<f64>() / (dh as f64).sqrt()
                    })
                    .collect();
                let w = softmax(&scores);
                for (j, wj) in w.iter().enumerate() {
                    for c in cols.clone() {
                        attn[c] += wj * vs[j * d + c];
                    }
                }
            }
            let o = vecmat(&attn, &ly.wo, d);
            x.iter_mut().zip(&o).for_each(|(a, b)| *a += b);
            let h = layer_norm(&x, &ly.ln2_g, &ly.ln2_b, self.eps);
            let f: Vec<f64> = vecmat(&h, &ly.ff1_w, self.ff).iter().zip(&ly.ff1_b).map(|(a, b)| gelu(a + b)).collect();
            let f = vecmat(&f, &ly.ff2_w, d);
            x.iter_mut().zip(f.iter().zip(&ly.ff2_b)).for_each(|(a, (f, b))| *a += f + b);
        }
        let h = layer_norm(&x, &self.lnf_g, &self.lnf_b, self.eps);
        (0..self.vocab).map(|v| (0..d).map(|i| h[i] * self.tok[v * d + i]).sum()).collect()
    }

    /// Next-token logits for every position of `ids`.
    pub fn forward(&self, ids: &[u32]) -> Vec<Vec<f64>> {
        let mut cache = self.empty_cache();
        ids.iter().map(|&t| self.step(t, &mut cache)).collect()
    }
}

pub struct RefClassifier {
    dc: usize,
    hidden: usize,
    emb: Vec<f64>,
    w1: Vec<f64>,
    b1: Vec<f64>,
    w2: Vec<f64>,
    b2: Vec<f64>,
}

impl RefClassifier {
    pub fn new(c: &Classifier) -> Self {
        let p = &c.params;
        Self {
            dc: c.config.d_embed,
            hidden: c.config.hidden,
            emb: f64s(&p.emb),
            w1: f64s(&p.w1),
            b1: f64s(&p.b1),
            w2: f64s(&p.w2),
            b2: f64s(&p.b2),
        }
    }

    /// Class logits for hard tokens followed by one probability-weighted
    /// soft position.
    pub fn soft_logits(&self, hard: &[u32], soft: &[f64]) -> [f64; 2] {
        let dc = self.dc;
        let mut pooled = vec![0.0; dc];
        for &t in hard {
            pooled.iter_mut().zip(&self.emb[t as usize * dc..(t as usize + 1) * dc]).for_each(|(a, b)| *a += b);
        }
        for (v, &p) in soft.iter().enumerate() {
            pooled.iter_mut().zip(&self.emb[v * dc..(v + 1) * dc]).for_each(|(a, b)| *a += p * b);
        }
        let n = (hard.len() + 1) as f64;
        pooled.iter_mut().for_each(|a| *a /= n);
        let h: Vec<f64> = vecmat(&pooled, &self.w1, self.hidden).iter().zip(&self.b1).map(|(a, b)| gelu(a + b)).collect();
        let o = vecmat(&h, &self.w2, 2);
        [o[0] + self.b2[0], o[1] + self.b2[1]]
    }

    pub fn hard_logits(&self, ids: &[u32]) -> [f64; 2] {
        let (last, rest) = ids.split_last().expect("non-empty");
        let mut soft = vec![0.0; self.emb.len() / self.dc];
        soft[*last as usize] = 1.0;
        self.soft_logits(rest, &soft)
    }

    /// `-log p(audible)`.
    pub fn loss(&self, hard: &[u32], soft: &[f64]) -> f64 {
        -log_softmax(&self.soft_logits(hard, soft))[1]
    }
}

/// Guidance objective for one token: the step from `pending` over the
/// perturbed cache, scored as `lambda0 * CE(base, guided) + lambda1 * clf`.
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss(
    lm: &RefLm,
    clf: &RefClassifier,
    cache: &RefCache,
    pending: u32,
    emitted: &[u32],
    base_probs: &[f64],
    lambda0: f64,
    lambda1: f64,
) -> f64 {
    let mut c = cache.clone();
    let logits = lm.step(pending, &mut c);
    let lp = log_softmax(&logits);
    let ce: f64 = -base_probs.iter().zip(&lp).map(|(p, l)| p * l).sum::<f64>();
    let probs = softmax(&logits);
    lambda0 * ce + lambda1 * clf.loss(emitted, &probs)
}

/// Guidance objective with the cache given as separate base and delta buffers
/// in `k0, v0, k1, v1, ...` order.
#[allow(clippy::too_many_arguments)]
pub fn guidance_loss_delta(
    lm: &RefLm,
    clf: &RefClassifier,
    base: &RefCache,
    delta: &[Vec<f64>],
    pending: u32,
    emitted: &[u32],
    base_probs: &[f64],
    lambda0: f64,
    lambda1: f64,
) -> f64 {
    let add = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + y).collect::<Vec<f64>>();
    let n = base.keys.len();
    let cache = RefCache {
        keys: (0..n).map(|l| add(&base.keys[l], &delta[2 * l])).collect(),
        values: (0..n).map(|l| add(&base.values[l], &delta[2 * l + 1])).collect(),
    };
    guidance_loss(lm, clf, &cache, pending, emitted, base_probs, lambda0, lambda1)
}

/// CIDEr-D over whitespace tokens, n-grams keyed as joined strings. Each item
/// is `(candidate, references)`; the idf corpus is the items' references.
pub fn cider_d(items: &[(String, Vec<String>)]) -> f64 {
    use std::collections::{BTreeMap, BTreeSet};
    type Counts = BTreeMap<String, f64>;
    let grams = |s: &str| -> Counts {
        let w: Vec<&str> = s.split_whitespace().collect();
        let mut c = Counts::new();
        for n in 1..=4 {
            for i in 0..w.len().saturating_sub(n - 1) {
                *c.entry(w[i..i + n].join(" ")).or_default() += 1.0;
            }
        }
        c
    };
    let order = |g: &str| g.split(' ').count() - 1;
    let mut df: Counts = Counts::new();
    for (_, refs) in items {
        let set: BTreeSet<String> = refs.iter().flat_map(|r| grams(r).into_keys()).collect();
        for g in set {
            *df.entry(g).or_default() += 1.0;
        }
    }
    let log_n = (items.len() as f64).ln();
    let weigh = |c: &Counts| -> (Counts, [f64; 4], f64) {
        let mut norm = [0.0; 4];
        let mut bigrams = 0.0;
        let v: Counts = c
            .iter()
            .map(|(g, tf)| {
                let x = tf * (log_n - df.get(g).copied().unwrap_or(0.0).max(1.0).ln());
                norm[order(g)] += x * x;
                if order(g) == 1 {
                    bigrams += tf;
                }
                (g.clone(), x)
            })
            .collect();
        (v, norm.map(f64::sqrt), bigrams)
    };
    let mut total = 0.0;
    for (cand, refs) in items {
        let (vh, nh, lh) = weigh(&grams(cand));
        let mut acc = 0.0;
        for r in refs {
            let (vr, nr, lr) = weigh(&grams(r));
            let pen = (-(lh - lr) * (lh - lr) / 72.0).exp();
            for n in 0..4 {
                let mut s = 0.0;
                for (g, x) in vh.iter().filter(|(g, _)| order(g) == n) {
                    let y = vr.get(g).copied().unwrap_or(0.0);
                    s += x.min(y) * y;
                }
                if nh[n] != 0.0 && nr[n] != 0.0 {
                    s /= nh[n] * nr[n];
                }
                acc += s * pen / 4.0;
            }
        }
        total += 10.0 * acc / refs.len() as f64;
    }
    total / items.len() as f64
}
