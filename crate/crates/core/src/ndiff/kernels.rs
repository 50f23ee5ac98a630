//! Raw numeric kernels over flat row-major buffers. No shape checking here;
//! the graph layer validates before calling in.

/// `c = a · b + beta · c` where `a` is `m x k` and `b` is `k x n`.
/// `ta`/`tb` read the operand as stored transposed (`k x m` / `n x k`).
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    ta: bool,
    b: &[f32],
    tb: bool,
    beta: f32,
    c: &mut [f32],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|v| *v *= beta);
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m*k, k*n and m*n buffers
    // whose lengths are asserted, so every access stays in bounds.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Stable softmax of one slice into `out`.
pub fn softmax_into(x: &[f32], out: &mut [f32]) {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let sum: f64 = x.iter().map(|&v| ((v - max) as f64).exp()).sum();
    for (o, &v) in out.iter_mut().zip(x) {
        *o = (((v - max) as f64).exp() / sum) as f32;
    }
}

/// `log(sum(exp(x)))`, computed stably in f64.
pub fn log_sum_exp(x: &[f32]) -> f64 {
    let max = x.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = x.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

const GELU_C: f32 = 0.797_884_6; // sqrt(2/pi)

pub fn gelu(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub fn gelu_grad(x: f32) -> f32 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = GELU_C * (1.0 + 3.0 * 0.044715 * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Layer norm over rows of width `cols`. Returns per-row (mean, rstd).
pub fn layer_norm_forward(
    x: &[f32],
    cols: usize,
    gain: &[f32],
    bias: &[f32],
    eps: f32,
    out: &mut [f32],
) -> (Vec<f32>, Vec<f32>) {
    let rows = if cols == 0 { 0 } else { x.len() / cols };
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    for r in 0..rows {
        let xs = &x[r * cols..(r + 1) * cols];
        let mean = xs.iter().map(|&v| v as f64).sum::<f64>() / cols as f64;
        let var = xs.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / cols as f64;
        let rstd = 1.0 / (var + eps as f64).sqrt();
        let os = &mut out[r * cols..(r + 1) * cols];
        for c in 0..cols {
            let xhat = ((xs[c] as f64 - mean) * rstd) as f32;
            os[c] = xhat * gain[c] + bias[c];
        }
        means.push(mean as f32);
        rstds.push(rstd as f32);
    }
    (means, rstds)
}

/// Causal multi-head attention geometry shared by forward and backward.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows, all of
/// width `heads * head_dim`. Query `t` of a batch item sees keys
/// `0..=min(t + offset, k_len - 1)`.
#[derive(Clone, Copy, Debug)]
pub struct AttnShape {
    pub batch: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub offset: usize,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }

    pub fn visible(&self, t: usize) -> usize {
        (t + self.offset + 1).min(self.k_len)
    }

    fn prob_index(&self, b: usize, h: usize, t: usize) -> usize {
        ((b * self.heads + h) * self.q_len + t) * self.k_len
    }
}

/// Returns the attention probabilities `[batch, heads, q_len, k_len]`
/// (zero where masked).
pub fn attention_forward(s: &AttnShape, q: &[f32], k: &[f32], v: &[f32], out: &mut [f32]) -> Vec<f32> {
    let w = s.width();
    let dh = s.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut probs = vec![0.0f32; s.batch * s.heads * s.q_len * s.k_len];
    let mut scores = vec![0.0f64; s.k_len];
    for b in 0..s.batch {
        for h in 0..s.heads {
            for t in 0..s.q_len {
                let qrow = &q[(b * s.q_len + t) * w + h * dh..][..dh];
                let n = s.visible(t);
                let mut max = f64::NEG_INFINITY;
                for (j, sc) in scores.iter_mut().enumerate().take(n) {
                    let krow = &k[(b * s.k_len + j) * w + h * dh..][..dh];
                    let dot: f64 = qrow.iter().zip(krow).map(|(&a, &c)| a as f64 * c as f64).sum();
                    *sc = dot * scale;
                    max = max.max(*sc);
                }
                let mut sum = 0.0f64;
                for sc in scores.iter_mut().take(n) {
                    *sc = (*sc - max).exp();
                    sum += *sc;
                }
                let pbase = s.prob_index(b, h, t);
                let orow = &mut out[(b * s.q_len + t) * w + h * dh..][..dh];
                let mut acc = vec![0.0f64; dh];
                for j in 0..n {
                    let p = scores[j] / sum;
                    probs[pbase + j] = p as f32;
                    let vrow = &v[(b * s.k_len + j) * w + h * dh..][..dh];
                    for (a, &vv) in acc.iter_mut().zip(vrow) {
                        *a += p * vv as f64;
                    }
                }
                for (o, a) in orow.iter_mut().zip(acc) {
                    *o = a as f32;
                }
            }
        }
    }
    probs
}

/// Accumulates gradients for q, k, v given the upstream gradient `dout`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward(
    s: &AttnShape,
    q: &[f32],
    k: &[f32],
    v: &[f32],
    probs: &[f32],
    dout: &[f32],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let w = s.width();
    let dh = s.head_dim;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut dp = vec![0.0f64; s.k_len];
    for b in 0..s.batch {
        for h in 0..s.heads {
            for t in 0..s.q_len {
                let row = (b * s.q_len + t) * w + h * dh;
                let qrow = &q[row..row + dh];
                let drow = &dout[row..row + dh];
                let n = s.visible(t);
                let pbase = s.prob_index(b, h, t);
                let mut dot_pdp = 0.0f64;
                for j in 0..n {
                    let kv = (b * s.k_len + j) * w + h * dh;
                    let p = probs[pbase + j] as f64;
                    let vrow = &v[kv..kv + dh];
                    dp[j] = drow.iter().zip(vrow).map(|(&a, &c)| a as f64 * c as f64).sum();
                    dot_pdp += p * dp[j];
                    for (g, &d) in dv[kv..kv + dh].iter_mut().zip(drow) {
                        *g += (p * d as f64) as f32;
                    }
                }
                let mut dqacc = vec![0.0f64; dh];
                for j in 0..n {
                    let kv = (b * s.k_len + j) * w + h * dh;
                    let p = probs[pbase + j] as f64;
                    let ds = p * (dp[j] - dot_pdp) * scale;
                    let krow = &k[kv..kv + dh];
                    for (a, &kk) in dqacc.iter_mut().zip(krow) {
                        *a += ds * kk as f64;
                    }
                    for (g, &qq) in dk[kv..kv + dh].iter_mut().zip(qrow) {
                        *g += (ds * qq as f64) as f32;
                    }
                }
                for (g, a) in dq[row..row + dh].iter_mut().zip(dqacc) {
                    *g += a as f32;
                }
            }
        }
    }
}
