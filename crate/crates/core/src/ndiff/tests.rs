use proptest::prelude::*;

use super::*;

fn mat(rows: &[&[f32]]) -> Tensor {
    Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
}

#[test]
fn matmul_examples() {
    let mut g = Graph::new();
    let id = g.input(mat(&[&[1.0, 0.0], &[0.0, 1.0]]));
    let m = g.input(mat(&[&[2.0, -3.0], &[4.5, 7.0]]));
    let out = g.matmul(id, m).unwrap();
    assert_eq!(g.value(out).data(), &[2.0, -3.0, 4.5, 7.0]);

    let a = g.input(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.input(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let out = g.matmul(a, b).unwrap();
    assert_eq!(g.value(out).data(), &[19.0, 22.0, 43.0, 50.0]);

    let z = g.input(Tensor::zeros(&[3, 2]));
    let out = g.matmul(z, b).unwrap();
    assert!(g.value(out).data().iter().all(|&v| v == 0.0));
    assert_eq!(g.value(out).shape(), &[3, 2]);

    let bad = g.input(Tensor::zeros(&[3, 3]));
    assert!(matches!(g.matmul(a, bad), Err(NdError::Shape { .. })));
}

#[test]
fn matmul_backward_both_inputs() {
    let mut g = Graph::new();
    let a = g.param(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
    let b = g.param(mat(&[&[5.0, 6.0], &[7.0, 8.0]]));
    let c = g.matmul(a, b).unwrap();
    let s = g.sum(c).unwrap();
    g.backward(s).unwrap();
    // d(sum(AB))/dA = 1·Bᵀ, d/dB = Aᵀ·1
    assert_eq!(g.grad(a).unwrap().data(), &[11.0, 15.0, 11.0, 15.0]);
    assert_eq!(g.grad(b).unwrap().data(), &[4.0, 4.0, 6.0, 6.0]);
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![0.0, 0.0]));
    let y = g.softmax(x).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, 0.5]);

    let x = g.input(Tensor::row(vec![1000.0, 0.0]));
    let y = g.softmax(x).unwrap();
    let v = g.value(y).data();
    assert!((v[0] - 1.0).abs() < 1e-6 && v[1] < 1e-30 && v.iter().all(|p| p.is_finite()));

    let x = g.input(Tensor::row(vec![1f32.ln(), 2f32.ln(), 3f32.ln()]));
    let y = g.softmax(x).unwrap();
    for (got, want) in g.value(y).data().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
        assert!((got - want).abs() < 1e-6);
    }

    let e = g.input(Tensor::zeros(&[2, 0]));
    assert!(matches!(g.softmax(e), Err(NdError::EmptyDim { .. })));
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::new();
    let one = g.input(Tensor::full(&[4], 1.0));
    let zero = g.input(Tensor::zeros(&[4]));
    let x = g.input(Tensor::row(vec![3.0, 3.0, 3.0, 3.0]));
    let y = g.layer_norm(x, one, zero, 1e-5).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));

    let one2 = g.input(Tensor::full(&[2], 1.0));
    let zero2 = g.input(Tensor::zeros(&[2]));
    let x = g.input(Tensor::row(vec![1.0, 3.0]));
    let y = g.layer_norm(x, one2, zero2, 1e-12).unwrap();
    let v = g.value(y).data();
    assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);

    let gain0 = g.input(Tensor::zeros(&[3]));
    let bias = g.input(Tensor::row(vec![0.5, -1.0, 2.0]).reshape(vec![3]).unwrap());
    let x = g.input(mat(&[&[1.0, 5.0, -2.0], &[0.1, 0.2, 0.3]]));
    let y = g.layer_norm(x, gain0, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.0, 2.0, 0.5, -1.0, 2.0]);

    assert!(matches!(g.layer_norm(x, one, zero, 1e-5), Err(NdError::Shape { .. })));
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let logits = Tensor::row(vec![0.3, -1.2, 2.0, 0.0]);
    let target = Tensor::row(softmax(logits.data()));
    let l = g.param(logits);
    let ce = g.soft_cross_entropy(l, &target).unwrap();
    let h = entropy(target.data());
    assert!((g.value(ce).item().unwrap() as f64 - h).abs() < 1e-6);
    g.backward(ce).unwrap();
    assert!(g.grad(l).unwrap().data().iter().all(|&v| v == 0.0));

    let l = g.input(Tensor::row(vec![1.0, 2.0, 0.5]));
    let onehot = Tensor::row(vec![0.0, 1.0, 0.0]);
    let ce = g.soft_cross_entropy(l, &onehot).unwrap();
    let nll = g.nll(l, &[Some(1)]).unwrap();
    let expected = kernels::log_sum_exp(&[1.0, 2.0, 0.5]) - 2.0;
    assert!((g.value(ce).item().unwrap() as f64 - expected).abs() < 1e-6);
    assert_eq!(g.value(ce).item().unwrap(), g.value(nll).item().unwrap());

    let l = g.input(Tensor::row(vec![0.0; 4]));
    let uniform = Tensor::row(vec![0.25; 4]);
    let ce = g.soft_cross_entropy(l, &uniform).unwrap();
    assert!((g.value(ce).item().unwrap() - 1.386_294_4).abs() < 1e-6);

    let bad = Tensor::row(vec![0.5, 0.6, 0.0, 0.0]);
    assert!(matches!(g.soft_cross_entropy(l, &bad), Err(NdError::NotNormalized { .. })));
}

#[test]
fn cross_entropy_gradient_is_p_minus_target() {
    let mut g = Graph::new();
    let logits = Tensor::row(vec![0.1, 0.7, -0.4]);
    let target = Tensor::row(vec![0.2, 0.3, 0.5]);
    let p = softmax(logits.data());
    let l = g.param(logits);
    let ce = g.soft_cross_entropy(l, &target).unwrap();
    g.backward(ce).unwrap();
    for ((gr, pv), tv) in g.grad(l).unwrap().data().iter().zip(&p).zip(target.data()) {
        assert!((gr - (pv - tv)).abs() < 1e-7);
    }
}

#[test]
fn backward_examples() {
    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![1.0, -2.0, 3.5]));
    let s = g.sum(x).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let mut g = Graph::new();
    let x = g.param(Tensor::scalar(3.0));
    let sq = g.mul(x, x).unwrap();
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 6.0);

    // repeated backward accumulates until zero_grads
    g.backward(sq).unwrap();
    assert_eq!(g.grad(x).unwrap().item().unwrap(), 12.0);
    g.zero_grads();
    assert!(g.grad(x).is_none());

    let mut g = Graph::new();
    let x = g.param(Tensor::row(vec![1.0, 2.0]));
    assert!(matches!(g.backward(x), Err(NdError::NotScalar { .. })));
}

#[test]
fn non_finite_outputs_are_errors() {
    let mut g = Graph::new();
    let x = g.input(Tensor::row(vec![f32::MAX, 1.0]));
    assert!(matches!(g.scale(x, 10.0), Err(NdError::NonFinite { .. })));
}

#[test]
fn gradcheck_linear_is_exact() {
    let w = [0.5, -1.5, 2.0, 0.25];
    let x = Tensor::row(vec![1.0, 2.0, -0.5, 3.0]);
    let wt = Tensor::row(w.to_vec());
    let (_, grads) = analytic_gradients(std::slice::from_ref(&x), |g, v| {
        let wv = g.input(wt.clone());
        let p = g.mul(v[0], wv)?;
        g.sum(p)
    })
    .unwrap();
    let cfg = GradCheckConfig { samples: 4, ..Default::default() };
    let report = finite_diff_check("linear", &[x], &grads, &cfg, |p| {
        p[0].iter().zip(w).map(|(a, b)| a * b as f64).sum()
    });
    assert!(report.max_relative_error < 1e-6, "{report:?}");
}

// f64 reference: sum(proj * gelu(attn(ln(x)·wq, ln(x)·wk, ln(x)·wv))).
fn attention_block_reference(p: &[Vec<f64>], t: usize, d: usize, heads: usize, proj: &[f32]) -> f64 {
    let (x, wq, wk, wv, gain, bias) = (&p[0], &p[1], &p[2], &p[3], &p[4], &p[5]);
    let mut h = vec![0.0; t * d];
    for r in 0..t {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            h[r * d + c] = (row[c] - mean) / (var + 1e-5).sqrt() * gain[c] + bias[c];
        }
    }
    let proj_m = |w: &[f64]| {
        let mut out = vec![0.0; t * d];
        for r in 0..t {
            for c in 0..d {
                out[r * d + c] = (0..d).map(|k| h[r * d + k] * w[k * d + c]).sum();
            }
        }
        out
    };
    let (q, k, v) = (proj_m(wq), proj_m(wk), proj_m(wv));
    let dh = d / heads;
    let mut total = 0.0;
    for hd in 0..heads {
        for i in 0..t {
            let scores: Vec<f64> = (0..=i)
                .map(|j| (0..dh).map(|c| q[i * d + hd * dh + c] * k[j * d + hd * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for c in 0..dh {
                let o: f64 = (0..=i).map(|j| (scores[j] - m).exp() / z * v[j * d + hd * dh + c]).sum();
                let u = (2.0 / std::f64::consts::PI).sqrt() * (o + 0.044715 * o.powi(3));
                total += 0.5 * o * (1.0 + u.tanh()) * proj[i * d + hd * dh + c] as f64;
            }
        }
    }
    total
}

#[test]
fn gradcheck_attention_block() {
    use rand::SeedableRng;
    use rand_distr::{Distribution, Normal};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    let normal = Normal::new(0.0f32, 0.5).unwrap();
    let mut rand_t = |s: &[usize]| {
        let n = s.iter().product();
        Tensor::new(s.to_vec(), (0..n).map(|_| normal.sample(&mut rng)).collect()).unwrap()
    };
    let (t, d) = (5, 8);
    let shape = AttnShape { batch: 1, heads: 2, head_dim: 4, q_len: t, k_len: t, offset: 0 };
    let params = vec![rand_t(&[t, d]), rand_t(&[d, d]), rand_t(&[d, d]), rand_t(&[d, d]), rand_t(&[d]), rand_t(&[d])];
    let proj = rand_t(&[t, d]);
    let (value, grads) = analytic_gradients(&params, |g, v| {
        let h = g.layer_norm(v[0], v[4], v[5], 1e-5)?;
        let q = g.matmul(h, v[1])?;
        let k = g.matmul(h, v[2])?;
        let vv = g.matmul(h, v[3])?;
        let a = g.attention(q, k, vv, shape)?;
        let a = g.gelu(a)?;
        let p = g.input(proj.clone());
        let m = g.mul(a, p)?;
        g.sum(m)
    })
    .unwrap();
    let f64_params: Vec<Vec<f64>> = params.iter().map(|p| p.data().iter().map(|&v| v as f64).collect()).collect();
    let reference = attention_block_reference(&f64_params, t, d, 2, proj.data());
    assert!((value as f64 - reference).abs() < 1e-5, "{value} vs {reference}");
    let cfg = GradCheckConfig { samples: 80, ..Default::default() };
    let report = finite_diff_check("attention_block", &params, &grads, &cfg, |p| {
        attention_block_reference(p, t, d, 2, proj.data())
    });
    assert!(report.passed, "{report:?}");
}

#[test]
fn segment_mean_and_gather() {
    let mut g = Graph::new();
    let table = g.param(mat(&[&[1.0, 2.0], &[3.0, 4.0], &[5.0, 6.0]]));
    let rows = g.gather(table, &[2, 0, 2]).unwrap();
    let m = g.segment_mean(rows, &[(0, 1), (0, 3)]).unwrap();
    let expected = [5.0, 6.0, 11.0 / 3.0, 14.0 / 3.0];
    for (a, b) in g.value(m).data().iter().zip(expected) {
        assert!((a - b).abs() < 1e-6);
    }
    let s = g.sum(m).unwrap();
    g.backward(s).unwrap();
    let third = 1.0 / 3.0;
    let gr = g.grad(table).unwrap().data();
    assert!((gr[0] - third).abs() < 1e-6 && gr[2] == 0.0 && (gr[4] - (1.0 + 2.0 * third)).abs() < 1e-6);
    assert!(matches!(g.gather(table, &[3]), Err(NdError::IndexOutOfRange { .. })));
}

proptest! {
    #[test]
    fn softmax_slices_are_distributions(xs in prop::collection::vec(-50.0f32..50.0, 1..40)) {
        let p = softmax(&xs);
        let s: f64 = p.iter().map(|&v| v as f64).sum();
        prop_assert!((s - 1.0).abs() <= 1e-6);
        // Strict positivity holds while the logit spread stays within f32's exp range.
        prop_assert!(p.iter().all(|&v| v > 0.0));
    }

    #[test]
    fn self_cross_entropy_equals_entropy(xs in prop::collection::vec(-10.0f32..10.0, 1..40)) {
        let mut g = Graph::new();
        let target = Tensor::row(softmax(&xs));
        let l = g.input(Tensor::row(xs.clone()));
        let ce = g.soft_cross_entropy(l, &target).unwrap();
        let h = entropy(target.data());
        prop_assert!((g.value(ce).item().unwrap() as f64 - h).abs() <= 1e-6);
    }

    #[test]
    fn ops_are_deterministic(xs in prop::collection::vec(-3.0f32..3.0, 12)) {
        let run = || {
            let mut g = Graph::new();
            let x = g.param(Tensor::new(vec![3, 4], xs.clone()).unwrap());
            let w = g.input(Tensor::new(vec![4, 4], xs.iter().rev().copied().chain(xs.iter().take(4).copied()).collect()).unwrap());
            let y = g.matmul(x, w).unwrap();
            let y = g.softmax(y).unwrap();
            let s = g.sum(y).unwrap();
            let y2 = g.mul(y, y).unwrap();
            let s2 = g.sum(y2).unwrap();
            let t = g.add(s, s2).unwrap();
            g.backward(t).unwrap();
            (g.value(t).clone(), g.grad(x).unwrap().clone())
        };
        prop_assert_eq!(run(), run());
    }
}
