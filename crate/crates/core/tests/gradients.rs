mod common;

use capguide::ndiff::{softmax, GradCheckConfig};
use capguide_oracle::checks::{
    guidance_gradcheck, logits_cache_gradcheck, soft_input_gradcheck, CacheSite, GuidanceFixture, Slot,
};

fn cfg(seed: u64) -> GradCheckConfig {
    GradCheckConfig { eps: 1e-3, samples: 40, tolerance: 1e-3, seed }
}

/// Context plus three caption tokens: "<bos> a dog in the yard sep a dog in".
fn ids(f: &common::Fixture) -> (Vec<u32>, usize) {
    let mut ids = f.context("a dog in the yard");
    let ctx = ids.len();
    ids.extend(f.vocab.encode("a dog in"));
    (ids, ctx)
}

fn sites(ctx: usize, cached: usize) -> Vec<CacheSite> {
    vec![
        CacheSite { layer: 0, slot: Slot::Key, rows: 0..ctx },
        CacheSite { layer: 0, slot: Slot::Value, rows: ctx..cached },
        CacheSite { layer: 1, slot: Slot::Key, rows: ctx..cached },
        CacheSite { layer: 1, slot: Slot::Value, rows: 0..ctx },
    ]
}

#[test]
fn logits_gradient_wrt_cache() {
    let f = common::demo();
    let (ids, ctx) = ids(f);
    for (i, site) in sites(ctx, ids.len() - 1).iter().enumerate() {
        let r = logits_cache_gradcheck(&f.lm, &ids, site, &cfg(i as u64));
        assert!(r.passed, "{r:?}");
    }
}

#[test]
fn guidance_loss_gradient_wrt_delta() {
    let f = common::demo();
    let (ids, ctx) = ids(f);
    for (lambda0, lambda1) in [(0.2, 0.6), (2.0, 0.6), (0.0, 1.0)] {
        let fx = GuidanceFixture { lm: &f.lm, clf: &f.clf, ids: &ids, emitted: 3, lambda0, lambda1 };
        for (i, site) in sites(ctx, ids.len() - 1).iter().enumerate() {
            let r = guidance_gradcheck(&fx, site, &cfg(10 + i as u64));
            assert!(r.passed, "λ0={lambda0} λ1={lambda1} {r:?}");
        }
    }
}

#[test]
fn classifier_loss_gradient_wrt_soft_token() {
    let f = common::demo();
    let v = f.vocab.len();
    let hard = f.vocab.encode("a dog in the");
    let peaked: Vec<f32> = softmax(&(0..v).map(|i| if i == 5 { 4.0 } else { 0.1 * i as f32 }).collect::<Vec<_>>());
    let uniform = vec![1.0 / v as f32; v];
    for (i, soft) in [peaked, uniform].iter().enumerate() {
        for h in [&hard[..], &hard[..1], &[][..]] {
            let r = soft_input_gradcheck(&f.clf, h, soft, &cfg(20 + i as u64));
            assert!(r.passed, "{r:?}");
        }
    }
}
