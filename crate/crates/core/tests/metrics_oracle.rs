use capguide::metrics::{bleu4, cider, rouge_l, rouge_l_corpus};
use capguide_oracle::cider_d;
use capguide_oracle::vectors::{toy, BLEU_PAIR, LCS_PAIR, TOY_BLEU, TOY_CIDER};
use proptest::prelude::*;

fn split(items: &[(String, Vec<String>)]) -> (Vec<String>, Vec<Vec<String>>) {
    items.iter().cloned().unzip()
}

#[test]
fn toy_cider_matches_independent_implementations() {
    let items = toy();
    let (c, r) = split(&items);
    let ours = cider(&c, &r, &r).unwrap();
    assert!((ours - TOY_CIDER).abs() < 1e-6, "{ours}");
    assert!((cider_d(&items) - TOY_CIDER).abs() < 1e-6);
}

#[test]
fn hand_computed_bleu_and_lcs() {
    let b = bleu4(&[BLEU_PAIR.0.to_string()], &[vec![BLEU_PAIR.1.to_string()]]).unwrap();
    assert!((b - TOY_BLEU).abs() < 1e-6);
    assert!((rouge_l(LCS_PAIR.0, &[LCS_PAIR.1.to_string()]) - LCS_PAIR.2).abs() < 1e-6);
}

fn word() -> impl Strategy<Value = String> {
    prop::sample::select(vec!["a", "dog", "cat", "barks", "sits", "in", "the", "yard", "park", "loudly"]).prop_map(String::from)
}

fn sentence() -> impl Strategy<Value = String> {
    prop::collection::vec(word(), 1..9).prop_map(|w| w.join(" "))
}

fn corpus() -> impl Strategy<Value = Vec<(String, Vec<String>)>> {
    prop::collection::vec((sentence(), prop::collection::vec(sentence(), 1..4)), 1..6)
}

fn permuted<T: Clone>(v: &[T], seed: usize) -> Vec<T> {
    let mut out = v.to_vec();
    let n = out.len();
    out.rotate_left(seed % n);
    if n > 2 {
        out.swap(0, n - 1);
    }
    out
}

proptest! {
    #[test]
    fn cider_agrees_with_oracle(items in corpus()) {
        let (c, r) = split(&items);
        let a = cider(&c, &r, &r).unwrap();
        prop_assert!((a - cider_d(&items)).abs() < 1e-9);
    }

    #[test]
    fn metrics_are_permutation_invariant(items in corpus(), seed in 0usize..10) {
        let (c, r) = split(&items);
        let (pc, pr) = split(&permuted(&items, seed));
        prop_assert!((bleu4(&c, &r).unwrap() - bleu4(&pc, &pr).unwrap()).abs() < 1e-12);
        prop_assert!((rouge_l_corpus(&c, &r).unwrap() - rouge_l_corpus(&pc, &pr).unwrap()).abs() < 1e-12);
        prop_assert!((cider(&c, &r, &r).unwrap() - cider(&pc, &pr, &pr).unwrap()).abs() < 1e-9);
    }

    #[test]
    fn exact_candidates_score_maximally(refs in prop::collection::vec(sentence(), 1..6), other in sentence()) {
        let r: Vec<Vec<String>> = refs.iter().map(|s| vec![s.clone()]).collect();
        prop_assert!((rouge_l_corpus(&refs, &r).unwrap() - 1.0).abs() < 1e-12);
        if refs.iter().all(|s| s.split(' ').count() >= 4) {
            prop_assert!((bleu4(&refs, &r).unwrap() - 1.0).abs() < 1e-12);
        }
        // swapping one candidate for another sentence never raises CIDEr
        let best = cider(&refs, &r, &r).unwrap();
        let mut worse = refs.clone();
        worse[0] = other;
        prop_assert!(cider(&worse, &r, &r).unwrap() <= best + 1e-9);
    }

    #[test]
    fn scores_stay_in_range(items in corpus()) {
        let (c, r) = split(&items);
        let b = bleu4(&c, &r).unwrap();
        let l = rouge_l_corpus(&c, &r).unwrap();
        prop_assert!((0.0..=1.0 + 1e-12).contains(&b));
        prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        prop_assert!(cider(&c, &r, &r).unwrap() >= 0.0);
    }
}
