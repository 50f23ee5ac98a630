mod common;

use std::collections::HashSet;

use capguide::classifier::{Classifier, ClassifierConfig, SoftSequence};
use capguide::corpus::{generate_classifier_corpus, CorpusSpec, Label, SoundLexicon};
use capguide::guidance::{baseline_decode, guided_decode, GuidanceConfig};
use capguide::ndiff::softmax;
use capguide::tokenizer::Vocabulary;
use capguide::trainer::OptimConfig;
use proptest::prelude::*;

fn small() -> ProptestConfig {
    ProptestConfig { cases: 12, ..ProptestConfig::default() }
}

proptest! {
    #[test]
    fn tokenizer_round_trips_in_vocabulary_text(words in prop::collection::vec("[a-z]{1,8}", 1..12)) {
        let text = words.join(" ");
        let vocab = Vocabulary::build(std::slice::from_ref(&text), 1).unwrap();
        prop_assert_eq!(vocab.decode(&vocab.encode(&text)).unwrap(), text);
    }

    #[test]
    fn vocabulary_ignores_line_order(mut lines in prop::collection::vec("[a-z]{1,5}( [a-z]{1,5}){0,4}", 1..10)) {
        let a = Vocabulary::build(&lines, 1).unwrap();
        lines.reverse();
        prop_assert_eq!(a, Vocabulary::build(&lines, 1).unwrap());
    }

    #[test]
    fn lr_schedule_is_exact(lr in 1e-5f64..1e-2, epoch in 1usize..60) {
        let c = OptimConfig { lr, ..OptimConfig::default() };
        prop_assert_eq!(c.lr_at(epoch), lr * 0.1f64.powi(((epoch - 1) / 10) as i32));
    }

    #[test]
    fn classifier_outputs_are_distributions(seed in 0u64..1000, ids in prop::collection::vec(0u32..16, 0..10), logits in prop::collection::vec(-5.0f32..5.0, 16)) {
        let clf = Classifier::new(ClassifierConfig::new(16), seed).unwrap();
        let soft = softmax(&logits);
        let p = clf.probs_soft(&SoftSequence { hard: ids.clone(), soft }).unwrap();
        prop_assert!((p[0] + p[1] - 1.0).abs() < 1e-6 && p[0] > 0.0 && p[1] > 0.0);
        if let Some((&last, head)) = ids.split_last() {
            let mut one_hot = vec![0.0; 16];
            one_hot[last as usize] = 1.0;
            let s = clf.probs_soft(&SoftSequence { hard: head.to_vec(), soft: one_hot }).unwrap();
            let h = clf.probs_hard(&ids).unwrap();
            prop_assert!((s[1] - h[1]).abs() <= 1e-6);
        }
    }
}

proptest! {
    #![proptest_config(small())]

    #[test]
    fn classifier_corpus_is_balanced_disjoint_and_separable(seed in 0u64..10_000) {
        let spec = CorpusSpec { seed, classifier_size: 2000, ..CorpusSpec::default() };
        let s = generate_classifier_corpus(&spec).unwrap();
        let lex = SoundLexicon::get();
        let mut seen = HashSet::new();
        for part in [&s.train, &s.val, &s.test] {
            let audible = part.iter().filter(|c| c.label == Label::Audible).count();
            prop_assert_eq!(2 * audible, part.len());
            for c in part.iter() {
                prop_assert!(seen.insert(c.text.clone()), "duplicate {}", c.text);
                prop_assert_eq!(lex.is_audible(&c.text), c.label == Label::Audible);
            }
        }
    }

    #[test]
    fn guidance_no_ops_reproduce_baseline(i in 0usize..200, steps in 1usize..6) {
        let f = common::demo();
        let prefixes: Vec<&str> = f.lm_test.iter().map(|c| c.prefix.as_str()).collect();
        let ctx = f.context(prefixes[i % prefixes.len()]);
        let cfg = GuidanceConfig { steps, ..GuidanceConfig::default() };
        let base = baseline_decode(&f.lm, Some(&f.clf), &ctx, &cfg).unwrap();
        let no_attr = guided_decode(&f.lm, &f.clf, &ctx, &GuidanceConfig { lambda1: 0.0, ..cfg.clone() }).unwrap();
        let no_steps = guided_decode(&f.lm, &f.clf, &ctx, &GuidanceConfig { steps: 0, ..cfg.clone() }).unwrap();
        prop_assert_eq!(&no_attr.tokens, &base.tokens);
        prop_assert_eq!(&no_steps.tokens, &base.tokens);
    }

    #[test]
    fn accepted_steps_never_increase_loss(i in 0usize..200, alpha in 0.005f64..0.5, lambda0 in 0.0f64..3.0) {
        let f = common::demo();
        let prefixes: Vec<&str> = f.lm_test.iter().map(|c| c.prefix.as_str()).collect();
        let ctx = f.context(prefixes[i % prefixes.len()]);
        let cfg = GuidanceConfig { alpha, lambda0, ..GuidanceConfig::default() };
        let out = guided_decode(&f.lm, &f.clf, &ctx, &cfg).unwrap();
        for row in &out.trace {
            prop_assert!(row.losses.windows(2).all(|w| w[1] <= w[0]), "{row:?}");
        }
    }
}
