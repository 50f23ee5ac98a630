mod common;

use capguide::classifier::ClassifierConfig;
use capguide::corpus::{generate_classifier_corpus, CorpusSpec, ConditionedCaption, WorldKind};
use capguide::guidance::{baseline_decode, GuidanceConfig};
use capguide::lm::LmConfig;
use capguide::ndiff::kernels::log_sum_exp;
use capguide::tokenizer::Vocabulary;
use capguide::trainer::{
    evaluate_classifier, lm_batch_loss, lm_context, lm_examples, train_classifier, train_lm, LmExample, OptimConfig,
    TrainError,
};

fn pairs() -> Vec<ConditionedCaption> {
    [
        ("a dog in the yard", "a dog barking in the yard"),
        ("a cat in the park", "a cat sitting in the park"),
        ("a bird on the roof", "a bird singing on the roof at dawn"),
    ]
    .iter()
    .map(|(p, c)| ConditionedCaption { prefix: p.to_string(), caption: c.to_string() })
    .collect()
}

fn vocab_of(set: &[ConditionedCaption]) -> Vocabulary {
    let mut text: Vec<String> = set.iter().flat_map(|c| [c.prefix.clone(), c.caption.clone()]).collect();
    text.push("sep".into());
    Vocabulary::build(&text, 1).unwrap()
}

#[test]
fn memorizes_tiny_corpus_and_decodes_it() {
    let set = pairs();
    let vocab = vocab_of(&set);
    let optim = OptimConfig { lr: 3e-3, batch_size: 3, epochs: 150, decay_every: 1000, ..OptimConfig::default() };
    let (lm, report) = train_lm(&set, &set, &vocab, LmConfig::new(vocab.len()), &optim).unwrap();
    assert!(report.best_val_metric < 1.5, "ppl {}", report.best_val_metric);
    for c in &set {
        let out = baseline_decode(&lm, None, &lm_context(&vocab, &c.prefix).unwrap(), &GuidanceConfig::default()).unwrap();
        assert!(out.ended_with_eos);
        assert_eq!(vocab.decode(&out.tokens).unwrap(), c.caption);
    }
}

#[test]
fn loss_counts_only_caption_positions() {
    let f = common::demo();
    let exs = lm_examples(&f.vocab, &f.lm_test[..2], f.lm.config.max_len).unwrap();
    // hand-rolled mean NLL over positions at or after the separator
    let manual = |e: &LmExample| -> (f64, usize) {
        let n = e.ids.len() - 1;
        let logits = f.lm.forward_full(&e.ids[..n]).unwrap();
        let mut s = 0.0;
        for t in e.sep..n {
            let row = logits.row_slice(t);
            s += log_sum_exp(row) - row[e.ids[t + 1] as usize] as f64;
        }
        (s, n - e.sep)
    };
    let (s0, n0) = manual(&exs[0]);
    let single = lm_batch_loss(&f.lm, &[&exs[0]], &[exs[0].targets()]).unwrap() as f64;
    assert!((single - s0 / n0 as f64).abs() < 1e-5);
    // a longer partner pads the batch; padding and prefixes stay out of the mean
    let mut long = exs[1].clone();
    long.ids.splice(1..1, f.vocab.encode("the the the"));
    long.sep += 3;
    let (s1, n1) = manual(&long);
    let pair = lm_batch_loss(&f.lm, &[&exs[0], &long], &[exs[0].targets(), long.targets()]).unwrap() as f64;
    assert!((pair - (s0 + s1) / (n0 + n1) as f64).abs() < 1e-5);
    // pre-separator target slots are ignored even when filled
    let mut filled = exs[0].targets();
    for t in filled.iter_mut().take(exs[0].sep) {
        *t = Some(0);
    }
    assert_eq!(lm_batch_loss(&f.lm, &[&exs[0]], &[filled]).unwrap() as f64, single);
}

#[test]
fn too_long_sequences_are_reported() {
    let mut set = pairs();
    set[1].caption = vec!["a cat"; 30].join(" ");
    let vocab = vocab_of(&set);
    match lm_examples(&vocab, &set, 48) {
        Err(TrainError::TooLong { max: 48, offenders }) => assert_eq!(offenders.iter().map(|o| o.0).collect::<Vec<_>>(), vec![1]),
        other => panic!("{other:?}"),
    }
}

#[test]
fn training_is_bit_reproducible() {
    let spec = CorpusSpec { world: WorldKind::Demo, classifier_size: 200, ..CorpusSpec::default() };
    let data = generate_classifier_corpus(&spec).unwrap();
    let vocab = common::demo().vocab.clone();
    let optim = OptimConfig { epochs: 3, ..OptimConfig::default() };
    let run = || train_classifier(&data.train, &data.val, &vocab, ClassifierConfig::new(vocab.len()), &optim).unwrap();
    let (a, ra) = run();
    let (b, rb) = run();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(serde_json::to_string(&ra).unwrap(), serde_json::to_string(&rb).unwrap());
    let other = OptimConfig { seed: 1, ..optim.clone() };
    let (c, _) = train_classifier(&data.train, &data.val, &vocab, ClassifierConfig::new(vocab.len()), &other).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());

    let set = pairs();
    let lv = vocab_of(&set);
    let lm_run = || train_lm(&set, &set, &lv, LmConfig::new(lv.len()), &optim).unwrap().1;
    assert_eq!(serde_json::to_string(&lm_run()).unwrap(), serde_json::to_string(&lm_run()).unwrap());
}

#[test]
fn classifier_recipe_separates_demo_corpus() {
    let f = common::demo();
    let spec = CorpusSpec { world: WorldKind::Demo, classifier_size: 200, ..CorpusSpec::default() };
    let data = generate_classifier_corpus(&spec).unwrap();
    assert!(evaluate_classifier(&f.clf, &f.vocab, &data.test).unwrap() >= 0.95);
}
