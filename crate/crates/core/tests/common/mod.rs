#![allow(dead_code)]

use std::sync::OnceLock;

use capguide::classifier::{Classifier, ClassifierConfig};
use capguide::corpus::{
    generate_classifier_corpus, generate_lm_corpus, world_vocabulary_text, ConditionedCaption, CorpusSpec, WorldKind,
};
use capguide::lm::{Lm, LmConfig};
use capguide::tokenizer::Vocabulary;
use capguide::trainer::{lm_context, train_classifier, train_lm, OptimConfig};

pub struct Fixture {
    pub vocab: Vocabulary,
    pub lm: Lm,
    pub clf: Classifier,
    pub lm_test: Vec<ConditionedCaption>,
}

impl Fixture {
    pub fn context(&self, prefix: &str) -> Vec<u32> {
        lm_context(&self.vocab, prefix).unwrap()
    }
}

/// Briefly trained models on the demo world; enough structure for gradient
/// and decoding tests, cheap to build.
pub fn demo() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let spec = CorpusSpec { world: WorldKind::Demo, classifier_size: 200, ..CorpusSpec::default() };
        let vocab = Vocabulary::build(&world_vocabulary_text(spec.world), 1).unwrap();
        let clf_data = generate_classifier_corpus(&spec).unwrap();
        let lm_data = generate_lm_corpus(&spec).unwrap();
        let quick = OptimConfig { lr: 1e-3, batch_size: 16, epochs: 30, decay_every: 1000, ..OptimConfig::default() };
        let (clf, _) =
            train_classifier(&clf_data.train, &clf_data.val, &vocab, ClassifierConfig::new(vocab.len()), &quick).unwrap();
        let (lm, _) = train_lm(&lm_data.train, &lm_data.val, &vocab, LmConfig::new(vocab.len()), &quick).unwrap();
        Fixture { vocab, lm, clf, lm_test: lm_data.test }
    })
}
