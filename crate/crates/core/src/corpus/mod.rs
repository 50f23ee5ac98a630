//! Seeded template corpora: labeled sentences for the audibility classifier
//! and prefix-conditioned captions for the language model.

mod world;

use std::collections::{BTreeMap, HashSet};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use world::{SoundLexicon, Subject, World, WorldKind, SEPARATOR};
use world::{FACT_OBJECTS, FACT_SUBJECTS, FACT_VERBS, STATIC_OBJECTS, STATIC_THINGS, STATIC_TIMES, STATIC_VERBS};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    NonAudible,
    Audible,
}

impl Label {
    /// Classifier output index.
    pub fn index(self) -> usize {
        match self {
            Label::NonAudible => 0,
            Label::Audible => 1,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::NonAudible => "non_audible",
            Label::Audible => "audible",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LabeledCaption {
    pub text: String,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ConditionedCaption {
    pub prefix: String,
    pub caption: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub seed: u64,
    pub world: WorldKind,
    /// Total classifier sentences, split evenly between the classes.
    pub classifier_size: usize,
    /// Total LM captions.
    pub lm_size: usize,
    pub captions_per_prefix: usize,
    pub audible_fraction: f64,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Keep all captions of a prefix inside one split.
    pub template_disjoint: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            world: WorldKind::Standard,
            classifier_size: 10_000,
            lm_size: 20_000,
            captions_per_prefix: 4,
            audible_fraction: 0.5,
            train_fraction: 0.8,
            val_fraction: 0.1,
            test_fraction: 0.1,
            template_disjoint: true,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CorpusError {
    #[error("requested {requested} {what} but the templates can produce at most {max}")]
    Capacity { what: &'static str, requested: usize, max: usize },
    #[error("invalid corpus spec: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Splits<T> {
    pub fn iter(&self) -> impl Iterator<Item = (&'static str, &[T])> {
        [("train", &self.train[..]), ("val", &self.val[..]), ("test", &self.test[..])].into_iter()
    }
}

impl CorpusSpec {
    fn validate(&self) -> Result<(), CorpusError> {
        let fr = [self.train_fraction, self.val_fraction, self.test_fraction];
        if fr.iter().any(|f| !(0.0..=1.0).contains(f)) || (fr.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(CorpusError::Config(format!("split fractions {fr:?} must be in [0,1] and sum to 1")));
        }
        if !(0.0..=1.0).contains(&self.audible_fraction) {
            return Err(CorpusError::Config(format!("audible fraction {} outside [0,1]", self.audible_fraction)));
        }
        if self.captions_per_prefix == 0 {
            return Err(CorpusError::Config("captions_per_prefix must be positive".into()));
        }
        Ok(())
    }

    fn rng(&self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(stream);
        rng
    }

    /// Per-split sizes for `n` items: val and test are floored, train takes the rest.
    fn split_sizes(&self, n: usize) -> [usize; 3] {
        let val = (n as f64 * self.val_fraction).floor() as usize;
        let test = (n as f64 * self.test_fraction).floor() as usize;
        [n - val - test, val, test]
    }
}

fn place_phrase((prep, noun): (&str, &str)) -> String {
    format!("{prep} the {noun}")
}

/// All distinct sentences of each template family, per class.
fn classifier_families(world: &World) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
    let mut aud = vec![Vec::new(), Vec::new(), Vec::new()];
    let mut sil = vec![Vec::new(), Vec::new(), Vec::new(), Vec::new()];
    let places: Vec<String> = world.places.iter().map(|&p| place_phrase(p)).collect();
    for s in world.subjects {
        for &(v, _) in s.audible {
            if world.adjectives.is_empty() {
                for p in &places {
                    aud[0].push(format!("a {} {v} {p}", s.noun));
                }
                aud[1].push(format!("a {} {v}", s.noun));
            }
            for a in world.adjectives {
                for p in &places {
                    aud[0].push(format!("a {a} {} {v} {p}", s.noun));
                }
            }
            for c in world.contexts {
                aud[1].push(format!("the {v} of a {} {c}", s.noun));
                aud[2].push(format!("the {} is {v} {c}", s.noun));
            }
        }
        for &(v, _) in s.silent {
            if world.adjectives.is_empty() {
                for p in &places {
                    sil[0].push(format!("a {} {v} {p}", s.noun));
                }
                sil[1].push(format!("a {} {v}", s.noun));
            }
            for a in world.adjectives {
                for p in &places {
                    sil[0].push(format!("a {a} {} {v} {p}", s.noun));
                }
            }
            for c in world.contexts {
                sil[1].push(format!("the {} is {v} {c}", s.noun));
            }
        }
    }
    if world.kind == WorldKind::Standard {
        for t in STATIC_THINGS {
            for v in STATIC_VERBS {
                for o in STATIC_OBJECTS {
                    for time in STATIC_TIMES {
                        sil[2].push(format!("{t} {v} the {o} {time}"));
                    }
                }
            }
        }
        for s in FACT_SUBJECTS {
            for v in FACT_VERBS {
                for o in FACT_OBJECTS {
                    sil[3].push(format!("{s} {v} {o}"));
                }
            }
        }
    } else {
        // two-clause sentences; audible if either clause is
        let single: Vec<(String, bool)> = aud[0]
            .iter()
            .chain(&aud[1])
            .map(|s| (s.clone(), true))
            .chain(sil[0].iter().chain(&sil[1]).map(|s| (s.clone(), false)))
            .collect();
        for (x, xa) in &single {
            for (y, ya) in &single {
                if x != y {
                    let s = format!("{x} {y}");
                    if *xa || *ya { aud[2].push(s) } else { sil[2].push(s) }
                }
            }
        }
    }
    let clean = |fams: Vec<Vec<String>>| fams.into_iter().filter(|f| !f.is_empty()).collect::<Vec<_>>();
    (clean(aud), clean(sil))
}

/// Round-robin across shuffled families until `n` distinct sentences are drawn.
fn draw(families: &mut [Vec<String>], n: usize, rng: &mut ChaCha8Rng) -> Vec<String> {
    for f in families.iter_mut() {
        f.shuffle(rng);
    }
    let mut cursors = vec![0usize; families.len()];
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let mut progressed = false;
        for (f, c) in families.iter().zip(cursors.iter_mut()) {
            while *c < f.len() {
                let s = &f[*c];
                *c += 1;
                if seen.insert(s.clone()) {
                    out.push(s.clone());
                    progressed = true;
                    break;
                }
            }
            if out.len() == n {
                break;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Maximum classifier corpus size (both classes) a world supports.
pub fn classifier_capacity(world: WorldKind) -> usize {
    let (aud, sil) = classifier_families(World::get(world));
    let distinct = |f: &[Vec<String>]| f.iter().flatten().collect::<HashSet<_>>().len();
    2 * distinct(&aud).min(distinct(&sil))
}

pub fn generate_classifier_corpus(spec: &CorpusSpec) -> Result<Splits<LabeledCaption>, CorpusError> {
    spec.validate()?;
    let world = World::get(spec.world);
    if !spec.classifier_size.is_multiple_of(2) {
        return Err(CorpusError::Config(format!("classifier size {} must be even for exact balance", spec.classifier_size)));
    }
    let per_class = spec.classifier_size / 2;
    let sizes = spec.split_sizes(per_class);
    if sizes.iter().any(|&s| s < 10) {
        return Err(CorpusError::Config(format!("split sizes per class {sizes:?} must each be at least 10")));
    }
    let max = classifier_capacity(spec.world);
    if spec.classifier_size > max {
        return Err(CorpusError::Capacity { what: "classifier sentences", requested: spec.classifier_size, max });
    }
    let (mut aud, mut sil) = classifier_families(world);
    let mut rng = spec.rng(1);
    let drawn = [(Label::Audible, draw(&mut aud, per_class, &mut rng)), (Label::NonAudible, draw(&mut sil, per_class, &mut rng))];

    let mut splits = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    for (label, texts) in drawn {
        let mut it = texts.into_iter().map(|text| LabeledCaption { text, label });
        splits.val.extend(it.by_ref().take(sizes[1]));
        splits.test.extend(it.by_ref().take(sizes[2]));
        splits.train.extend(it);
    }
    for part in [&mut splits.train, &mut splits.val, &mut splits.test] {
        part.shuffle(&mut rng);
    }
    Ok(splits)
}

/// Condition prefix for a scene.
fn lm_prefix(adj: Option<&str>, noun: &str, place: (&str, &str)) -> String {
    match adj {
        Some(a) => format!("a {a} {noun} {}", place_phrase(place)),
        None => format!("a {noun} {}", place_phrase(place)),
    }
}

fn lm_caption(adj: Option<&str>, noun: &str, verb: &str, place: (&str, &str)) -> String {
    match adj {
        Some(a) => format!("a {a} {noun} {verb} {}", place_phrase(place)),
        None => format!("a {noun} {verb} {}", place_phrase(place)),
    }
}

/// Number of distinct LM prefixes a world supports.
pub fn lm_prefix_capacity(world: WorldKind) -> usize {
    let w = World::get(world);
    w.adjectives.len().max(1) * w.subjects.len() * w.places.len()
}

/// Splits LM captions by prefix. The demo world instead repeats its whole
/// weighted corpus in every split, since it exists to be memorised.
pub fn generate_lm_corpus(spec: &CorpusSpec) -> Result<Splits<ConditionedCaption>, CorpusError> {
    spec.validate()?;
    let world = World::get(spec.world);
    if world.kind == WorldKind::Demo {
        return Ok(demo_lm_corpus(world));
    }
    let cpp = spec.captions_per_prefix;
    let n_prefix = spec.lm_size / cpp;
    if n_prefix * cpp != spec.lm_size {
        return Err(CorpusError::Config(format!("lm size {} is not a multiple of captions_per_prefix {cpp}", spec.lm_size)));
    }
    let max = lm_prefix_capacity(spec.world) * cpp;
    if spec.lm_size > max {
        return Err(CorpusError::Capacity { what: "lm captions", requested: spec.lm_size, max });
    }
    let sizes = spec.split_sizes(n_prefix);
    if sizes.contains(&0) {
        return Err(CorpusError::Config(format!("lm prefix split sizes {sizes:?} must all be positive")));
    }

    let mut rng = spec.rng(2);
    let mut scenes = Vec::with_capacity(max / cpp);
    for a in world.adjectives {
        for (si, _) in world.subjects.iter().enumerate() {
            for &p in world.places {
                scenes.push((*a, si, p));
            }
        }
    }
    scenes.shuffle(&mut rng);
    scenes.truncate(n_prefix);

    // Bresenham allocation keeps the global audible count at round(f * N).
    let total_aud = (spec.audible_fraction * spec.lm_size as f64).round() as usize;
    let mut groups = Vec::with_capacity(n_prefix);
    for (i, &(adj, si, place)) in scenes.iter().enumerate() {
        let subj = &world.subjects[si];
        let n_aud = (i + 1) * total_aud / n_prefix - i * total_aud / n_prefix;
        let mut aud: Vec<&str> = subj.audible.iter().map(|v| v.0).collect();
        let mut sil: Vec<&str> = subj.silent.iter().map(|v| v.0).collect();
        aud.shuffle(&mut rng);
        sil.shuffle(&mut rng);
        let verbs = aud.iter().cycle().take(n_aud).chain(sil.iter().cycle().take(cpp - n_aud));
        let prefix = lm_prefix(Some(adj), subj.noun, place);
        let group: Vec<ConditionedCaption> = verbs
            .map(|v| ConditionedCaption { prefix: prefix.clone(), caption: lm_caption(Some(adj), subj.noun, v, place) })
            .collect();
        groups.push(group);
    }

    let mut splits = Splits { train: Vec::new(), val: Vec::new(), test: Vec::new() };
    if spec.template_disjoint {
        let mut it = groups.into_iter();
        splits.val = it.by_ref().take(sizes[1]).flatten().collect();
        splits.test = it.by_ref().take(sizes[2]).flatten().collect();
        splits.train = it.flatten().collect();
    } else {
        let mut all: Vec<_> = groups.into_iter().flatten().collect();
        all.shuffle(&mut rng);
        let s = spec.split_sizes(all.len());
        let mut it = all.into_iter();
        splits.val = it.by_ref().take(s[1]).collect();
        splits.test = it.by_ref().take(s[2]).collect();
        splits.train = it.collect();
    }
    splits.train.shuffle(&mut rng);
    Ok(splits)
}

fn demo_lm_corpus(world: &World) -> Splits<ConditionedCaption> {
    let mut all = Vec::new();
    for s in world.subjects {
        for &place in world.places {
            let prefix = lm_prefix(None, s.noun, place);
            // interleave verbs so batches see a mix
            let mut left: Vec<(&str, u32)> = s.audible.iter().chain(s.silent).copied().collect();
            while left.iter().any(|v| v.1 > 0) {
                for (v, n) in left.iter_mut().filter(|v| v.1 > 0) {
                    // verb last, so choosing it needs attention over the cache
                    let caption = format!("a {} {} the {} {v}", s.noun, place.0, place.1);
                    all.push(ConditionedCaption { prefix: prefix.clone(), caption });
                    *n -= 1;
                }
            }
        }
    }
    Splits { train: all.clone(), val: all.clone(), test: all }
}

/// Distinct prefixes in first-seen order, each with every caption it has in `set`.
pub fn references_by_prefix(set: &[ConditionedCaption]) -> Vec<(String, Vec<String>)> {
    let mut order = Vec::new();
    let mut refs: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for c in set {
        let entry = refs.entry(&c.prefix).or_insert_with(|| {
            order.push(c.prefix.clone());
            Vec::new()
        });
        entry.push(c.caption.clone());
    }
    order.into_iter().map(|p| {
        let r = refs[p.as_str()].clone();
        (p, r)
    }).collect()
}

/// Every text the world can emit, for vocabulary construction.
pub fn world_vocabulary_text(world: WorldKind) -> Vec<String> {
    World::get(world).all_words().into_iter().collect()
}
