//! Closed-vocabulary template worlds the corpora are drawn from.

use std::collections::BTreeSet;
use std::sync::OnceLock;

use serde::{Deserialize, Serialize};

use crate::tokenizer::split_words;

const SOUND_LEXICON: &str = include_str!("../../data/sound_lexicon.txt");

/// Word list that defines audibility ground truth.
#[derive(Debug)]
pub struct SoundLexicon {
    pub version: u32,
    words: BTreeSet<String>,
}

impl SoundLexicon {
    pub fn get() -> &'static SoundLexicon {
        static LEX: OnceLock<SoundLexicon> = OnceLock::new();
        LEX.get_or_init(|| Self::parse(SOUND_LEXICON))
    }

    fn parse(text: &str) -> Self {
        let mut version = 0;
        let mut words = BTreeSet::new();
        for line in text.lines().map(str::trim) {
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(v) = rest.split("version").nth(1) {
                    version = v.trim().parse().unwrap_or(0);
                }
            } else if !line.is_empty() {
                words.insert(line.to_string());
            }
        }
        Self { version, words }
    }

    pub fn contains(&self, word: &str) -> bool {
        self.words.contains(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.words.iter().map(String::as_str)
    }

    /// The lexicon rule: audible iff any word is a sound word.
    pub fn is_audible(&self, text: &str) -> bool {
        split_words(text).any(|w| self.contains(&w))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum WorldKind {
    /// ~300-word world used for the main experiments.
    #[default]
    Standard,
    /// 16-token world with near-tied sound/non-sound continuations.
    Demo,
}

#[derive(Debug)]
pub struct Subject {
    pub noun: &'static str,
    /// `(verb, weight)`; weights only matter for the demo world.
    pub audible: &'static [(&'static str, u32)],
    pub silent: &'static [(&'static str, u32)],
}

#[derive(Debug)]
pub struct World {
    pub kind: WorldKind,
    pub adjectives: &'static [&'static str],
    pub places: &'static [(&'static str, &'static str)],
    pub subjects: &'static [Subject],
    /// Sentence endings shared by both classes.
    pub contexts: &'static [&'static str],
}

/// Separator between the condition prefix and the caption in LM sequences.
pub const SEPARATOR: &str = "sep";

macro_rules! verbs {
    ($($v:literal),* $(,)?) => { &[$(($v, 1)),*] };
}

static STANDARD_SUBJECTS: &[Subject] = &[
    Subject { noun: "dog", audible: verbs!["barking", "growling", "howling", "whining"], silent: verbs!["sitting", "sleeping", "lying", "standing"] },
    Subject { noun: "cat", audible: verbs!["meowing", "purring", "hissing", "yowling"], silent: verbs!["sitting", "sleeping", "resting", "staring"] },
    Subject { noun: "bird", audible: verbs!["chirping", "singing", "squawking", "tweeting"], silent: verbs!["perching", "resting", "sitting", "waiting"] },
    Subject { noun: "baby", audible: verbs!["crying", "laughing", "babbling", "giggling"], silent: verbs!["sleeping", "resting", "lying", "sitting"] },
    Subject { noun: "man", audible: verbs!["talking", "shouting", "whistling", "singing"], silent: verbs!["sitting", "standing", "reading", "waiting"] },
    Subject { noun: "woman", audible: verbs!["speaking", "laughing", "singing", "humming"], silent: verbs!["sitting", "standing", "reading", "resting"] },
    Subject { noun: "child", audible: verbs!["screaming", "giggling", "shouting", "singing"], silent: verbs!["sitting", "reading", "standing", "waiting"] },
    Subject { noun: "crowd", audible: verbs!["cheering", "clapping", "chanting", "shouting"], silent: verbs!["standing", "waiting", "gathering", "sitting"] },
    Subject { noun: "phone", audible: verbs!["ringing", "buzzing", "beeping", "chiming"], silent: verbs!["resting", "lying", "glowing", "charging"] },
    Subject { noun: "clock", audible: verbs!["ticking", "chiming", "ringing", "beeping"], silent: verbs!["hanging", "resting", "glowing", "standing"] },
    Subject { noun: "bell", audible: verbs!["ringing", "chiming", "tolling", "clanging"], silent: verbs!["hanging", "resting", "shining", "rusting"] },
    Subject { noun: "engine", audible: verbs!["roaring", "rumbling", "humming", "sputtering"], silent: verbs!["resting", "rusting", "cooling", "standing"] },
    Subject { noun: "car", audible: verbs!["honking", "revving", "screeching", "rumbling"], silent: verbs!["parked", "rusting", "resting", "shining"] },
    Subject { noun: "drone", audible: verbs!["buzzing", "humming", "whirring", "droning"], silent: verbs!["hovering", "resting", "floating", "glowing"] },
    Subject { noun: "kettle", audible: verbs!["whistling", "hissing", "bubbling", "rattling"], silent: verbs!["resting", "cooling", "shining", "standing"] },
    Subject { noun: "door", audible: verbs!["creaking", "slamming", "banging", "squeaking"], silent: verbs!["standing", "resting", "hanging", "shining"] },
    Subject { noun: "horse", audible: verbs!["neighing", "snorting", "whinnying", "grunting"], silent: verbs!["grazing", "standing", "resting", "sleeping"] },
    Subject { noun: "cow", audible: verbs!["mooing", "bellowing", "grunting", "snorting"], silent: verbs!["grazing", "standing", "resting", "lying"] },
    Subject { noun: "frog", audible: verbs!["croaking", "chirping", "trilling", "peeping"], silent: verbs!["sitting", "resting", "floating", "waiting"] },
    Subject { noun: "train", audible: verbs!["whistling", "rumbling", "screeching", "clattering"], silent: verbs!["parked", "resting", "waiting", "standing"] },
];

static STANDARD: World = World {
    kind: WorldKind::Standard,
    adjectives: &["small", "big", "young", "brown", "white", "black", "red", "tiny", "large", "gray", "little", "striped"],
    places: &[
        ("in", "yard"), ("in", "kitchen"), ("in", "park"), ("in", "garden"), ("in", "street"),
        ("in", "room"), ("in", "forest"), ("in", "field"), ("in", "barn"), ("in", "hallway"),
        ("near", "river"), ("near", "lake"), ("near", "road"), ("near", "window"), ("near", "fence"),
        ("near", "house"), ("on", "porch"), ("on", "roof"), ("on", "beach"), ("on", "table"),
        ("on", "bridge"), ("on", "hill"), ("at", "station"), ("at", "market"), ("at", "farm"),
        ("by", "sea"), ("by", "pond"), ("under", "tree"), ("under", "stairs"), ("behind", "shed"),
    ],
    subjects: STANDARD_SUBJECTS,
    contexts: &["at night", "in the morning", "in the evening", "all day", "in the distance", "nearby", "in excitement", "after dinner", "before dawn", "in winter"],
};

// Verb weights give p(walking) > p(barking) > p(sitting) per prefix, so the
// unguided model prefers the silent verb by a small margin.
static DEMO_SUBJECTS: &[Subject] = &[
    Subject { noun: "dog", audible: &[("barking", 20)], silent: &[("walking", 21), ("sitting", 9)] },
    Subject { noun: "cat", audible: &[("meowing", 20)], silent: &[("walking", 21), ("sitting", 9)] },
];

static DEMO: World = World {
    kind: WorldKind::Demo,
    adjectives: &[],
    places: &[("in", "yard"), ("in", "park")],
    subjects: DEMO_SUBJECTS,
    contexts: &[],
};

/// Static-scene pieces for "ice covers the lake in winter" style facts.
pub(crate) const STATIC_THINGS: &[&str] = &["ice", "snow", "moss", "dust", "fog", "frost", "rust", "light", "shadow"];
pub(crate) const STATIC_VERBS: &[&str] = &["covers", "fills", "hides", "touches", "surrounds"];
pub(crate) const STATIC_OBJECTS: &[&str] = &["lake", "field", "road", "roof", "table", "stone", "window", "bridge", "hill", "garden"];
pub(crate) const STATIC_TIMES: &[&str] = &["in winter", "in spring", "at night", "at dawn", "in the morning", "all day"];
/// "magnets attract metals" style facts.
pub(crate) const FACT_SUBJECTS: &[&str] = &["magnets", "icebergs", "statues", "stones", "mirrors", "crystals", "planets", "shadows"];
pub(crate) const FACT_VERBS: &[&str] = &["attract", "reflect", "cover", "surround", "hold", "face"];
pub(crate) const FACT_OBJECTS: &[&str] = &["metals", "water", "light", "walls", "trees", "hills"];

impl World {
    pub fn get(kind: WorldKind) -> &'static World {
        match kind {
            WorldKind::Standard => &STANDARD,
            WorldKind::Demo => &DEMO,
        }
    }

    pub fn subject(&self, noun: &str) -> Option<&Subject> {
        self.subjects.iter().find(|s| s.noun == noun)
    }

    /// Every word any generator for this world can emit, plus the separator.
    pub fn all_words(&self) -> BTreeSet<String> {
        let mut lines: Vec<String> = vec![SEPARATOR.into(), "a the is of".into()];
        lines.extend(self.adjectives.iter().map(|s| s.to_string()));
        lines.extend(self.places.iter().map(|(p, n)| format!("{p} {n}")));
        for s in self.subjects {
            lines.push(s.noun.into());
            lines.extend(s.audible.iter().chain(s.silent).map(|(v, _)| v.to_string()));
        }
        lines.extend(self.contexts.iter().map(|s| s.to_string()));
        if self.kind == WorldKind::Standard {
            for list in [STATIC_THINGS, STATIC_VERBS, STATIC_OBJECTS, STATIC_TIMES, FACT_SUBJECTS, FACT_VERBS, FACT_OBJECTS] {
                lines.extend(list.iter().map(|s| s.to_string()));
            }
        } else {
            lines.retain(|l| l != "a the is of");
            lines.push("a the".into());
        }
        lines.iter().flat_map(|l| split_words(l).collect::<Vec<_>>()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_is_versioned() {
        let lex = SoundLexicon::get();
        assert_eq!(lex.version, 1);
        assert!(lex.contains("barking") && !lex.contains("sitting"));
        assert!(lex.is_audible("The barking of a dog in excitement."));
        assert!(!lex.is_audible("Ice covers the lake in winter."));
    }

    #[test]
    fn verb_classes_agree_with_lexicon() {
        let lex = SoundLexicon::get();
        for world in [World::get(WorldKind::Standard), World::get(WorldKind::Demo)] {
            for s in world.subjects {
                for (v, _) in s.audible {
                    assert!(lex.contains(v), "{v} should be a sound word");
                }
                for (v, _) in s.silent {
                    assert!(!lex.contains(v), "{v} must not be a sound word");
                }
                assert!(!lex.contains(s.noun));
            }
            for w in world.all_words() {
                let is_verb = world.subjects.iter().any(|s| s.audible.iter().any(|(v, _)| *v == w));
                assert_eq!(lex.contains(&w), is_verb, "{w}");
            }
        }
        // every sound word is reachable in the standard world
        let std_words = World::get(WorldKind::Standard).all_words();
        assert!(lex.words().all(|w| std_words.contains(w)));
    }

    #[test]
    fn demo_world_has_sixteen_tokens() {
        assert_eq!(World::get(WorldKind::Demo).all_words().len() + 4, 16);
    }
}
