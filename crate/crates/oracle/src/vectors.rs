//! Frozen metric test vectors.

/// Output of `scripts/cider_reference.py` on [`toy`].
pub const TOY_CIDER: f64 = 4.126451105797;

/// Hand-computed BLEU-4 of [`BLEU_PAIR`]: p1 = 5/6, p2 = 3/5, p3 = 1/4,
/// p4 = 0/3 smoothed to 1/(3+1); brevity penalty 1.
pub const TOY_BLEU: f64 = 0.420448207627;
pub const BLEU_PAIR: (&str, &str) = ("the cat sat on the mat", "the cat is on the mat");

/// LCS "a c d" has length 3 in both: P = R = 3/4.
pub const LCS_PAIR: (&str, &str, f64) = ("a b c d", "a c d e", 0.75);

pub fn toy() -> Vec<(String, Vec<String>)> {
    [
        ("a dog barking in the yard", vec!["a dog barking in the yard", "a dog is barking loudly"]),
        ("the cat sitting on the mat", vec!["a cat sitting on a mat", "the cat sits on the mat"]),
        ("a bird singing in the tree", vec!["a bird sings in a tree", "birds singing in the park"]),
    ]
    .into_iter()
    .map(|(c, r)| (c.to_string(), r.into_iter().map(String::from).collect()))
    .collect()
}
