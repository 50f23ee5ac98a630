//! Classifier-guided caption decoding: a small transformer captioner whose
//! key/value cache is nudged at every step toward an attribute classifier.

// `!(x > 0.0)` is deliberate throughout: it rejects NaN as well.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod corpus;
pub mod guidance;
pub mod io;
pub mod lm;
pub mod metrics;
pub mod ndiff;
pub mod tokenizer;
pub mod trainer;
