//! Debiasing a small autoregressive language model by minimizing the mutual
//! information between the demographic polarity of generated sentences and
//! their hidden-state semantics, estimated with a contrastive upper bound
//! and self-normalized importance sampling over a text corpus.
//!
//! The pipeline: generate a synthetic corpus with a known bias strength,
//! train a frozen reference transformer on it, then train a residual adapter
//! on top of the frozen encoder with a fairness loss plus distillation and
//! neutral language-modeling terms, and measure the fairness/fluency
//! trade-off (counterfactual KL, perplexity, F_ngram, F_max, inconsistency).

pub mod corpus;
pub mod error;
pub mod eval;
pub mod lexicon;
pub mod mi;
pub mod model;
pub mod numerics;
pub mod training;

pub use error::{Error, Result};
