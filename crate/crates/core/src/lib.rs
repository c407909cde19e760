//! Text classification with attention mechanisms hardened by adversarial and
//! virtual adversarial training, plus tooling to measure how well the learned
//! attention agrees with gradient-based word importance.
//!
//! The crate is organized around the path a batch of text takes:
//!
//! - [`data`]: tokenization, vocabulary construction, corpus loading, and
//!   padded integer batches with masks.
//! - [`model`]: embedding -> bidirectional GRU -> attention (additive or
//!   scaled-dot) -> weighted instance vector -> class distribution. Attention
//!   scores are a first-class attachment point for perturbations.
//! - [`adversarial`]: adversarial (AT/iAT) and virtual adversarial (VAT/iVAT)
//!   perturbation directions at the word-embedding and attention-score
//!   attachment points.
//! - [`training`]: loss assembly, the Adam training loop over labeled and
//!   unlabeled streams, and deterministic checkpointing.
//! - [`attribution`]: gradient-based word importance, Kendall tau-b agreement
//!   between attention and gradients, and HTML heatmap rendering.
//! - [`synth`]: deterministic synthetic corpora for experiments and tests.

pub mod adversarial;
pub mod attribution;
pub mod data;
pub mod error;
pub mod graph;
pub mod jsonfmt;
pub mod model;
pub mod synth;
pub mod training;

#[cfg(test)]
pub(crate) mod test_support;

pub use error::{Error, Result};
