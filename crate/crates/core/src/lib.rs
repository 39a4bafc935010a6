//! Two-stage claim checking.
//!
//! Stage A retrieves candidate explanations for a claim from a cached
//! embedding index by cosine similarity. Stage B scores each surviving
//! (claim, explanation) pair with an alignment classifier and the claim's
//! truth probability is the mean of those scores.
//!
//! The crate also carries the classical baselines (TF / TF-IDF features and
//! averaged word vectors feeding small dense networks trained with Adam), the
//! ranking and accuracy metrics, and a latency harness.
//!
//! With the default `parallel` feature, batch paths (index scans, batch
//! encoding, batch checking, per-example backprop) fan out over rayon. The
//! sequential fallback produces bit-identical results.

pub mod corpus;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod featurizer;
pub mod index;
pub mod nn;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
