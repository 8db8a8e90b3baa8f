//! DeepTagger: a self-contained token tagger for short web queries.
//!
//! The crate covers the full pipeline at desk scale:
//!
//! - [`tensor`] — dense f64 tensors with tape-based reverse-mode autodiff,
//!   a deterministic counter-based RNG, and Adam/SGD optimizers.
//! - [`model`] — a small transformer encoder with a per-token tag head and
//!   a masked-token head, plus a versioned checkpoint format.
//! - [`corpus`] — tokenization, search-title augmentation with loss masking,
//!   MLM masking, label-noise injection, JSONL/TSV I/O, and a synthetic
//!   ads-query generator.
//! - [`weak`] — weak-label generation through prompt strategies against a
//!   pluggable completion client (deterministic mock or remote HTTP).
//! - [`adversarial`] — symmetric-KL virtual loss, norm-ball projection,
//!   PGD search for hard perturbations, and the combined training objective.
//! - [`training`] — the three-stage trainer (continual pretraining, weak
//!   training with early stopping, adversarial fine-tuning) plus
//!   self-training and VAT baselines.
//! - [`eval`] — span extraction from BIO tags and micro-averaged span F1.

pub mod adversarial;
pub mod corpus;
mod error;
pub mod eval;
pub mod model;
pub mod tensor;
pub mod training;
pub mod weak;

pub use error::{Error, Result};
