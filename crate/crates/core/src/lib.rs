//! Hierarchical spatial-temporal preference optimization, desk scale.
//!
//! A toy autoregressive policy with exact log-probabilities and analytic
//! gradients is aligned against symbolic synthetic videos through five loss
//! terms: response- and video-level instance alignment, clip-level temporal
//! alignment, object-level spatial alignment, and a token-level sequential-KL
//! term. Rejected visual samples are constructed by exact, seeded
//! corruptions (reversal, blackout, frame masks, batch swaps, event
//! complements, ROI masks and moves), and everything is checkable against
//! brute-force oracles.
//!
//! Modules:
//!
//! - [`policy`]: linear-softmax policy, sequence log-probs, analytic gradients
//! - [`video`]: symbolic videos, deterministic featurization, clip/keyframe extraction
//! - [`generator`]: separable synthetic benchmark with a 10-way hallucination taxonomy
//! - [`negatives`]: rejected-sample constructors and preference-record assembly
//! - [`losses`]: the five loss terms, their gradients, and the weighted total
//! - [`data`]: record schema, validation, JSONL round-trip
//! - [`oracle`]: finite differences, Bradley-Terry, independent recomputations
//! - [`train`]: Adam, the training loop, and the adversarial evaluations
//! - [`cli`]: the `hsdpo` command-line tool

pub mod cli;
pub mod data;
pub mod error;
pub mod generator;
pub mod lexicon;
pub mod losses;
pub mod matrix;
pub mod negatives;
pub mod oracle;
pub mod policy;
pub mod rng;
pub mod train;
pub mod video;

pub use error::{Error, Result};
