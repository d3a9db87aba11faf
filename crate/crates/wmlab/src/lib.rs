//! Desk-scale laboratory for decoding-based text watermarks.
//!
//! The crate implements three watermarking schemes (context-seeded green-list
//! biasing, a global green-list variant, and Gumbel-trick key-sequence
//! sampling), the removal/spoofing attacks that target them, a noise-based
//! detection defense, and closed-form plus Monte-Carlo verifiers for the
//! robustness bounds those attacks rely on. Everything runs against small
//! pluggable token models so end-to-end experiments finish in seconds.
//!
//! Layering, bottom up:
//! - [`prf`], [`vocab`], [`dist`], [`greenlist`]: keyed randomness, token
//!   vocabularies, probability vectors, and seeded vocabulary partitions.
//! - [`lm`]: trainable Markov and seeded synthetic token models.
//! - [`watermark`]: per-scheme embedding and detection.
//! - [`keyring`]: multi-key embedding, max-score detection, threshold
//!   calibration at a target false-positive rate.
//! - [`attack`]: insertion/edit spoofing, multi-key removal, detection-API
//!   removal and spoofing, green-list stealing.
//! - [`dp`]: deterministic-noise detection wrapper.
//! - [`bounds`]: closed-form bound evaluators and their simulators.
//! - [`report`]: trial records, CSV/JSON emission, summaries.

pub mod attack;
pub mod bounds;
pub mod dist;
pub mod dp;
pub mod error;
pub mod greenlist;
pub mod keyring;
pub mod lm;
pub mod prf;
pub mod report;
pub mod vocab;
pub mod watermark;

pub use error::{Error, Result};
