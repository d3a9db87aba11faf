//! Watermark embedding and detection for three decoding-time schemes:
//! context-seeded green lists ([`kgw`]), one global green list ([`unigram`]),
//! and key-sequence Gumbel sampling ([`exp`]).

pub mod exp;
pub mod kgw;
pub mod unigram;

pub use exp::{
    exp_detect, exp_detect_full, exp_embed_step, exp_generate, exp_generate_with_shift,
    exp_statistic, ExpKey, DEFAULT_EXP_KEY_LEN, DEFAULT_RESAMPLES,
};
pub use kgw::{kgw_detect, kgw_embed_step, kgw_generate, KgwParams, KgwScheme};
pub use unigram::{
    unigram_detect, unigram_embed_step, unigram_generate, UnigramParams, UnigramScheme,
};

use serde::{Deserialize, Serialize};

use crate::dist::{Logits, ProbDist};
use crate::error::{Error, Result};
use crate::greenlist::GreenList;

/// Default decision threshold for z-score detectors.
pub const DEFAULT_Z_THRESHOLD: f64 = 4.0;
/// Default decision threshold for p-value detectors.
pub const DEFAULT_P_THRESHOLD: f64 = 0.05;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    ZScore,
    PValue,
}

/// Outcome of one detection call. `length` is the number of scored
/// positions; for green-list schemes `green_count` is the raw hit count
/// behind the z-score.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionReport {
    pub kind: ScoreKind,
    pub value: f64,
    pub threshold: f64,
    pub verdict: bool,
    pub green_count: Option<usize>,
    pub length: usize,
}

impl DetectionReport {
    /// A z-score report; the verdict fires at or above the threshold.
    pub fn from_z(z: f64, threshold: f64, green_count: usize, length: usize) -> Self {
        Self {
            kind: ScoreKind::ZScore,
            value: z,
            threshold,
            verdict: z >= threshold,
            green_count: Some(green_count),
            length,
        }
    }

    /// A p-value report; the verdict fires at or below the threshold.
    pub fn from_p(p: f64, threshold: f64, length: usize) -> Self {
        Self {
            kind: ScoreKind::PValue,
            value: p,
            threshold,
            verdict: p <= threshold,
            green_count: None,
            length,
        }
    }
}

/// Normal approximation of the green-count test: z = (g − γl) / √(γ(1−γ)l).
pub fn z_score(green_count: usize, length: usize, gamma: f64) -> Result<f64> {
    if length == 0 {
        return Err(Error::InvalidParameter("z-score needs at least one scored position".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let l = length as f64;
    Ok((green_count as f64 - gamma * l) / (gamma * (1.0 - gamma) * l).sqrt())
}

/// Adds `delta` to the logits of green tokens and renormalizes:
/// softmax(logits + δ·mask). Shared by both green-list schemes.
pub fn apply_green_bias(base: &Logits, green: &GreenList, delta: f64) -> Result<ProbDist> {
    if base.len() != green.vocab_size() {
        return Err(Error::InvalidParameter(format!(
            "logit width {} does not match green-list vocabulary {}",
            base.len(),
            green.vocab_size()
        )));
    }
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "watermark strength must be finite and non-negative, got {delta}"
        )));
    }
    let mut biased = base.clone();
    for (i, v) in biased.values_mut().iter_mut().enumerate() {
        if green.contains(i as u32) {
            *v += delta;
        }
    }
    ProbDist::from_logits(&biased)
}
