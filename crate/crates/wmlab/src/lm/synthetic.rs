//! Controlled-entropy synthetic model: every context maps to a fresh
//! pseudorandom distribution whose sharpness is set by one knob.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::prf::{prf, prg_uniform, token_bytes, Seed, WatermarkKey};
use crate::vocab::{validate_tokens, TokenId};

pub const SYNTHETIC_FORMAT_VERSION: u32 = 1;

/// Context tokens that feed the per-context seed. A bounded window keeps
/// long generations linear-time while staying context-sensitive.
const CONTEXT_WINDOW: usize = 4;

/// Deterministic model: weights exp(u_i / concentration) with u_i uniform
/// per (seed, context window). Low concentration gives peaked
/// distributions; concentration → ∞ approaches uniform, so entropy rises
/// monotonically with it.
#[derive(Clone, Debug)]
pub struct SyntheticModel {
    seed: Seed,
    concentration: f64,
    vocab_size: usize,
    key: WatermarkKey,
}

impl SyntheticModel {
    pub fn new(seed: Seed, concentration: f64, vocab_size: usize) -> Result<Self> {
        if !(concentration > 0.0 && concentration.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "concentration must be positive and finite, got {concentration}"
            )));
        }
        if vocab_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocabulary needs at least 2 tokens, got {vocab_size}"
            )));
        }
        let key = WatermarkKey::from_bytes(seed.as_bytes())?;
        Ok(Self { seed, concentration, vocab_size, key })
    }

    pub fn concentration(&self) -> f64 {
        self.concentration
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = SyntheticFile {
            format_version: SYNTHETIC_FORMAT_VERSION,
            seed: hex::encode(self.seed.as_bytes()),
            concentration: self.concentration,
            vocab_size: self.vocab_size,
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: SyntheticFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::MalformedFile(format!("synthetic model: {e}")))?;
        if file.format_version != SYNTHETIC_FORMAT_VERSION {
            return Err(Error::MalformedFile(format!(
                "synthetic model format version {} (expected {SYNTHETIC_FORMAT_VERSION})",
                file.format_version
            )));
        }
        let raw = hex::decode(&file.seed)
            .map_err(|e| Error::MalformedFile(format!("synthetic model seed: {e}")))?;
        let raw: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::MalformedFile("synthetic model seed must be 32 bytes".into()))?;
        Self::new(Seed(raw), file.concentration, file.vocab_size)
    }
}

#[derive(Serialize, Deserialize)]
struct SyntheticFile {
    format_version: u32,
    seed: String,
    concentration: f64,
    vocab_size: usize,
}

impl LanguageModel for SyntheticModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        validate_tokens(context, self.vocab_size)?;
        let window = &context[context.len().saturating_sub(CONTEXT_WINDOW)..];
        let u = prg_uniform(prf(&self.key, &token_bytes(window)), self.vocab_size);
        let peak = u.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut w: Vec<f64> = u
            .iter()
            .map(|&x| ((x - peak) / self.concentration).exp())
            .collect();
        let total: f64 = w.iter().sum();
        for x in w.iter_mut() {
            *x /= total;
        }
        ProbDist::new(w)
    }
}
