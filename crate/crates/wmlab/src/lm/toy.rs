//! Shared desk-scale experiment models: a high-entropy trained model for
//! generation/detection studies and a held-out twin for quality scoring.

use std::sync::OnceLock;

use crate::lm::markov::{train_markov, MarkovModel};
use crate::lm::synthetic::SyntheticModel;
use crate::lm::generate;
use crate::prf::{prf, Seed, UniformStream, WatermarkKey};

pub const TOY_VOCAB_SIZE: usize = 1024;
pub const TOY_ORDER: usize = 2;
pub const TOY_ALPHA: f64 = 0.1;
const TOY_CORPUS_LEN: usize = 60_000;

/// High concentration keeps next-token marginals near uniform, which the
/// detector calibration analysis assumes (score variance stays nominal only
/// when no token dominates the marginal law).
const TOY_CONCENTRATION: f64 = 40.0;

fn build(source_seed: [u8; 32], sample_tag: &[u8]) -> MarkovModel {
    let source = SyntheticModel::new(Seed(source_seed), TOY_CONCENTRATION, TOY_VOCAB_SIZE)
        .expect("fixed parameters are valid");
    let key = WatermarkKey::from_bytes(&source_seed).expect("32-byte key");
    let mut stream = UniformStream::new(prf(&key, sample_tag));
    let corpus =
        generate(&source, &[], TOY_CORPUS_LEN, &mut stream).expect("generation cannot fail");
    train_markov(&corpus, TOY_VOCAB_SIZE, TOY_ORDER, TOY_ALPHA).expect("corpus exceeds order")
}

/// Builds a fresh copy of the standard experiment model.
pub fn build_standard_model() -> MarkovModel {
    build([17u8; 32], b"standard-corpus")
}

/// Builds a fresh copy of the held-out quality model: same synthetic source
/// family, disjoint sampling stream, so likelihoods are comparable but not
/// circular.
pub fn build_quality_model() -> MarkovModel {
    build([29u8; 32], b"quality-corpus")
}

/// Process-wide cached standard model (training costs a fraction of a
/// second; tests share one copy).
pub fn standard_model() -> &'static MarkovModel {
    static MODEL: OnceLock<MarkovModel> = OnceLock::new();
    MODEL.get_or_init(build_standard_model)
}

/// Process-wide cached quality model.
pub fn quality_model() -> &'static MarkovModel {
    static MODEL: OnceLock<MarkovModel> = OnceLock::new();
    MODEL.get_or_init(build_quality_model)
}
