//! Global green-list watermark: one key-derived partition is shared by
//! every position, trading context sensitivity for substitution robustness.

use crate::dist::{Logits, ProbDist};
use crate::error::{Error, Result};
use crate::greenlist::{green_partition, GreenList};
use crate::lm::LanguageModel;
use crate::prf::{prf, UniformStream, WatermarkKey};
use crate::vocab::{validate_tokens, TokenId};
use crate::watermark::{z_score, DetectionReport, DEFAULT_Z_THRESHOLD};

/// Fixed seed label for the global list. Part of the on-disk/key contract:
/// changing it would invalidate every existing key.
const GLOBAL_LIST_LABEL: &[u8] = b"unigram-global-green-list";

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct UnigramParams {
    pub gamma: f64,
    pub delta: f64,
    pub z_threshold: f64,
}

impl Default for UnigramParams {
    fn default() -> Self {
        Self { gamma: 0.5, delta: 2.0, z_threshold: DEFAULT_Z_THRESHOLD }
    }
}

impl UnigramParams {
    fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            return Err(Error::InvalidParameter(format!(
                "gamma must be in (0, 1), got {}",
                self.gamma
            )));
        }
        if !(self.delta >= 0.0 && self.delta.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "delta must be finite and non-negative, got {}",
                self.delta
            )));
        }
        if !self.z_threshold.is_finite() {
            return Err(Error::InvalidParameter("z threshold must be finite".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct UnigramScheme {
    key: WatermarkKey,
    params: UnigramParams,
    vocab_size: usize,
    green: GreenList,
}

impl UnigramScheme {
    pub fn new(key: WatermarkKey, params: UnigramParams, vocab_size: usize) -> Result<Self> {
        params.validate()?;
        let green = green_partition(prf(&key, GLOBAL_LIST_LABEL), vocab_size, params.gamma)?;
        Ok(Self { key, params, vocab_size, green })
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn params(&self) -> &UnigramParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// The single key-wide green list.
    pub fn green(&self) -> &GreenList {
        &self.green
    }

    pub fn embed_step(&self, base: &Logits) -> Result<ProbDist> {
        if base.len() != self.vocab_size {
            return Err(Error::InvalidParameter(format!(
                "logit width {} does not match scheme vocabulary {}",
                base.len(),
                self.vocab_size
            )));
        }
        crate::watermark::apply_green_bias(base, &self.green, self.params.delta)
    }

    pub fn generate(
        &self,
        model: &dyn LanguageModel,
        prompt: &[TokenId],
        steps: usize,
        stream: &mut UniformStream,
    ) -> Result<Vec<TokenId>> {
        if model.vocab_size() != self.vocab_size {
            return Err(Error::InvalidParameter(format!(
                "model vocabulary {} does not match scheme vocabulary {}",
                model.vocab_size(),
                self.vocab_size
            )));
        }
        validate_tokens(prompt, self.vocab_size)?;
        let mut context = prompt.to_vec();
        let mut out = Vec::with_capacity(steps);
        for _ in 0..steps {
            let base = model.next_dist(&context)?.to_logits();
            let dist = self.embed_step(&base)?;
            let t = dist.sample_at(stream.next_f64());
            context.push(t);
            out.push(t);
        }
        Ok(out)
    }

    /// Every token is scored against the global list, so l = |x|.
    pub fn detect(&self, x: &[TokenId]) -> Result<DetectionReport> {
        validate_tokens(x, self.vocab_size)?;
        if x.is_empty() {
            return Err(Error::SequenceTooShort { min: 1, got: 0 });
        }
        let green_count = x.iter().filter(|&&t| self.green.contains(t)).count();
        let z = z_score(green_count, x.len(), self.params.gamma)?;
        Ok(DetectionReport::from_z(z, self.params.z_threshold, green_count, x.len()))
    }
}

pub fn unigram_embed_step(
    base: &Logits,
    key: &WatermarkKey,
    params: UnigramParams,
) -> Result<ProbDist> {
    UnigramScheme::new(key.clone(), params, base.len())?.embed_step(base)
}

pub fn unigram_detect(
    x: &[TokenId],
    key: &WatermarkKey,
    params: UnigramParams,
    vocab_size: usize,
) -> Result<DetectionReport> {
    UnigramScheme::new(key.clone(), params, vocab_size)?.detect(x)
}

pub fn unigram_generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    key: &WatermarkKey,
    params: UnigramParams,
    steps: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    UnigramScheme::new(key.clone(), params, model.vocab_size())?
        .generate(model, prompt, steps, stream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::toy::standard_model;
    use crate::lm::SyntheticModel;
    use crate::prf::Seed;
    use rand::{RngCore, SeedableRng};
    use rand_chacha::ChaCha20Rng;

    fn key(byte: u8) -> WatermarkKey {
        WatermarkKey::from_bytes(&[byte; 32]).unwrap()
    }

    fn stream(tag: &[u8]) -> UniformStream {
        UniformStream::new(prf(&key(0xBB), tag))
    }

    #[test]
    fn default_parameters() {
        let p = UnigramParams::default();
        assert_eq!((p.gamma, p.delta, p.z_threshold), (0.5, 2.0, 4.0));
    }

    #[test]
    fn zero_delta_embedding_is_identity() {
        let model = SyntheticModel::new(Seed([4u8; 32]), 1.0, 64).unwrap();
        let scheme = UnigramScheme::new(
            key(1),
            UnigramParams { delta: 0.0, ..Default::default() },
            64,
        )
        .unwrap();
        let base = model.next_dist(&[9]).unwrap();
        let embedded = scheme.embed_step(&base.to_logits()).unwrap();
        for (a, b) in embedded.probs().iter().zip(base.probs()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn green_list_is_position_independent() {
        let scheme = UnigramScheme::new(key(2), UnigramParams::default(), 128).unwrap();
        let again = UnigramScheme::new(key(2), UnigramParams::default(), 128).unwrap();
        assert_eq!(scheme.green(), again.green());
        assert_eq!(scheme.green().green_count(), 64);
    }

    #[test]
    fn huge_delta_saturates_and_scores_all_positions() {
        let scheme = UnigramScheme::new(
            key(3),
            UnigramParams { delta: 1e6, ..Default::default() },
            1024,
        )
        .unwrap();
        let x = scheme.generate(standard_model(), &[], 100, &mut stream(b"sat")).unwrap();
        let report = scheme.detect(&x).unwrap();
        assert_eq!(report.length, 100);
        assert_eq!(report.green_count, Some(100));
        assert!((report.value - 10.0).abs() < 1e-12);
    }

    #[test]
    fn default_strength_detects_watermark() {
        let scheme = UnigramScheme::new(key(4), UnigramParams::default(), 1024).unwrap();
        let x = scheme.generate(standard_model(), &[], 200, &mut stream(b"pow")).unwrap();
        let report = scheme.detect(&x).unwrap();
        assert!(report.value > 4.0, "z = {}", report.value);
        assert!(report.verdict);
    }

    #[test]
    fn substituting_red_for_green_raises_z_exactly() {
        let scheme = UnigramScheme::new(key(5), UnigramParams::default(), 1024).unwrap();
        let mut x = crate::lm::generate(standard_model(), &[], 90, &mut stream(b"mono")).unwrap();
        let green = scheme.green();
        let red = (0..1024u32).find(|&t| !green.contains(t)).unwrap();
        x[40] = red;
        let z_red = scheme.detect(&x).unwrap().value;
        x[40] = green.ids()[0];
        let z_green = scheme.detect(&x).unwrap().value;
        let expected_gap = 1.0 / (0.25f64 * 90.0).sqrt();
        assert!((z_green - z_red - expected_gap).abs() < 1e-9);
    }

    #[test]
    fn empty_text_rejected() {
        let scheme = UnigramScheme::new(key(6), UnigramParams::default(), 64).unwrap();
        assert!(matches!(
            scheme.detect(&[]),
            Err(Error::SequenceTooShort { min: 1, got: 0 })
        ));
    }

    #[test]
    fn detection_is_pure() {
        let scheme = UnigramScheme::new(key(7), UnigramParams::default(), 1024).unwrap();
        let x = scheme.generate(standard_model(), &[], 50, &mut stream(b"pure")).unwrap();
        assert_eq!(scheme.detect(&x).unwrap(), scheme.detect(&x).unwrap());
    }

    #[test]
    fn null_z_scores_are_standard_normal() {
        // Fresh key per trial: a fixed global list would pin each trial's
        // mean to that key's interaction with the model marginals.
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut zs = Vec::with_capacity(1000);
        for i in 0..1000u32 {
            let mut raw = [0u8; 32];
            rng.fill_bytes(&mut raw);
            let scheme = UnigramScheme::new(
                WatermarkKey::from_bytes(&raw).unwrap(),
                UnigramParams::default(),
                1024,
            )
            .unwrap();
            let x = crate::lm::generate(
                standard_model(),
                &[],
                120,
                &mut stream(&i.to_le_bytes()),
            )
            .unwrap();
            zs.push(scheme.detect(&x).unwrap().value);
        }
        let n = zs.len() as f64;
        let mean = zs.iter().sum::<f64>() / n;
        let var = zs.iter().map(|z| (z - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert!(mean.abs() < 0.1, "null mean {mean}");
        assert!((0.9..=1.1).contains(&var.sqrt()), "null std {}", var.sqrt());
    }

    #[test]
    fn free_functions_match_scheme() {
        let model = SyntheticModel::new(Seed([2u8; 32]), 1.5, 128).unwrap();
        let k = key(8);
        let params = UnigramParams::default();
        let x = unigram_generate(&model, &[], &k, params, 40, &mut stream(b"free")).unwrap();
        let scheme = UnigramScheme::new(k.clone(), params, 128).unwrap();
        assert_eq!(unigram_detect(&x, &k, params, 128).unwrap(), scheme.detect(&x).unwrap());
        let base = model.next_dist(&[]).unwrap().to_logits();
        assert_eq!(
            unigram_embed_step(&base, &k, params).unwrap(),
            scheme.embed_step(&base).unwrap()
        );
    }
}
