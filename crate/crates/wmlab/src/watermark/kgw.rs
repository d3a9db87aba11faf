//! Context-seeded green-list watermark: each position's green list is
//! derived from the preceding h tokens, so the detector can replay the
//! partition from the text alone.

use crate::dist::{Logits, ProbDist};
use crate::error::{Error, Result};
use crate::greenlist::{green_partition, GreenList};
use crate::lm::LanguageModel;
use crate::prf::{prf, token_bytes, UniformStream, WatermarkKey};
use crate::vocab::{validate_tokens, TokenId, UNK_TOKEN};
use crate::watermark::{z_score, DetectionReport, DEFAULT_Z_THRESHOLD};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KgwParams {
    /// Green fraction of the vocabulary, in (0, 1).
    pub gamma: f64,
    /// Logit boost applied to green tokens, ≥ 0.
    pub delta: f64,
    /// Context width feeding the per-position seed, ≥ 1.
    pub h: usize,
    /// z-score at or above which detection reports a watermark.
    pub z_threshold: f64,
}

impl Default for KgwParams {
    fn default() -> Self {
        Self { gamma: 0.5, delta: 2.0, h: 1, z_threshold: DEFAULT_Z_THRESHOLD }
    }
}

impl KgwParams {
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
        if self.h < 1 {
            return Err(Error::InvalidParameter("context width h must be at least 1".into()));
        }
        if !self.z_threshold.is_finite() {
            return Err(Error::InvalidParameter("z threshold must be finite".into()));
        }
        Ok(())
    }
}

/// A keyed scheme instance bound to one vocabulary size. For h = 1 the
/// per-previous-token green lists can be precomputed once, which turns
/// detection into a table lookup.
#[derive(Clone, Debug)]
pub struct KgwScheme {
    key: WatermarkKey,
    params: KgwParams,
    vocab_size: usize,
    cache: Option<Vec<GreenList>>,
}

impl KgwScheme {
    pub fn new(key: WatermarkKey, params: KgwParams, vocab_size: usize) -> Result<Self> {
        params.validate()?;
        if vocab_size < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocabulary needs at least 2 tokens, got {vocab_size}"
            )));
        }
        if (params.gamma * vocab_size as f64).floor() < 1.0 {
            return Err(Error::InvalidParameter(format!(
                "gamma {} yields an empty green list for |V| = {vocab_size}",
                params.gamma
            )));
        }
        Ok(Self { key, params, vocab_size, cache: None })
    }

    /// Precomputes all |V| green lists when h = 1; a no-op for wider
    /// contexts, whose key space is too large to enumerate.
    pub fn with_cache(mut self) -> Self {
        if self.params.h == 1 && self.cache.is_none() {
            let lists = (0..self.vocab_size as TokenId)
                .map(|prev| {
                    green_partition(
                        prf(&self.key, &token_bytes(&[prev])),
                        self.vocab_size,
                        self.params.gamma,
                    )
                    .expect("parameters validated at construction")
                })
                .collect();
            self.cache = Some(lists);
        }
        self
    }

    pub fn key(&self) -> &WatermarkKey {
        &self.key
    }

    pub fn params(&self) -> &KgwParams {
        &self.params
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    /// Green list for the tokens preceding the position being scored or
    /// generated. Contexts shorter than h are left-padded with the fixed
    /// start-of-text id so the seed is always defined.
    pub fn green_for_context(&self, context: &[TokenId]) -> Result<GreenList> {
        validate_tokens(context, self.vocab_size)?;
        let h = self.params.h;
        let mut window = vec![UNK_TOKEN; h.saturating_sub(context.len())];
        window.extend_from_slice(&context[context.len().saturating_sub(h)..]);
        if let Some(cache) = &self.cache {
            return Ok(cache[window[0] as usize].clone());
        }
        green_partition(prf(&self.key, &token_bytes(&window)), self.vocab_size, self.params.gamma)
    }

    /// One decoding step: boosts the green logits by δ and renormalizes.
    pub fn embed_step(&self, base: &Logits, context: &[TokenId]) -> Result<ProbDist> {
        if base.len() != self.vocab_size {
            return Err(Error::InvalidParameter(format!(
                "logit width {} does not match scheme vocabulary {}",
                base.len(),
                self.vocab_size
            )));
        }
        let green = self.green_for_context(context)?;
        crate::watermark::apply_green_bias(base, &green, self.params.delta)
    }

    /// Samples a watermarked continuation of `steps` tokens.
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
            let dist = self.embed_step(&base, &context)?;
            let t = dist.sample_at(stream.next_f64());
            context.push(t);
            out.push(t);
        }
        Ok(out)
    }

    /// Scores positions h..|x|-1: each position's green list comes from the
    /// h tokens before it inside x, so the first h tokens only provide
    /// context and are never themselves scored.
    pub fn detect(&self, x: &[TokenId]) -> Result<DetectionReport> {
        validate_tokens(x, self.vocab_size)?;
        let h = self.params.h;
        if x.len() <= h {
            return Err(Error::SequenceTooShort { min: h + 1, got: x.len() });
        }
        let mut green_count = 0usize;
        for t in h..x.len() {
            if self.green_for_context(&x[t - h..t])?.contains(x[t]) {
                green_count += 1;
            }
        }
        let length = x.len() - h;
        let z = z_score(green_count, length, self.params.gamma)?;
        Ok(DetectionReport::from_z(z, self.params.z_threshold, green_count, length))
    }
}

/// Single-step embedding without a prebuilt scheme; the vocabulary size is
/// taken from the logit width.
pub fn kgw_embed_step(
    base: &Logits,
    context: &[TokenId],
    key: &WatermarkKey,
    params: KgwParams,
) -> Result<ProbDist> {
    KgwScheme::new(key.clone(), params, base.len())?.embed_step(base, context)
}

pub fn kgw_detect(
    x: &[TokenId],
    key: &WatermarkKey,
    params: KgwParams,
    vocab_size: usize,
) -> Result<DetectionReport> {
    KgwScheme::new(key.clone(), params, vocab_size)?.detect(x)
}

pub fn kgw_generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    key: &WatermarkKey,
    params: KgwParams,
    steps: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    KgwScheme::new(key.clone(), params, model.vocab_size())?
        .generate(model, prompt, steps, stream)
}
