//! Token-probability sources: the pluggable model interface plus a trainable
//! Markov model and a controlled-entropy synthetic model.

pub mod markov;
pub mod synthetic;
pub mod toy;

pub use markov::{train_markov, MarkovModel};
pub use synthetic::SyntheticModel;

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::prf::UniformStream;
use crate::vocab::{validate_tokens, TokenId};

/// A next-token distribution source. Implementations must be deterministic:
/// the same context always yields the same distribution.
pub trait LanguageModel {
    fn vocab_size(&self) -> usize;

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist>;

    /// Draws one token by multinomial sampling, consuming exactly one
    /// uniform from the stream. Implementations may override with an
    /// equivalent sparse path as long as the sampled law is unchanged.
    fn sample_next(&self, context: &[TokenId], stream: &mut UniformStream) -> Result<TokenId> {
        let dist = self.next_dist(context)?;
        Ok(dist.sample_at(stream.next_f64()))
    }
}

impl<M: LanguageModel + ?Sized> LanguageModel for &M {
    fn vocab_size(&self) -> usize {
        (**self).vocab_size()
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        (**self).next_dist(context)
    }

    fn sample_next(&self, context: &[TokenId], stream: &mut UniformStream) -> Result<TokenId> {
        (**self).sample_next(context, stream)
    }
}

/// The top-L slice of a next-token distribution: exactly L entries,
/// descending by probability, ties broken toward the lower token id.
#[derive(Clone, Debug, PartialEq)]
pub struct TopL {
    pub entries: Vec<(TokenId, f64)>,
}

impl TopL {
    pub fn tokens(&self) -> Vec<TokenId> {
        self.entries.iter().map(|&(t, _)| t).collect()
    }
}

pub fn top_l(model: &dyn LanguageModel, context: &[TokenId], l: usize) -> Result<TopL> {
    if l < 1 || l > model.vocab_size() {
        return Err(Error::InvalidParameter(format!(
            "top-L size {l} outside 1..={}",
            model.vocab_size()
        )));
    }
    let dist = model.next_dist(context)?;
    Ok(TopL { entries: dist.top_l(l)? })
}

/// Samples `steps` tokens autoregressively, appending to a copy of the
/// prompt for context. Returns only the generated continuation.
pub fn generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    steps: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    validate_tokens(prompt, model.vocab_size())?;
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(steps);
    for _ in 0..steps {
        let t = model.sample_next(&context, stream)?;
        context.push(t);
        out.push(t);
    }
    Ok(out)
}

/// Quality proxy: exp of the mean negative log-likelihood of `x` under the
/// model, each position conditioned on the true prefix. A zero-probability
/// token drives the result to +inf.
pub fn pseudo_perplexity(model: &dyn LanguageModel, x: &[TokenId]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::SequenceTooShort { min: 1, got: 0 });
    }
    validate_tokens(x, model.vocab_size())?;
    let mut nll = 0.0;
    for i in 0..x.len() {
        let dist = model.next_dist(&x[..i])?;
        nll -= dist.probs()[x[i] as usize].ln();
    }
    Ok((nll / x.len() as f64).exp())
}
