//! Multi-key removal: the attacker replays each prefix across many fresh
//! sessions of the watermarked API, builds a histogram of the greedy next
//! tokens observed under the per-session keys, and samples from it. Key
//! rotation means individual green-list boosts average out, so the
//! histogram approaches the base model's preferences.

use std::collections::BTreeMap;

use crate::attack::AttackOutcome;
use crate::error::{Error, Result};
use crate::keyring::{detect_multi, embed_with_keyset, KeySet, SchemeInstance, ThresholdTable};
use crate::lm::{pseudo_perplexity, LanguageModel};
use crate::prf::UniformStream;
use crate::vocab::{validate_tokens, TokenId};
use crate::watermark::exp_embed_step;

/// Greedy next token under one keyed scheme, given the base distribution.
fn greedy_observation(
    inst: &SchemeInstance,
    base: &crate::dist::ProbDist,
    context: &[TokenId],
    stream: &mut UniformStream,
) -> Result<TokenId> {
    match inst {
        SchemeInstance::Kgw(s) => Ok(s.embed_step(&base.to_logits(), context)?.argmax()),
        SchemeInstance::Unigram(s) => Ok(s.embed_step(&base.to_logits())?.argmax()),
        SchemeInstance::Exp(e) => {
            let row = stream.next_index(e.key.n());
            exp_embed_step(base, e.key.row(row))
        }
    }
}

/// Runs the removal attack and scores it against best-over-keys
/// detection.
///
/// Per position the attacker makes `n_queries` fresh-session observations
/// (key drawn uniformly from the keyset with replacement, greedy next
/// token each) and samples the next token proportional to observation
/// frequency. `score_before` is detection on an ordinary watermarked
/// generation of the same length, produced first; its model queries are
/// counted in `queries_generation` (the attacker needs a watermarked
/// sample to know what detection normally reports). `queries_detection`
/// stays zero: this attacker never touches a detection endpoint, and the
/// two reports come from the experimenter's own detector.
///
/// `quality_proxy` is the attacked text's pseudo-perplexity under the
/// base model, scored as a standalone text.
pub fn multikey_removal(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    keyset: &KeySet,
    thresholds: &ThresholdTable,
    n_queries: usize,
    length: usize,
    stream: &mut UniformStream,
) -> Result<AttackOutcome> {
    if n_queries < 1 {
        return Err(Error::InvalidParameter("attack needs at least one query".into()));
    }
    if length < 1 {
        return Err(Error::InvalidParameter("target length must be at least 1".into()));
    }
    if model.vocab_size() != keyset.vocab_size() {
        return Err(Error::InvalidParameter(format!(
            "model vocabulary {} does not match keyset vocabulary {}",
            model.vocab_size(),
            keyset.vocab_size()
        )));
    }
    validate_tokens(prompt, model.vocab_size())?;

    let (reference, _) = embed_with_keyset(model, prompt, keyset, length, stream)?;
    let score_before = detect_multi(&reference, keyset, thresholds)?;

    let mut context = prompt.to_vec();
    let mut text = Vec::with_capacity(length);
    for _ in 0..length {
        let mut histogram: BTreeMap<TokenId, usize> = BTreeMap::new();
        for _ in 0..n_queries {
            let inst = keyset.get(stream.next_index(keyset.len()));
            let base = model.next_dist(&context)?;
            let token = greedy_observation(inst, &base, &context, stream)?;
            *histogram.entry(token).or_insert(0) += 1;
        }
        let u = stream.next_f64();
        let mut acc = 0.0;
        let mut chosen = *histogram.keys().next_back().expect("n_queries >= 1");
        for (&token, &count) in &histogram {
            acc += count as f64 / n_queries as f64;
            if u < acc {
                chosen = token;
                break;
            }
        }
        context.push(chosen);
        text.push(chosen);
    }

    let score_after = detect_multi(&text, keyset, thresholds)?;
    let quality_proxy = pseudo_perplexity(model, &text)?;
    Ok(AttackOutcome {
        text,
        score_before,
        score_after,
        queries_generation: length + n_queries * length,
        queries_detection: 0,
        quality_proxy,
    })
}
