//! Green-list stealing baseline: compare each token's observed frequency
//! in watermarked output against its expected frequency under the base
//! model, and classify the top-scoring ⌊γ|V|⌋ tokens as green.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::greenlist::GreenList;
use crate::lm::LanguageModel;
use crate::vocab::{validate_tokens, TokenId};

/// Scored positions below `10 · |V|` flag the estimate as low-confidence.
const CONFIDENCE_POSITIONS_PER_TOKEN: usize = 10;

/// Laplace-style smoothing applied to both counts in the frequency ratio.
const RATIO_SMOOTHING: f64 = 0.5;

#[derive(Clone, Debug)]
pub struct StealEstimate {
    pub estimated: GreenList,
    /// Number of scored positions the estimate is based on.
    pub positions: usize,
    pub low_confidence: bool,
}

/// Fraction of the estimated green list that is genuinely green.
pub fn greenlist_precision(estimated: &GreenList, truth: &GreenList) -> f64 {
    estimated.overlap(truth) as f64 / estimated.green_count() as f64
}

fn estimate(
    samples: &[Vec<TokenId>],
    base: &dyn LanguageModel,
    gamma: f64,
    context_filter: Option<TokenId>,
) -> Result<StealEstimate> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let vocab_size = base.vocab_size();
    for x in samples {
        validate_tokens(x, vocab_size)?;
    }

    // Observed counts, and per-context position counts so the expected
    // frequency needs one base-model query per distinct context.
    let mut observed = vec![0u64; vocab_size];
    let mut contexts: BTreeMap<Option<TokenId>, u64> = BTreeMap::new();
    let mut positions = 0usize;
    for x in samples {
        for (i, &token) in x.iter().enumerate() {
            let ctx = if i == 0 { None } else { Some(x[i - 1]) };
            if let Some(wanted) = context_filter {
                if ctx != Some(wanted) {
                    continue;
                }
            }
            observed[token as usize] += 1;
            *contexts.entry(ctx).or_insert(0) += 1;
            positions += 1;
        }
    }
    if positions == 0 {
        return Err(Error::InvalidParameter(
            "no scored positions; supply watermarked samples first".into(),
        ));
    }

    let mut expected = vec![0.0f64; vocab_size];
    for (&ctx, &count) in &contexts {
        let dist = match ctx {
            None => base.next_dist(&[])?,
            Some(t) => base.next_dist(&[t])?,
        };
        for (v, &p) in dist.probs().iter().enumerate() {
            expected[v] += count as f64 * p;
        }
    }

    let mut scored: Vec<(f64, TokenId)> = (0..vocab_size)
        .map(|v| {
            let ratio = (observed[v] as f64 + RATIO_SMOOTHING) / (expected[v] + RATIO_SMOOTHING);
            (ratio, v as TokenId)
        })
        .collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let green_count = (gamma * vocab_size as f64).floor() as usize;
    let ids: Vec<TokenId> = scored[..green_count].iter().map(|&(_, v)| v).collect();
    let estimated = GreenList::from_ids(&ids, vocab_size, gamma)?;
    Ok(StealEstimate {
        estimated,
        positions,
        low_confidence: positions < CONFIDENCE_POSITIONS_PER_TOKEN * vocab_size,
    })
}

/// Estimates a global green list from watermarked samples, for schemes
/// whose list does not depend on context. Expected frequencies condition
/// on the previous token, so the base model only needs one query per
/// distinct observed context.
pub fn steal_greenlist(
    samples: &[Vec<TokenId>],
    base: &dyn LanguageModel,
    gamma: f64,
) -> Result<StealEstimate> {
    estimate(samples, base, gamma, None)
}

/// Per-context variant for schemes that reseed from the previous token:
/// only positions whose previous token equals `context` are scored, and
/// the estimate targets that context's green list.
pub fn steal_greenlist_for_context(
    samples: &[Vec<TokenId>],
    base: &dyn LanguageModel,
    gamma: f64,
    context: TokenId,
) -> Result<StealEstimate> {
    validate_tokens(&[context], base.vocab_size())?;
    estimate(samples, base, gamma, Some(context))
}
