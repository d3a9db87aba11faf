//! Attacks that exploit a detection API returning raw scores: removal
//! steers generation toward candidates the detector scores lowest, and
//! spoofing steers an unwatermarked local model toward candidates the
//! detector scores highest.

use crate::attack::{AttackOutcome, DetectionOracle};
use crate::error::{Error, Result};
use crate::keyring::SchemeInstance;
use crate::lm::{pseudo_perplexity, LanguageModel};
use crate::prf::UniformStream;
use crate::vocab::{validate_tokens, TokenId};
use crate::watermark::ScoreKind;

/// Scores within this distance are treated as the same detection level.
const SCORE_TIE_EPS: f64 = 1e-9;

/// Candidates with model probability below this are skipped by the
/// key-sequence removal path while the running p-value is comfortable.
const EXP_SKIP_PROB: f64 = 0.15;
const EXP_COMFORT_P: f64 = 0.1;

fn abort(stage: &str, tokens: usize, e: Error) -> Error {
    Error::AttackAborted(format!("detection oracle failed {stage} after {tokens} tokens: {e}"))
}

/// Watermarked next-token candidates: boosted distribution for green-list
/// schemes; for the distortion-free key-sequence scheme the session
/// marginal equals the base distribution, so candidates come from it.
fn watermarked_top_l(
    model: &dyn LanguageModel,
    scheme: &SchemeInstance,
    context: &[TokenId],
    l: usize,
) -> Result<Vec<(TokenId, f64)>> {
    let base = model.next_dist(context)?;
    match scheme {
        SchemeInstance::Kgw(s) => s.embed_step(&base.to_logits(), context)?.top_l(l),
        SchemeInstance::Unigram(s) => s.embed_step(&base.to_logits())?.top_l(l),
        SchemeInstance::Exp(_) => base.top_l(l),
    }
}

/// Removal against a single-key deployment with a score-returning
/// detection API.
///
/// Per position the attacker fetches the top-`top_l` watermarked
/// candidates (one generation query) and probes extensions through the
/// oracle. For z-score schemes candidate scores at one position take two
/// values — the green level and the red level — so the scan stops at the
/// first candidate strictly below the running minimum (the
/// highest-probability red token) or at the first rise (the minimum set
/// is complete, and the choice is sampled from it proportional to model
/// probability). For the p-value scheme every non-skipped candidate is
/// probed and the largest p-value wins; candidates under {EXP_SKIP_PROB}
/// probability are skipped while the running p-value exceeds
/// {EXP_COMFORT_P}.
///
/// Accounting: `queries_generation` = `length` for the reference
/// watermarked sample plus `length` candidate fetches;
/// `queries_detection` = one for the reference score, the per-position
/// probes (attempts that the detector rejects as too short included),
/// and one final self-check, which also supplies `score_after`.
/// `quality_proxy` is the attacked text's pseudo-perplexity under the
/// base model. Oracle failures abort the attack.
pub fn api_removal(
    model: &dyn LanguageModel,
    scheme: &SchemeInstance,
    prompt: &[TokenId],
    oracle: &mut dyn DetectionOracle,
    top_l: usize,
    length: usize,
    stream: &mut UniformStream,
) -> Result<AttackOutcome> {
    if top_l < 1 || top_l > 5 {
        return Err(Error::InvalidParameter(format!(
            "candidate width must be in 1..=5, got {top_l}"
        )));
    }
    if length < 1 {
        return Err(Error::InvalidParameter("target length must be at least 1".into()));
    }
    if model.vocab_size() != scheme.vocab_size() {
        return Err(Error::InvalidParameter(format!(
            "model vocabulary {} does not match scheme vocabulary {}",
            model.vocab_size(),
            scheme.vocab_size()
        )));
    }
    validate_tokens(prompt, model.vocab_size())?;

    let mut queries_detection = 0usize;
    let reference = scheme.generate(model, prompt, length, stream)?;
    queries_detection += 1;
    let score_before =
        oracle.score(&reference).map_err(|e| abort("on the reference", 0, e))?;

    let mut context = prompt.to_vec();
    let mut text: Vec<TokenId> = Vec::with_capacity(length);
    // Worst-case starting point for the key-sequence comfort rule.
    let mut running_p = 1.0;
    for _ in 0..length {
        let cands = watermarked_top_l(model, scheme, &context, top_l)?;
        let pick = match scheme.score_kind() {
            ScoreKind::ZScore => {
                let mut min_score = f64::INFINITY;
                let mut min_set: Vec<usize> = Vec::new();
                let mut short_text = false;
                let mut drop_found = None;
                for (j, &(tok, _)) in cands.iter().enumerate() {
                    context.push(tok);
                    let probe = oracle.score(&context);
                    context.pop();
                    queries_detection += 1;
                    let value = match probe {
                        Ok(r) => r.value,
                        Err(Error::SequenceTooShort { .. }) => {
                            // Detector refuses texts this short; fall
                            // back to the top candidate for now.
                            short_text = true;
                            break;
                        }
                        Err(e) => return Err(abort("probing", text.len(), e)),
                    };
                    if j == 0 || value < min_score - SCORE_TIE_EPS {
                        if j > 0 {
                            // A strictly lower level appeared: this is
                            // the highest-probability red candidate.
                            drop_found = Some(j);
                            break;
                        }
                        min_score = value;
                        min_set = vec![0];
                    } else if value > min_score + SCORE_TIE_EPS {
                        break; // level above the minimum: scan complete
                    } else {
                        min_set.push(j);
                    }
                }
                if short_text {
                    0
                } else if let Some(j) = drop_found {
                    j
                } else {
                    // Sample within the minimum set proportional to
                    // model probability.
                    let total: f64 = min_set.iter().map(|&j| cands[j].1).sum();
                    let mut u = stream.next_f64() * total;
                    let mut pick = *min_set.last().expect("at least one candidate probed");
                    for &j in &min_set {
                        u -= cands[j].1;
                        if u < 0.0 {
                            pick = j;
                            break;
                        }
                    }
                    pick
                }
            }
            ScoreKind::PValue => {
                let mut best: Option<(usize, f64)> = None;
                for (j, &(tok, prob)) in cands.iter().enumerate() {
                    if running_p > EXP_COMFORT_P && prob < EXP_SKIP_PROB {
                        continue;
                    }
                    context.push(tok);
                    let probe = oracle.score(&context);
                    context.pop();
                    queries_detection += 1;
                    let value = match probe {
                        Ok(r) => r.value,
                        Err(Error::SequenceTooShort { .. }) => break,
                        Err(e) => return Err(abort("probing", text.len(), e)),
                    };
                    if best.map_or(true, |(_, v)| value > v + SCORE_TIE_EPS) {
                        best = Some((j, value));
                    }
                }
                match best {
                    Some((j, v)) => {
                        running_p = v;
                        j
                    }
                    None => 0, // every candidate skipped or text too short
                }
            }
        };
        let token = cands[pick].0;
        context.push(token);
        text.push(token);
    }

    queries_detection += 1;
    let score_after = oracle.score(&text).map_err(|e| abort("on the result", length, e))?;
    let quality_proxy = pseudo_perplexity(model, &text)?;
    Ok(AttackOutcome {
        text,
        score_before,
        score_after,
        queries_generation: 2 * length,
        queries_detection,
        quality_proxy,
    })
}

/// Spoofing with a local unwatermarked model and a score-returning
/// detection API: per position the `top_l` local candidates are probed
/// and the one the detector likes most (highest z, or lowest p) is kept.
/// No watermark key is touched — the attacker sees only the oracle.
///
/// Accounting: `queries_generation` = `length` for the local greedy
/// reference plus `length` candidate fetches; `queries_detection` = one
/// reference score, the per-position probes, and one final self-check.
/// `quality_proxy` is the spoofed text's pseudo-perplexity under the
/// local model. A constant oracle therefore reproduces the local greedy
/// rollout: every probe ties and the highest-probability candidate wins.
pub fn api_spoof(
    local_model: &dyn LanguageModel,
    prompt: &[TokenId],
    oracle: &mut dyn DetectionOracle,
    top_l: usize,
    length: usize,
) -> Result<AttackOutcome> {
    if top_l < 1 || top_l > 5 {
        return Err(Error::InvalidParameter(format!(
            "candidate width must be in 1..=5, got {top_l}"
        )));
    }
    if length < 1 {
        return Err(Error::InvalidParameter("target length must be at least 1".into()));
    }
    validate_tokens(prompt, local_model.vocab_size())?;

    let mut queries_detection = 0usize;
    let mut reference = prompt.to_vec();
    for _ in 0..length {
        let next = local_model.next_dist(&reference)?.argmax();
        reference.push(next);
    }
    let reference: Vec<TokenId> = reference[prompt.len()..].to_vec();
    queries_detection += 1;
    let score_before =
        oracle.score(&reference).map_err(|e| abort("on the reference", 0, e))?;

    let better = |kind: ScoreKind, candidate: f64, best: f64| match kind {
        ScoreKind::ZScore => candidate > best + SCORE_TIE_EPS,
        ScoreKind::PValue => candidate < best - SCORE_TIE_EPS,
    };

    let mut context = prompt.to_vec();
    let mut text: Vec<TokenId> = Vec::with_capacity(length);
    for _ in 0..length {
        let cands = local_model.next_dist(&context)?.top_l(top_l)?;
        let mut best: Option<(usize, f64)> = None;
        for (j, &(tok, _)) in cands.iter().enumerate() {
            context.push(tok);
            let probe = oracle.score(&context);
            context.pop();
            queries_detection += 1;
            match probe {
                Ok(r) => {
                    if best.map_or(true, |(_, v)| better(r.kind, r.value, v)) {
                        best = Some((j, r.value));
                    }
                }
                Err(Error::SequenceTooShort { .. }) => break,
                Err(e) => return Err(abort("probing", text.len(), e)),
            }
        }
        let pick = best.map_or(0, |(j, _)| j);
        let token = cands[pick].0;
        context.push(token);
        text.push(token);
    }

    queries_detection += 1;
    let score_after = oracle.score(&text).map_err(|e| abort("on the result", length, e))?;
    let quality_proxy = pseudo_perplexity(local_model, &text)?;
    Ok(AttackOutcome {
        text,
        score_before,
        score_after,
        queries_generation: 2 * length,
        queries_detection,
        quality_proxy,
    })
}
