//! Deterministic noise wrapper for detection scores: the noise is a pure
//! function of a secret key and the queried text, so an attacker repeating
//! one query sees zero variance and cannot average the noise away, while
//! distinct probe texts draw independent-looking noise.

use serde::{Deserialize, Serialize};

use crate::attack::DetectionOracle;
use crate::error::{Error, Result};
use crate::keyring::SchemeInstance;
use crate::lm::{generate, LanguageModel};
use crate::prf::{prf, token_bytes, UniformStream, WatermarkKey};
use crate::vocab::TokenId;
use crate::watermark::{DetectionReport, ScoreKind};

/// How noise couples to the detection statistic.
#[derive(Clone, Debug, PartialEq)]
pub enum DpMode {
    /// Additive noise on the z statistic, scaled by the analytic
    /// replacement-edit sensitivity (h+1)/sqrt(γ(1−γ)l).
    ZScore,
    /// Additive noise on ln p, scaled by an empirically calibrated
    /// single-edit sensitivity bound (see
    /// [`calibrate_log_p_sensitivity`]).
    LogPValue { sensitivity: f64 },
}

/// Noise configuration. `sigma` is the noise multiplier on top of the
/// per-query sensitivity; `noise_key` is a detection-service secret,
/// independent of the watermark keys and never exposed over the wire.
#[derive(Clone, Debug)]
pub struct DpParams {
    pub sigma: f64,
    pub noise_key: WatermarkKey,
    pub mode: DpMode,
    /// Sensitivity multiplier covering adversaries that edit several
    /// tokens per probe. No recommended value; default 1 (single edits).
    pub edit_multiplier: f64,
}

impl DpParams {
    pub fn new(sigma: f64, noise_key: WatermarkKey, mode: DpMode) -> Result<Self> {
        if !(sigma >= 0.0 && sigma.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "noise multiplier must be finite and ≥ 0, got {sigma}"
            )));
        }
        if let DpMode::LogPValue { sensitivity } = mode {
            if !(sensitivity > 0.0 && sensitivity.is_finite()) {
                return Err(Error::InvalidParameter(format!(
                    "calibrated log-p sensitivity must be positive and finite, got {sensitivity}"
                )));
            }
        }
        Ok(Self { sigma, noise_key, mode, edit_multiplier: 1.0 })
    }

    pub fn with_edit_multiplier(mut self, multiplier: f64) -> Result<Self> {
        if !(multiplier >= 1.0 && multiplier.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "edit multiplier must be finite and ≥ 1, got {multiplier}"
            )));
        }
        self.edit_multiplier = multiplier;
        Ok(self)
    }
}

/// Detection result with deterministic noise applied. `base` holds the
/// exact detector output; services running this defense must expose only
/// `noised_value` and `verdict`, never `base.value` or `base.green_count`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoisedReport {
    pub base: DetectionReport,
    pub noised_value: f64,
    /// Effective sensitivity in force for this query (edit multiplier
    /// included).
    pub sensitivity: f64,
    /// Verdict recomputed on the noised value; the threshold is the
    /// calibrated non-noised one, unchanged.
    pub verdict: bool,
}

/// Worst-case z shift from one replacement edit: the edited position plus
/// the h positions seeded by it can each flip green membership, moving the
/// green count by at most h+1.
pub fn sensitivity(l: usize, h: usize, gamma: f64) -> Result<f64> {
    if l < 1 {
        return Err(Error::InvalidParameter("scored length must be at least 1".into()));
    }
    if !(gamma > 0.0 && gamma < 1.0 && gamma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "green fraction must lie strictly between 0 and 1, got {gamma}"
        )));
    }
    Ok((h as f64 + 1.0) / (gamma * (1.0 - gamma) * l as f64).sqrt())
}

fn scheme_sensitivity(scheme: &SchemeInstance, scored: usize) -> Result<f64> {
    match scheme {
        SchemeInstance::Kgw(s) => sensitivity(scored, s.params().h, s.params().gamma),
        // The global list has no seeding context: one edit flips at most
        // its own membership.
        SchemeInstance::Unigram(s) => sensitivity(scored, 0, s.params().gamma),
        SchemeInstance::Exp(_) => Err(Error::SchemaMismatch(
            "analytic sensitivity applies to green-count statistics; calibrate the \
             key-sequence scheme empirically"
                .into(),
        )),
    }
}

/// Detect with deterministic Gaussian noise: seed = prf(noise_key, x),
/// noise ~ N(0, (σ·Δ)²) via Box–Muller, where Δ is the analytic z
/// sensitivity or the calibrated ln-p sensitivity. Identical queries give
/// bit-identical noised values; σ = 0 reproduces the exact detector
/// field-for-field.
pub fn dp_detect(
    x: &[TokenId],
    scheme: &SchemeInstance,
    params: &DpParams,
) -> Result<NoisedReport> {
    let base = scheme.detect(x)?;
    let delta = match (&params.mode, base.kind) {
        (DpMode::ZScore, ScoreKind::ZScore) => scheme_sensitivity(scheme, base.length)?,
        (DpMode::LogPValue { sensitivity }, ScoreKind::PValue) => *sensitivity,
        (mode, kind) => {
            return Err(Error::SchemaMismatch(format!(
                "noise mode {mode:?} does not apply to a {kind:?} detector"
            )))
        }
    };
    apply_noise(base, x, delta * params.edit_multiplier, params.sigma, &params.noise_key)
}

/// Applies the deterministic noise draw to an already computed report.
/// `delta` is the effective sensitivity in force for this query; callers
/// that aggregate over a keyset derive it from the keyset's shared
/// parameters and noise the aggregate statistic once.
pub fn apply_noise(
    base: DetectionReport,
    x: &[TokenId],
    delta: f64,
    sigma: f64,
    noise_key: &WatermarkKey,
) -> Result<NoisedReport> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "sensitivity must be positive and finite, got {delta}"
        )));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise multiplier must be finite and ≥ 0, got {sigma}"
        )));
    }
    let scale = sigma * delta;
    let noised_value = if scale == 0.0 {
        base.value
    } else {
        let noise = UniformStream::new(prf(noise_key, &token_bytes(x))).next_gaussian();
        match base.kind {
            ScoreKind::ZScore => base.value + scale * noise,
            // Noise acts on ln p; a p-value cannot exceed 1.
            ScoreKind::PValue => (base.value.ln() + scale * noise).exp().min(1.0),
        }
    };
    let verdict = match base.kind {
        ScoreKind::ZScore => noised_value >= base.threshold,
        ScoreKind::PValue => noised_value <= base.threshold,
    };
    Ok(NoisedReport { base, noised_value, sensitivity: delta, verdict })
}

/// Detection oracle view of the defended endpoint: attackers see the
/// noised value and verdict only. The green count is withheld — it would
/// reveal the exact statistic and void the defense.
pub struct NoisedOracle<'a> {
    scheme: &'a SchemeInstance,
    params: &'a DpParams,
}

impl<'a> NoisedOracle<'a> {
    pub fn new(scheme: &'a SchemeInstance, params: &'a DpParams) -> Self {
        Self { scheme, params }
    }
}

impl DetectionOracle for NoisedOracle<'_> {
    fn score(&mut self, x: &[TokenId]) -> Result<DetectionReport> {
        let r = dp_detect(x, self.scheme, self.params)?;
        Ok(DetectionReport {
            kind: r.base.kind,
            value: r.noised_value,
            threshold: r.base.threshold,
            verdict: r.verdict,
            green_count: None,
            length: r.base.length,
        })
    }
}

/// Upper single-edit sensitivity for the key-sequence scheme: the 99th
/// percentile of |Δ ln p| over uniformly random single-token replacements
/// of freshly generated texts, half watermarked and half plain. The plain
/// half matters: strongly watermarked texts sit at the rank floor
/// p = 1/(R+1) where edits cannot move the statistic, while an attacker's
/// probes hover near the threshold, so the responsive range must be
/// sampled. `texts · edits_per_text` must be at least 100 per half for
/// the percentile to mean anything.
pub fn calibrate_log_p_sensitivity(
    scheme: &SchemeInstance,
    model: &dyn LanguageModel,
    texts: usize,
    length: usize,
    edits_per_text: usize,
    stream: &mut UniformStream,
) -> Result<f64> {
    if scheme.score_kind() != ScoreKind::PValue {
        return Err(Error::SchemaMismatch(
            "log-p sensitivity calibration applies to p-value detectors".into(),
        ));
    }
    if texts * edits_per_text < 100 {
        return Err(Error::InvalidParameter(format!(
            "need at least 100 calibration edits, got {}",
            texts * edits_per_text
        )));
    }
    if length < 2 {
        return Err(Error::InvalidParameter("calibration texts need length ≥ 2".into()));
    }
    let mut deltas = Vec::with_capacity(2 * texts * edits_per_text);
    for i in 0..2 * texts {
        let x = if i % 2 == 0 {
            scheme.generate(model, &[], length, stream)?
        } else {
            generate(model, &[], length, stream)?
        };
        let ln_p = scheme.detect(&x)?.value.ln();
        for _ in 0..edits_per_text {
            let pos = stream.next_index(x.len());
            let replacement = stream.next_index(model.vocab_size()) as TokenId;
            let mut edited = x.clone();
            edited[pos] = replacement;
            let ln_p_edit = scheme.detect(&edited)?.value.ln();
            deltas.push((ln_p_edit - ln_p).abs());
        }
    }
    deltas.sort_by(|a, b| a.partial_cmp(b).expect("finite deltas"));
    // Conservative upper order statistic at the 99th percentile.
    let idx = ((deltas.len() as f64) * 0.99).ceil() as usize;
    Ok(deltas[idx.min(deltas.len() - 1).max(0)])
}

/// Defense evaluation summary: spoofing success rate against the noised
/// oracle, and watermarked-vs-unwatermarked classification accuracy under
/// the same noise.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DpEvalSummary {
    pub sigma: f64,
    pub spoof_asr: f64,
    pub accuracy: f64,
    pub trials: usize,
}

/// Runs the detection-API spoofing attack against the noised oracle and
/// measures its success rate, then measures classification accuracy on a
/// fresh balanced set (`trials` watermarked + `trials` unwatermarked
/// generations). Each spoof trial uses a fresh 2-token random prompt so
/// trials differ while the local model stays fixed. All randomness comes
/// from `stream`: evaluations with equal stream seeds share the exact
/// evaluation set, so accuracy comparisons across σ are paired.
pub fn dp_defense_eval(
    scheme: &SchemeInstance,
    gen_model: &dyn LanguageModel,
    local_model: &dyn LanguageModel,
    params: &DpParams,
    trials: usize,
    length: usize,
    top_l: usize,
    stream: &mut UniformStream,
) -> Result<DpEvalSummary> {
    if trials < 100 {
        return Err(Error::InvalidParameter(format!(
            "defense evaluation needs at least 100 trials, got {trials}"
        )));
    }
    let mut correct = 0usize;
    for _ in 0..trials {
        let wm = scheme.generate(gen_model, &[], length, stream)?;
        if dp_detect(&wm, scheme, params)?.verdict {
            correct += 1;
        }
        let plain = generate(gen_model, &[], length, stream)?;
        if !dp_detect(&plain, scheme, params)?.verdict {
            correct += 1;
        }
    }
    let accuracy = correct as f64 / (2 * trials) as f64;

    let mut spoofed = 0usize;
    for _ in 0..trials {
        let prompt: Vec<TokenId> = (0..2)
            .map(|_| stream.next_index(local_model.vocab_size()) as TokenId)
            .collect();
        let mut oracle = NoisedOracle::new(scheme, params);
        let out = crate::attack::api::api_spoof(local_model, &prompt, &mut oracle, top_l, length)?;
        if !out.score_before.verdict && out.score_after.verdict {
            spoofed += 1;
        }
    }
    Ok(DpEvalSummary {
        sigma: params.sigma,
        spoof_asr: spoofed as f64 / trials as f64,
        accuracy,
        trials,
    })
}
