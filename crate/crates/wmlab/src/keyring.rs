//! Multi-key embedding and detection: one key is drawn per response, the
//! detector takes the best score over all keys, and per-key thresholds are
//! calibrated empirically against a null sampler at a target false-positive
//! rate (with a union-bound analytic cross-check).

use std::path::Path;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::prf::{UniformStream, WatermarkKey};
use crate::vocab::TokenId;
use crate::watermark::{
    exp_detect_full, exp_generate, DetectionReport, ExpKey, KgwParams, KgwScheme, ScoreKind,
    UnigramParams, UnigramScheme, DEFAULT_P_THRESHOLD,
};

pub const KEYRING_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Kgw,
    Unigram,
    Exp,
}

/// Key-sequence scheme instance: the key matrix plus detection settings.
#[derive(Clone, Debug)]
pub struct ExpInstance {
    pub key: ExpKey,
    pub resamples: usize,
    pub edit_penalty: f64,
    pub p_threshold: f64,
}

/// One keyed watermarker. All three schemes expose the same generate/detect
/// surface, so a keyset can hold any of them (homogeneously).
#[derive(Clone, Debug)]
pub enum SchemeInstance {
    Kgw(KgwScheme),
    Unigram(UnigramScheme),
    Exp(ExpInstance),
}

impl SchemeInstance {
    pub fn kind(&self) -> SchemeKind {
        match self {
            SchemeInstance::Kgw(_) => SchemeKind::Kgw,
            SchemeInstance::Unigram(_) => SchemeKind::Unigram,
            SchemeInstance::Exp(_) => SchemeKind::Exp,
        }
    }

    pub fn score_kind(&self) -> ScoreKind {
        match self {
            SchemeInstance::Exp(_) => ScoreKind::PValue,
            _ => ScoreKind::ZScore,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            SchemeInstance::Kgw(s) => s.vocab_size(),
            SchemeInstance::Unigram(s) => s.vocab_size(),
            SchemeInstance::Exp(e) => e.key.vocab_size(),
        }
    }

    /// Default decision threshold carried by the instance itself.
    pub fn default_threshold(&self) -> f64 {
        match self {
            SchemeInstance::Kgw(s) => s.params().z_threshold,
            SchemeInstance::Unigram(s) => s.params().z_threshold,
            SchemeInstance::Exp(e) => e.p_threshold,
        }
    }

    pub fn generate(
        &self,
        model: &dyn LanguageModel,
        prompt: &[TokenId],
        steps: usize,
        stream: &mut UniformStream,
    ) -> Result<Vec<TokenId>> {
        match self {
            SchemeInstance::Kgw(s) => s.generate(model, prompt, steps, stream),
            SchemeInstance::Unigram(s) => s.generate(model, prompt, steps, stream),
            SchemeInstance::Exp(e) => exp_generate(model, prompt, &e.key, steps, stream),
        }
    }

    pub fn detect(&self, x: &[TokenId]) -> Result<DetectionReport> {
        self.detect_with_threshold(x, self.default_threshold())
    }

    pub fn detect_with_threshold(&self, x: &[TokenId], threshold: f64) -> Result<DetectionReport> {
        match self {
            SchemeInstance::Kgw(s) => {
                let r = s.detect(x)?;
                Ok(DetectionReport::from_z(
                    r.value,
                    threshold,
                    r.green_count.expect("green-list report"),
                    r.length,
                ))
            }
            SchemeInstance::Unigram(s) => {
                let r = s.detect(x)?;
                Ok(DetectionReport::from_z(
                    r.value,
                    threshold,
                    r.green_count.expect("green-list report"),
                    r.length,
                ))
            }
            SchemeInstance::Exp(e) => {
                exp_detect_full(x, &e.key, e.resamples, e.edit_penalty, threshold)
            }
        }
    }
}

/// A homogeneous, pairwise-distinct collection of scheme instances.
#[derive(Clone, Debug)]
pub struct KeySet {
    instances: Vec<SchemeInstance>,
}

impl KeySet {
    pub fn from_instances(instances: Vec<SchemeInstance>) -> Result<Self> {
        if instances.is_empty() {
            return Err(Error::InvalidParameter("keyset needs at least one key".into()));
        }
        let kind = instances[0].kind();
        let vocab = instances[0].vocab_size();
        for inst in &instances {
            if inst.kind() != kind {
                return Err(Error::InvalidParameter(
                    "keyset instances must share one scheme".into(),
                ));
            }
            if inst.vocab_size() != vocab {
                return Err(Error::InvalidParameter(
                    "keyset instances must share one vocabulary size".into(),
                ));
            }
        }
        for i in 0..instances.len() {
            for j in i + 1..instances.len() {
                let same = match (&instances[i], &instances[j]) {
                    (SchemeInstance::Kgw(a), SchemeInstance::Kgw(b)) => {
                        a.key() == b.key() || a.params() != b.params()
                    }
                    (SchemeInstance::Unigram(a), SchemeInstance::Unigram(b)) => {
                        a.key() == b.key() || a.params() != b.params()
                    }
                    (SchemeInstance::Exp(a), SchemeInstance::Exp(b)) => {
                        a.key.fingerprint() == b.key.fingerprint()
                            || a.key.n() != b.key.n()
                            || a.resamples != b.resamples
                            || a.edit_penalty != b.edit_penalty
                    }
                    _ => unreachable!("kind homogeneity checked above"),
                };
                if same {
                    return Err(Error::InvalidParameter(
                        "keyset keys must be pairwise distinct with identical parameters".into(),
                    ));
                }
            }
        }
        Ok(Self { instances })
    }

    /// Green-list scheme set sharing one parameter block. Instances are
    /// built with the h = 1 lookup cache since keysets are detection-heavy.
    pub fn kgw(keys: Vec<WatermarkKey>, params: KgwParams, vocab_size: usize) -> Result<Self> {
        let instances = keys
            .into_iter()
            .map(|k| Ok(SchemeInstance::Kgw(KgwScheme::new(k, params, vocab_size)?.with_cache())))
            .collect::<Result<Vec<_>>>()?;
        Self::from_instances(instances)
    }

    pub fn unigram(
        keys: Vec<WatermarkKey>,
        params: UnigramParams,
        vocab_size: usize,
    ) -> Result<Self> {
        let instances = keys
            .into_iter()
            .map(|k| Ok(SchemeInstance::Unigram(UnigramScheme::new(k, params, vocab_size)?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_instances(instances)
    }

    pub fn exp(keys: Vec<ExpKey>, resamples: usize, edit_penalty: f64) -> Result<Self> {
        if resamples < 1 {
            return Err(Error::InvalidParameter("resamples must be at least 1".into()));
        }
        let instances = keys
            .into_iter()
            .map(|key| {
                SchemeInstance::Exp(ExpInstance {
                    key,
                    resamples,
                    edit_penalty,
                    p_threshold: DEFAULT_P_THRESHOLD,
                })
            })
            .collect();
        Self::from_instances(instances)
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn kind(&self) -> SchemeKind {
        self.instances[0].kind()
    }

    pub fn score_kind(&self) -> ScoreKind {
        self.instances[0].score_kind()
    }

    pub fn vocab_size(&self) -> usize {
        self.instances[0].vocab_size()
    }

    pub fn get(&self, i: usize) -> &SchemeInstance {
        &self.instances[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &SchemeInstance> {
        self.instances.iter()
    }

    /// A keyset over the first `n` keys, for nested-sweep experiments.
    pub fn prefix(&self, n: usize) -> Result<KeySet> {
        if n == 0 || n > self.len() {
            return Err(Error::InvalidParameter(format!(
                "prefix size {n} outside 1..={}",
                self.len()
            )));
        }
        Ok(KeySet { instances: self.instances[..n].to_vec() })
    }
}

/// Embeds one response under a uniformly chosen key; returns the text and
/// the index of the key used.
pub fn embed_with_keyset(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    keyset: &KeySet,
    steps: usize,
    stream: &mut UniformStream,
) -> Result<(Vec<TokenId>, usize)> {
    let choice = stream.next_index(keyset.len());
    let x = keyset.get(choice).generate(model, prompt, steps, stream)?;
    Ok((x, choice))
}

/// Per-key detection reports at a shared threshold.
pub fn detect_each(x: &[TokenId], keyset: &KeySet, threshold: f64) -> Result<Vec<DetectionReport>> {
    keyset.iter().map(|inst| inst.detect_with_threshold(x, threshold)).collect()
}

/// Best-score detection: maximum z (minimum p) over the keys, judged
/// against the calibrated per-key threshold.
pub fn detect_multi(
    x: &[TokenId],
    keyset: &KeySet,
    thresholds: &ThresholdTable,
) -> Result<DetectionReport> {
    if thresholds.kind != keyset.score_kind() {
        return Err(Error::SchemaMismatch(format!(
            "threshold table is for {:?} scores, keyset produces {:?}",
            thresholds.kind,
            keyset.score_kind()
        )));
    }
    let reports = detect_each(x, keyset, thresholds.threshold)?;
    let best = match keyset.score_kind() {
        ScoreKind::ZScore => reports
            .into_iter()
            .max_by(|a, b| a.value.total_cmp(&b.value))
            .expect("keyset is nonempty"),
        ScoreKind::PValue => reports
            .into_iter()
            .min_by(|a, b| a.value.total_cmp(&b.value))
            .expect("keyset is nonempty"),
    };
    Ok(best)
}

/// Calibrated per-key threshold shared across a keyset, with provenance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ThresholdTable {
    pub kind: ScoreKind,
    pub keys: usize,
    pub threshold: f64,
    pub target_fpr: f64,
    pub calibration_samples: usize,
    pub low_sample_warning: bool,
    /// Union-bound cross-check: Φ⁻¹(1 − fpr/n) for z-scores, fpr/n for
    /// p-values. The final threshold is never laxer than this bound.
    pub analytic_bound: f64,
}

/// Gaussian union-bound threshold for the max of n z-scores.
pub fn analytic_z_bound(n: usize, target_fpr: f64) -> f64 {
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    normal.inverse_cdf(1.0 - target_fpr / n as f64)
}

/// Smallest observed value t with #{s ≥ t} ≤ k, for ascending `sorted`;
/// falls just above the maximum when even the top value fails.
fn upper_quantile_threshold(sorted: &[f64], k: usize) -> f64 {
    let n = sorted.len();
    if k == 0 {
        return sorted[n - 1].next_up();
    }
    let mut j = n - k;
    if j == 0 {
        return sorted[0];
    }
    while j < n && sorted[j] == sorted[j - 1] {
        j += 1;
    }
    if j == n {
        sorted[n - 1].next_up()
    } else {
        sorted[j]
    }
}

/// Largest observed value t with #{s ≤ t} ≤ k; falls just below the
/// minimum when even the bottom value fails.
fn lower_quantile_threshold(sorted: &[f64], k: usize) -> f64 {
    let n = sorted.len();
    if k == 0 {
        return sorted[0].next_down();
    }
    let mut j = k.min(n) - 1;
    loop {
        if j + 1 < n && sorted[j] == sorted[j + 1] {
            if j == 0 {
                return sorted[0].next_down();
            }
            j -= 1;
        } else {
            return sorted[j];
        }
    }
}

/// Calibrates the shared per-key threshold so that the empirical FPR of
/// max-over-keys detection on sampled null texts stays at or below
/// `target_fpr`; the final threshold is the stricter of the empirical
/// quantile and the analytic union bound.
///
/// For p-value schemes the permutation floor 1/(resamples+1) caps how small
/// a threshold can be useful: target_fpr/n below the floor yields a
/// detector that never fires, which calibration reports faithfully.
pub fn calibrate_thresholds(
    keyset: &KeySet,
    null_sampler: &mut dyn FnMut() -> Result<Vec<TokenId>>,
    target_fpr: f64,
    samples: usize,
) -> Result<ThresholdTable> {
    if !(target_fpr > 0.0 && target_fpr < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "target FPR must be in (0, 1), got {target_fpr}"
        )));
    }
    if samples < 2 {
        return Err(Error::InvalidParameter("calibration needs at least 2 samples".into()));
    }
    let kind = keyset.score_kind();
    let mut scores = Vec::with_capacity(samples);
    for _ in 0..samples {
        let x = null_sampler()?;
        let reports = detect_each(&x, keyset, 0.5)?;
        let best = match kind {
            ScoreKind::ZScore => {
                reports.iter().map(|r| r.value).fold(f64::NEG_INFINITY, f64::max)
            }
            ScoreKind::PValue => reports.iter().map(|r| r.value).fold(f64::INFINITY, f64::min),
        };
        scores.push(best);
    }
    scores.sort_by(f64::total_cmp);
    let k = (samples as f64 * target_fpr).floor() as usize;
    let n = keyset.len();
    let (empirical, analytic, threshold) = match kind {
        ScoreKind::ZScore => {
            let e = upper_quantile_threshold(&scores, k);
            let a = analytic_z_bound(n, target_fpr);
            (e, a, e.max(a))
        }
        ScoreKind::PValue => {
            let e = lower_quantile_threshold(&scores, k);
            let a = target_fpr / n as f64;
            (e, a, e.min(a))
        }
    };
    let _ = empirical;
    Ok(ThresholdTable {
        kind,
        keys: n,
        threshold,
        target_fpr,
        calibration_samples: samples,
        low_sample_warning: (samples as f64) * target_fpr < 10.0,
        analytic_bound: analytic,
    })
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum RingSpec {
    Kgw {
        vocab_size: usize,
        gamma: f64,
        delta: f64,
        h: usize,
        z_threshold: f64,
        keys: Vec<String>,
    },
    Unigram {
        vocab_size: usize,
        gamma: f64,
        delta: f64,
        z_threshold: f64,
        keys: Vec<String>,
    },
    Exp {
        n: usize,
        vocab_size: usize,
        resamples: usize,
        edit_penalty: f64,
        p_threshold: f64,
        keys: Vec<String>,
    },
}

#[derive(Serialize, Deserialize)]
struct KeyRingFile {
    format_version: u32,
    #[serde(flatten)]
    spec: RingSpec,
    thresholds: Option<ThresholdTable>,
}

/// Writes the keyset (key material hex-encoded) and optional threshold
/// table as one JSON document.
pub fn save_keyset(
    path: &Path,
    keyset: &KeySet,
    thresholds: Option<&ThresholdTable>,
) -> Result<()> {
    let spec = match keyset.get(0) {
        SchemeInstance::Kgw(first) => RingSpec::Kgw {
            vocab_size: first.vocab_size(),
            gamma: first.params().gamma,
            delta: first.params().delta,
            h: first.params().h,
            z_threshold: first.params().z_threshold,
            keys: keyset
                .iter()
                .map(|inst| match inst {
                    SchemeInstance::Kgw(s) => s.key().to_hex(),
                    _ => unreachable!("keyset is homogeneous"),
                })
                .collect(),
        },
        SchemeInstance::Unigram(first) => RingSpec::Unigram {
            vocab_size: first.vocab_size(),
            gamma: first.params().gamma,
            delta: first.params().delta,
            z_threshold: first.params().z_threshold,
            keys: keyset
                .iter()
                .map(|inst| match inst {
                    SchemeInstance::Unigram(s) => s.key().to_hex(),
                    _ => unreachable!("keyset is homogeneous"),
                })
                .collect(),
        },
        SchemeInstance::Exp(first) => RingSpec::Exp {
            n: first.key.n(),
            vocab_size: first.key.vocab_size(),
            resamples: first.resamples,
            edit_penalty: first.edit_penalty,
            p_threshold: first.p_threshold,
            keys: keyset
                .iter()
                .map(|inst| match inst {
                    SchemeInstance::Exp(e) => {
                        let mut bytes =
                            Vec::with_capacity(e.key.n() * e.key.vocab_size() * 8);
                        for row in 0..e.key.n() {
                            for &v in e.key.row(row) {
                                bytes.extend_from_slice(&v.to_le_bytes());
                            }
                        }
                        hex::encode(bytes)
                    }
                    _ => unreachable!("keyset is homogeneous"),
                })
                .collect(),
        },
    };
    let file = KeyRingFile {
        format_version: KEYRING_FORMAT_VERSION,
        spec,
        thresholds: thresholds.cloned(),
    };
    std::fs::write(path, serde_json::to_vec_pretty(&file)?)?;
    Ok(())
}

pub fn load_keyset(path: &Path) -> Result<(KeySet, Option<ThresholdTable>)> {
    let file: KeyRingFile = serde_json::from_slice(&std::fs::read(path)?)
        .map_err(|e| Error::MalformedFile(format!("keyset file: {e}")))?;
    if file.format_version != KEYRING_FORMAT_VERSION {
        return Err(Error::MalformedFile(format!(
            "keyset format version {} (expected {KEYRING_FORMAT_VERSION})",
            file.format_version
        )));
    }
    let keyset = match file.spec {
        RingSpec::Kgw { vocab_size, gamma, delta, h, z_threshold, keys } => {
            let params = KgwParams { gamma, delta, h, z_threshold };
            let keys =
                keys.iter().map(|h| WatermarkKey::from_hex(h)).collect::<Result<Vec<_>>>()?;
            KeySet::kgw(keys, params, vocab_size)?
        }
        RingSpec::Unigram { vocab_size, gamma, delta, z_threshold, keys } => {
            let params = UnigramParams { gamma, delta, z_threshold };
            let keys =
                keys.iter().map(|h| WatermarkKey::from_hex(h)).collect::<Result<Vec<_>>>()?;
            KeySet::unigram(keys, params, vocab_size)?
        }
        RingSpec::Exp { n, vocab_size, resamples, edit_penalty, p_threshold, keys } => {
            let mut parsed = Vec::with_capacity(keys.len());
            for hexed in &keys {
                let bytes = hex::decode(hexed)
                    .map_err(|e| Error::MalformedFile(format!("keyset key material: {e}")))?;
                if bytes.len() != n * vocab_size * 8 {
                    return Err(Error::MalformedFile(
                        "key matrix size does not match declared dimensions".into(),
                    ));
                }
                let mut rows = Vec::with_capacity(n);
                for r in 0..n {
                    let mut row = Vec::with_capacity(vocab_size);
                    for c in 0..vocab_size {
                        let off = (r * vocab_size + c) * 8;
                        row.push(f64::from_le_bytes(bytes[off..off + 8].try_into().unwrap()));
                    }
                    rows.push(row);
                }
                parsed.push(ExpKey::from_entries(rows)?);
            }
            let mut set = KeySet::exp(parsed, resamples, edit_penalty)?;
            for inst in set.instances.iter_mut() {
                if let SchemeInstance::Exp(e) = inst {
                    e.p_threshold = p_threshold;
                }
            }
            set
        }
    };
    Ok((keyset, file.thresholds))
}
