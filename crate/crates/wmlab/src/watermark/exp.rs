//! Key-sequence Gumbel watermark: generation is a deterministic argmax of
//! ξ^(1/p) against a cyclic key matrix, detection aligns text to the key by
//! an edit-distance dynamic program and calibrates the cost against fresh
//! random keys for an exact permutation p-value.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::prf::{prf, token_bytes, UniformStream, WatermarkKey};
use crate::vocab::{validate_tokens, TokenId};
use crate::watermark::{DetectionReport, DEFAULT_P_THRESHOLD};

/// Default number of key rows n.
pub const DEFAULT_EXP_KEY_LEN: usize = 256;
/// Default reference keys drawn for the permutation p-value.
pub const DEFAULT_RESAMPLES: usize = 99;
/// Default insertion/deletion penalty in the alignment dynamic program.
pub const DEFAULT_EDIT_PENALTY: f64 = 1.0;

/// ξ entries are kept this far inside (0, 1) so every logarithm is finite.
const XI_CLAMP: f64 = 1e-12;

pub const EXP_KEY_FORMAT_VERSION: u32 = 1;
const EXP_KEY_MAGIC: &[u8; 4] = b"XKEY";

/// Secret key for the scheme: an n × |V| matrix of uniform draws. The
/// fingerprint (hash of the exact matrix bytes) seeds reference-key
/// resampling so detection stays a pure function of key and text.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpKey {
    n: usize,
    vocab_size: usize,
    xi: Vec<f64>,
    fingerprint: [u8; 32],
}

impl ExpKey {
    /// Builds a key from explicit rows. Entries must lie in [0, 1]; they are
    /// nudged into the open interval so logarithms stay finite.
    pub fn from_entries(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InvalidKey("key needs at least one row".into()));
        }
        let vocab_size = rows[0].len();
        if vocab_size < 2 {
            return Err(Error::InvalidKey(format!(
                "key rows need at least 2 entries, got {vocab_size}"
            )));
        }
        let mut xi = Vec::with_capacity(n * vocab_size);
        for row in &rows {
            if row.len() != vocab_size {
                return Err(Error::InvalidKey("ragged key rows".into()));
            }
            for &v in row {
                if !(0.0..=1.0).contains(&v) {
                    return Err(Error::InvalidKey(format!("key entry {v} outside [0, 1]")));
                }
                xi.push(v.clamp(XI_CLAMP, 1.0 - XI_CLAMP));
            }
        }
        Ok(Self::from_clamped(n, vocab_size, xi))
    }

    /// Draws a fresh uniform key from the stream, consuming n·|V| variates.
    pub fn draw(stream: &mut UniformStream, n: usize, vocab_size: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::InvalidKey("key needs at least one row".into()));
        }
        if vocab_size < 2 {
            return Err(Error::InvalidKey(format!(
                "key rows need at least 2 entries, got {vocab_size}"
            )));
        }
        let xi: Vec<f64> = (0..n * vocab_size)
            .map(|_| stream.next_f64().clamp(XI_CLAMP, 1.0 - XI_CLAMP))
            .collect();
        Ok(Self::from_clamped(n, vocab_size, xi))
    }

    fn from_clamped(n: usize, vocab_size: usize, xi: Vec<f64>) -> Self {
        let mut hasher = Sha256::new();
        for &v in &xi {
            hasher.update(v.to_le_bytes());
        }
        let fingerprint: [u8; 32] = hasher.finalize().into();
        Self { n, vocab_size, xi, fingerprint }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn row(&self, k: usize) -> &[f64] {
        &self.xi[k * self.vocab_size..(k + 1) * self.vocab_size]
    }

    fn xi_at(&self, row: usize, token: TokenId) -> f64 {
        self.xi[row * self.vocab_size + token as usize]
    }

    pub fn fingerprint(&self) -> &[u8; 32] {
        &self.fingerprint
    }

    /// Binary format: magic, format version, n, |V| (u32 LE each), then the
    /// matrix row-major as f64 LE.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::with_capacity(16 + self.xi.len() * 8);
        buf.extend_from_slice(EXP_KEY_MAGIC);
        buf.extend_from_slice(&EXP_KEY_FORMAT_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.n as u32).to_le_bytes());
        buf.extend_from_slice(&(self.vocab_size as u32).to_le_bytes());
        for &v in &self.xi {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        std::fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = std::fs::read(path)?;
        if buf.len() < 16 || &buf[..4] != EXP_KEY_MAGIC {
            return Err(Error::MalformedFile("not a key matrix file".into()));
        }
        let version = u32::from_le_bytes(buf[4..8].try_into().unwrap());
        if version != EXP_KEY_FORMAT_VERSION {
            return Err(Error::MalformedFile(format!(
                "key matrix format version {version} (expected {EXP_KEY_FORMAT_VERSION})"
            )));
        }
        let n = u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
        let vocab_size = u32::from_le_bytes(buf[12..16].try_into().unwrap()) as usize;
        if n == 0 || vocab_size < 2 {
            return Err(Error::MalformedFile("key matrix dimensions invalid".into()));
        }
        let expected = 16 + n * vocab_size * 8;
        if buf.len() != expected {
            return Err(Error::MalformedFile(format!(
                "key matrix payload is {} bytes, expected {expected}",
                buf.len()
            )));
        }
        let mut xi = Vec::with_capacity(n * vocab_size);
        for chunk in buf[16..].chunks_exact(8) {
            let v = f64::from_le_bytes(chunk.try_into().unwrap());
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::MalformedFile(format!("key entry {v} outside [0, 1]")));
            }
            xi.push(v.clamp(XI_CLAMP, 1.0 - XI_CLAMP));
        }
        Ok(Self::from_clamped(n, vocab_size, xi))
    }
}

/// One decoding step: x = argmax_i ξ_i^(1/p_i), computed as ln(ξ_i)/p_i for
/// stability. Zero-probability tokens score −inf and are never chosen; ties
/// resolve to the lowest token id.
pub fn exp_embed_step(p: &ProbDist, xi_k: &[f64]) -> Result<TokenId> {
    if xi_k.len() != p.len() {
        return Err(Error::InvalidParameter(format!(
            "key row width {} does not match distribution width {}",
            xi_k.len(),
            p.len()
        )));
    }
    let mut best = f64::NEG_INFINITY;
    let mut arg = 0u32;
    for (i, (&prob, &xi)) in p.probs().iter().zip(xi_k).enumerate() {
        let score = if prob > 0.0 {
            xi.clamp(XI_CLAMP, 1.0 - XI_CLAMP).ln() / prob
        } else {
            f64::NEG_INFINITY
        };
        if score > best {
            best = score;
            arg = i as u32;
        }
    }
    Ok(arg)
}

/// Deterministic watermarked generation from a fixed key-row offset.
pub fn exp_generate_with_shift(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    key: &ExpKey,
    length: usize,
    shift: usize,
) -> Result<Vec<TokenId>> {
    if length < 1 {
        return Err(Error::InvalidParameter("generation length must be at least 1".into()));
    }
    if shift >= key.n {
        return Err(Error::InvalidParameter(format!(
            "shift {shift} outside key length {}",
            key.n
        )));
    }
    if model.vocab_size() != key.vocab_size {
        return Err(Error::InvalidParameter(format!(
            "model vocabulary {} does not match key width {}",
            model.vocab_size(),
            key.vocab_size
        )));
    }
    validate_tokens(prompt, key.vocab_size)?;
    let mut context = prompt.to_vec();
    let mut out = Vec::with_capacity(length);
    for t in 0..length {
        let k = (shift + t) % key.n;
        let dist = model.next_dist(&context)?;
        let tok = exp_embed_step(&dist, key.row(k))?;
        context.push(tok);
        out.push(tok);
    }
    Ok(out)
}

/// Watermarked generation with the per-response random shift drawn from the
/// stream (one variate).
pub fn exp_generate(
    model: &dyn LanguageModel,
    prompt: &[TokenId],
    key: &ExpKey,
    length: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    let shift = stream.next_index(key.n);
    exp_generate_with_shift(model, prompt, key, length, shift)
}

/// Basic test statistic φ = Σ_t −ln(1 − ξ_{(shift+t) mod n, x_t}). Under a
/// key independent of x each term is Exponential(1), so E[φ] = |x|.
pub fn exp_statistic(x: &[TokenId], key: &ExpKey, shift: usize) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::SequenceTooShort { min: 1, got: 0 });
    }
    if shift >= key.n {
        return Err(Error::InvalidParameter(format!(
            "shift {shift} outside key length {}",
            key.n
        )));
    }
    validate_tokens(x, key.vocab_size)?;
    Ok(x.iter()
        .enumerate()
        .map(|(t, &tok)| -(1.0 - key.xi_at((shift + t) % key.n, tok)).ln())
        .sum())
}

/// Minimum alignment cost of x against the key over all shifts. Matching
/// position i to key row k costs ln(1 − ξ_{k,x_i}) (strongly negative when
/// the position was generated under that row); skipping either side costs
/// the edit penalty. Lower cost = more watermark evidence.
fn min_alignment_cost(x: &[TokenId], key: &ExpKey, edit_penalty: f64) -> f64 {
    let m = x.len();
    let n = key.n;
    let mut match_cost = vec![0.0f64; n * m];
    for row in 0..n {
        for (i, &tok) in x.iter().enumerate() {
            match_cost[row * m + i] = (1.0 - key.xi_at(row, tok)).ln();
        }
    }
    let mut best = f64::INFINITY;
    let mut prev = vec![0.0f64; m + 1];
    let mut cur = vec![0.0f64; m + 1];
    for s in 0..n {
        for (j, v) in prev.iter_mut().enumerate() {
            *v = j as f64 * edit_penalty;
        }
        for i in 1..=m {
            cur[0] = i as f64 * edit_penalty;
            for j in 1..=m {
                let row = (s + j - 1) % n;
                let diag = prev[j - 1] + match_cost[row * m + (i - 1)];
                let skip_token = prev[j] + edit_penalty;
                let skip_key = cur[j - 1] + edit_penalty;
                cur[j] = diag.min(skip_token).min(skip_key);
            }
            std::mem::swap(&mut prev, &mut cur);
        }
        if prev[m] < best {
            best = prev[m];
        }
    }
    best
}

/// Permutation-calibrated detection. The observed alignment cost is ranked
/// against `resamples` fresh uniform keys; references are seeded from the
/// key fingerprint and the text, so the report is a pure function of both.
pub fn exp_detect_full(
    x: &[TokenId],
    key: &ExpKey,
    resamples: usize,
    edit_penalty: f64,
    threshold: f64,
) -> Result<DetectionReport> {
    if x.is_empty() {
        return Err(Error::SequenceTooShort { min: 1, got: 0 });
    }
    if resamples < 1 {
        return Err(Error::InvalidParameter("resamples must be at least 1".into()));
    }
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(Error::InvalidParameter(format!(
            "p-value threshold must be in (0, 1], got {threshold}"
        )));
    }
    if !(edit_penalty >= 0.0 && edit_penalty.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "edit penalty must be finite and non-negative, got {edit_penalty}"
        )));
    }
    validate_tokens(x, key.vocab_size)?;

    let observed = min_alignment_cost(x, key, edit_penalty);
    let ref_key = WatermarkKey::from_bytes(&key.fingerprint)?;
    let mut stream = UniformStream::new(prf(&ref_key, &token_bytes(x)));
    let mut at_least_as_extreme = 0usize;
    for _ in 0..resamples {
        let reference = ExpKey::draw(&mut stream, key.n, key.vocab_size)?;
        if min_alignment_cost(x, &reference, edit_penalty) <= observed {
            at_least_as_extreme += 1;
        }
    }
    let p = (1 + at_least_as_extreme) as f64 / (resamples + 1) as f64;
    Ok(DetectionReport::from_p(p, threshold, x.len()))
}

pub fn exp_detect(x: &[TokenId], key: &ExpKey, resamples: usize) -> Result<DetectionReport> {
    exp_detect_full(x, key, resamples, DEFAULT_EDIT_PENALTY, DEFAULT_P_THRESHOLD)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::SyntheticModel;
    use crate::prf::Seed;

    fn stream(tag: &[u8]) -> UniformStream {
        let key = WatermarkKey::from_bytes(&[0xCCu8; 16]).unwrap();
        UniformStream::new(prf(&key, tag))
    }

    fn uniform_key(tag: &[u8], n: usize, v: usize) -> ExpKey {
        ExpKey::draw(&mut stream(tag), n, v).unwrap()
    }

    #[test]
    fn one_hot_distribution_always_wins() {
        let mut p = vec![0.0; 6];
        p[4] = 1.0;
        let p = ProbDist::new(p).unwrap();
        let xi = [0.99, 0.99, 0.99, 0.99, 0.01, 0.99];
        assert_eq!(exp_embed_step(&p, &xi).unwrap(), 4);
    }

    #[test]
    fn small_case_matches_exponentiation_oracle() {
        // scores: 0.9^5 = 0.590, 0.5^(10/3) = 0.099, 0.6^2 = 0.360
        let p = ProbDist::new(vec![0.2, 0.3, 0.5]).unwrap();
        let xi = [0.9, 0.5, 0.6];
        assert_eq!(exp_embed_step(&p, &xi).unwrap(), 0);
        assert!((0.9f64.powf(5.0) - 0.590).abs() < 1e-3);
        assert!((0.5f64.powf(10.0 / 3.0) - 0.099).abs() < 1e-3);
    }

    #[test]
    fn ties_resolve_to_lowest_id() {
        let p = ProbDist::new(vec![0.5, 0.5]).unwrap();
        let xi = [0.7, 0.7];
        assert_eq!(exp_embed_step(&p, &xi).unwrap(), 0);
    }

    #[test]
    fn single_step_is_distortion_free() {
        // Under uniform ξ the argmax of ξ^(1/p) selects token i with
        // probability exactly p_i (Gumbel trick).
        let p = ProbDist::new(vec![0.05, 0.1, 0.15, 0.2, 0.25, 0.1, 0.05, 0.1]).unwrap();
        let mut s = stream(b"df");
        let draws = 100_000;
        let mut counts = [0usize; 8];
        let mut xi = vec![0.0f64; 8];
        for _ in 0..draws {
            for v in xi.iter_mut() {
                *v = s.next_f64();
            }
            counts[exp_embed_step(&p, &xi).unwrap() as usize] += 1;
        }
        for (i, &c) in counts.iter().enumerate() {
            let f = c as f64 / draws as f64;
            assert!((f - p.probs()[i]).abs() < 0.01, "token {i}: {f} vs {}", p.probs()[i]);
        }
    }

    #[test]
    fn single_row_key_repeats_row_zero() {
        let key = uniform_key(b"n1", 1, 32);
        let model = SyntheticModel::new(Seed([6u8; 32]), 1.0, 32).unwrap();
        let x = exp_generate_with_shift(&model, &[], &key, 8, 0).unwrap();
        let mut ctx = Vec::new();
        for &tok in &x {
            let dist = model.next_dist(&ctx).unwrap();
            assert_eq!(exp_embed_step(&dist, key.row(0)).unwrap(), tok);
            ctx.push(tok);
        }
    }

    #[test]
    fn fixed_shift_generation_is_deterministic() {
        let key = uniform_key(b"det", 16, 64);
        let model = SyntheticModel::new(Seed([7u8; 32]), 1.5, 64).unwrap();
        let a = exp_generate_with_shift(&model, &[3], &key, 40, 5).unwrap();
        let b = exp_generate_with_shift(&model, &[3], &key, 40, 5).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn first_token_marginal_is_distortion_free() {
        // Fresh key and shift per response: the first emitted token should
        // follow the base distribution (TV < 0.05 over 4000 responses).
        let model = SyntheticModel::new(Seed([8u8; 32]), 1.0, 16).unwrap();
        let base = model.next_dist(&[]).unwrap();
        let mut s = stream(b"marginal");
        let mut counts = [0usize; 16];
        let trials = 4000;
        for _ in 0..trials {
            let key = ExpKey::draw(&mut s, 8, 16).unwrap();
            let x = exp_generate(&model, &[], &key, 1, &mut s).unwrap();
            counts[x[0] as usize] += 1;
        }
        let tv: f64 = counts
            .iter()
            .zip(base.probs())
            .map(|(&c, &p)| (c as f64 / trials as f64 - p).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.05, "TV distance {tv}");
    }

    #[test]
    fn statistic_matches_hand_values() {
        let key = ExpKey::from_entries(vec![vec![0.3, 0.5]]).unwrap();
        let phi = exp_statistic(&[1], &key, 0).unwrap();
        assert!((phi - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((phi - 0.6931).abs() < 1e-4);
    }

    #[test]
    fn zero_xi_gives_zero_statistic() {
        let key = ExpKey::from_entries(vec![vec![0.0, 0.0]]).unwrap();
        let phi = exp_statistic(&[0, 1, 0], &key, 0).unwrap();
        assert!(phi.abs() < 1e-9, "phi {phi}");
    }

    #[test]
    fn statistic_mean_is_text_length() {
        // Key independent of text: each term is Exponential(1).
        let mut s = stream(b"mean");
        let l = 70;
        let trials = 10_000;
        let mut total = 0.0;
        for _ in 0..trials {
            let key = ExpKey::draw(&mut s, l, 4).unwrap();
            let x: Vec<TokenId> = (0..l).map(|_| s.next_index(4) as TokenId).collect();
            total += exp_statistic(&x, &key, 0).unwrap();
        }
        let mean = total / trials as f64;
        assert!((mean - l as f64).abs() < 0.1 * l as f64, "mean {mean}");
    }

    #[test]
    fn watermarked_text_yields_small_p() {
        let model = SyntheticModel::new(Seed([9u8; 32]), 2.0, 256).unwrap();
        let mut s = stream(b"power");
        let mut hits = 0;
        let trials = 10;
        for _ in 0..trials {
            let key = ExpKey::draw(&mut s, 64, 256).unwrap();
            let x = exp_generate(&model, &[], &key, 70, &mut s).unwrap();
            let report = exp_detect(&x, &key, 99).unwrap();
            if report.value <= 0.05 {
                hits += 1;
            }
        }
        assert!(hits >= 9, "only {hits}/{trials} trials detected");
    }

    #[test]
    fn null_p_values_are_uniform() {
        let mut s = stream(b"null");
        let trials = 500;
        let mut total = 0.0;
        for _ in 0..trials {
            let key = ExpKey::draw(&mut s, 64, 256).unwrap();
            let x: Vec<TokenId> = (0..30).map(|_| s.next_index(256) as TokenId).collect();
            total += exp_detect(&x, &key, 19).unwrap().value;
        }
        let mean = total / trials as f64;
        assert!((0.45..=0.55).contains(&mean), "null mean p {mean}");
    }

    #[test]
    fn p_value_floor_is_one_over_r_plus_one() {
        let model = SyntheticModel::new(Seed([10u8; 32]), 1.0, 64).unwrap();
        let key = uniform_key(b"floor", 16, 64);
        let x = exp_generate_with_shift(&model, &[], &key, 40, 3).unwrap();
        let report = exp_detect(&x, &key, 9).unwrap();
        assert_eq!(report.value, 0.1);
        assert!(report.verdict == (report.value <= report.threshold));
    }

    #[test]
    fn detection_is_pure() {
        let key = uniform_key(b"pure", 16, 64);
        let x: Vec<TokenId> = (0..25).map(|i| (i * 7 % 64) as TokenId).collect();
        assert_eq!(exp_detect(&x, &key, 19).unwrap(), exp_detect(&x, &key, 19).unwrap());
    }

    #[test]
    fn invalid_arguments_rejected() {
        let key = uniform_key(b"bad", 4, 16);
        let model = SyntheticModel::new(Seed([1u8; 32]), 1.0, 16).unwrap();
        assert!(exp_detect(&[1, 2], &key, 0).is_err());
        assert!(exp_detect(&[], &key, 9).is_err());
        assert!(exp_statistic(&[1], &key, 4).is_err());
        assert!(exp_generate_with_shift(&model, &[], &key, 0, 0).is_err());
        assert!(exp_generate_with_shift(&model, &[], &key, 5, 9).is_err());
        let wide = SyntheticModel::new(Seed([1u8; 32]), 1.0, 32).unwrap();
        assert!(exp_generate_with_shift(&wide, &[], &key, 5, 0).is_err());
        assert!(ExpKey::from_entries(vec![]).is_err());
        assert!(ExpKey::from_entries(vec![vec![0.5], vec![0.5]]).is_err());
        assert!(ExpKey::from_entries(vec![vec![0.5, 1.2]]).is_err());
        assert!(ExpKey::from_entries(vec![vec![0.5, 0.5], vec![0.5]]).is_err());
    }

    #[test]
    fn key_save_load_round_trip() {
        let key = uniform_key(b"disk", 8, 32);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        key.save(&path).unwrap();
        let loaded = ExpKey::load(&path).unwrap();
        assert_eq!(key, loaded);
        assert_eq!(key.fingerprint(), loaded.fingerprint());
    }

    #[test]
    fn key_load_rejects_corrupt_files() {
        let key = uniform_key(b"corrupt", 4, 16);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("key.bin");
        key.save(&path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'Z';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(matches!(ExpKey::load(&path), Err(Error::MalformedFile(_))));

        let mut bad_version = good.clone();
        bad_version[4] = 99;
        std::fs::write(&path, &bad_version).unwrap();
        assert!(matches!(ExpKey::load(&path), Err(Error::MalformedFile(_))));

        std::fs::write(&path, &good[..good.len() - 8]).unwrap();
        assert!(matches!(ExpKey::load(&path), Err(Error::MalformedFile(_))));
    }
}
