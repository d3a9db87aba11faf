//! Keyed pseudorandom primitives.
//!
//! All scheme randomness flows through two functions: [`prf`], a keyed hash
//! mapping (key, message) to a 32-byte [`Seed`], and the [`UniformStream`]
//! expansion of a seed into reproducible uniforms. Both are pure, so every
//! green-list, noise draw, and synthetic distribution derived from them is
//! recomputable from key material alone.

use crate::error::{Error, Result};
use crate::vocab::TokenId;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// Width of every derived seed, in bytes.
pub const SEED_LEN: usize = 32;

/// Minimum accepted key length, in bytes.
pub const MIN_KEY_LEN: usize = 16;

/// A 32-byte value deterministically derived from key material and a message.
#[derive(Clone, Copy, PartialEq, Eq, Hash)]
pub struct Seed(pub [u8; SEED_LEN]);

impl Seed {
    pub fn as_bytes(&self) -> &[u8; SEED_LEN] {
        &self.0
    }
}

impl std::fmt::Debug for Seed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Seed({})", hex::encode(self.0))
    }
}

/// Secret key for the green-list schemes and for noise seeding.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct WatermarkKey {
    bytes: Vec<u8>,
}

impl WatermarkKey {
    /// Wraps raw key bytes. Keys shorter than [`MIN_KEY_LEN`] are rejected.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MIN_KEY_LEN {
            return Err(Error::InvalidKey(format!(
                "key must be at least {MIN_KEY_LEN} bytes, got {}",
                bytes.len()
            )));
        }
        Ok(Self { bytes: bytes.to_vec() })
    }

    /// Draws a fresh 32-byte key.
    pub fn random(rng: &mut impl RngCore) -> Self {
        let mut bytes = vec![0u8; SEED_LEN];
        rng.fill_bytes(&mut bytes);
        Self { bytes }
    }

    pub fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub fn to_hex(&self) -> String {
        hex::encode(&self.bytes)
    }

    pub fn from_hex(s: &str) -> Result<Self> {
        let bytes = hex::decode(s)
            .map_err(|e| Error::InvalidKey(format!("bad hex key material: {e}")))?;
        Self::from_bytes(&bytes)
    }
}

impl std::fmt::Debug for WatermarkKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        // Key material stays out of debug output.
        write!(f, "WatermarkKey({} bytes)", self.bytes.len())
    }
}

/// HMAC-SHA256 (RFC 2104). Validated against an externally computed test
/// vector; kept local because the construction is twenty lines and the
/// laboratory needs nothing else from a MAC.
fn hmac_sha256(key: &[u8], message: &[u8]) -> [u8; SEED_LEN] {
    const BLOCK: usize = 64;
    let mut k = [0u8; BLOCK];
    if key.len() > BLOCK {
        let digest = Sha256::digest(key);
        k[..SEED_LEN].copy_from_slice(&digest);
    } else {
        k[..key.len()].copy_from_slice(key);
    }

    let mut inner = Sha256::new();
    let ipad: Vec<u8> = k.iter().map(|b| b ^ 0x36).collect();
    inner.update(&ipad);
    inner.update(message);
    let inner_digest = inner.finalize();

    let mut outer = Sha256::new();
    let opad: Vec<u8> = k.iter().map(|b| b ^ 0x5c).collect();
    outer.update(&opad);
    outer.update(inner_digest);
    outer.finalize().into()
}

/// Keyed pseudorandom function: 32-byte seed from (key, message).
pub fn prf(key: &WatermarkKey, message: &[u8]) -> Seed {
    Seed(hmac_sha256(key.bytes(), message))
}

/// Canonical byte encoding of a token sequence for seeding: little-endian
/// u32 per token. Used everywhere a context window keys a PRF call so that
/// seeds are a function of token ids, not of any in-memory layout.
pub fn token_bytes(tokens: &[TokenId]) -> Vec<u8> {
    let mut out = Vec::with_capacity(tokens.len() * 4);
    for &t in tokens {
        out.extend_from_slice(&t.to_le_bytes());
    }
    out
}

/// Deterministic uniform stream expanded from a seed.
///
/// Backed by a stream cipher RNG with a documented, platform-stable output
/// sequence; two streams built from equal seeds produce identical draws.
pub struct UniformStream {
    rng: ChaCha20Rng,
}

impl UniformStream {
    pub fn new(seed: Seed) -> Self {
        Self { rng: ChaCha20Rng::from_seed(seed.0) }
    }

    /// Next uniform draw in [0, 1).
    pub fn next_f64(&mut self) -> f64 {
        self.rng.gen::<f64>()
    }

    /// Next index in 0..bound via inversion of a single uniform draw.
    ///
    /// `floor(u * bound)`; bound must be positive. The shuffle contract
    /// consumes exactly one uniform per step, which keeps permutations
    /// reproducible independently of integer-sampling internals.
    pub fn next_index(&mut self, bound: usize) -> usize {
        debug_assert!(bound > 0);
        let idx = (self.next_f64() * bound as f64) as usize;
        idx.min(bound - 1)
    }

    /// Standard normal draw from two uniforms via Box-Muller.
    pub fn next_gaussian(&mut self) -> f64 {
        // 1 - u maps [0,1) to (0,1], keeping the logarithm finite.
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }
}

/// Expands a seed into `count` uniforms in [0, 1).
pub fn prg_uniform(seed: Seed, count: usize) -> Vec<f64> {
    let mut stream = UniformStream::new(seed);
    (0..count).map(|_| stream.next_f64()).collect()
}
