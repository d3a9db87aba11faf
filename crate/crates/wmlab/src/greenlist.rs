//! Seeded partitioning of the vocabulary into green and red lists.
//!
//! The partition is a full Fisher-Yates shuffle of the id space driven by
//! the seed's uniform stream; the first ⌊γ·|V|⌋ permuted ids are green. A
//! full permutation (rather than per-token hash thresholding) makes the
//! green-list size exact, which keeps detection's null distribution clean.

use crate::error::{Error, Result};
use crate::prf::{Seed, UniformStream};
use crate::vocab::TokenId;

/// An exact-size green/red split of a token id space.
#[derive(Clone, Debug, PartialEq)]
pub struct GreenList {
    bits: Vec<u64>,
    vocab_size: usize,
    green_count: usize,
    gamma: f64,
}

impl GreenList {
    /// Builds a list from explicit green ids. The id count must equal
    /// ⌊γ·|V|⌋ exactly, matching the partition invariant.
    pub fn from_ids(ids: &[TokenId], vocab_size: usize, gamma: f64) -> Result<Self> {
        validate_gamma(gamma)?;
        let expected = expected_green_count(vocab_size, gamma)?;
        let mut bits = vec![0u64; vocab_size.div_ceil(64)];
        let mut count = 0usize;
        for &id in ids {
            if id as usize >= vocab_size {
                return Err(Error::TokenOutOfRange { token: id, vocab_size });
            }
            let (w, b) = (id as usize / 64, id as usize % 64);
            if bits[w] & (1 << b) == 0 {
                bits[w] |= 1 << b;
                count += 1;
            }
        }
        if count != expected {
            return Err(Error::InvalidParameter(format!(
                "green list holds {count} ids, expected exactly {expected}"
            )));
        }
        Ok(Self { bits, vocab_size, green_count: count, gamma })
    }

    pub fn contains(&self, token: TokenId) -> bool {
        let idx = token as usize;
        idx < self.vocab_size && self.bits[idx / 64] & (1 << (idx % 64)) != 0
    }

    pub fn green_count(&self) -> usize {
        self.green_count
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Green ids in ascending order.
    pub fn ids(&self) -> Vec<TokenId> {
        (0..self.vocab_size as TokenId).filter(|&t| self.contains(t)).collect()
    }

    /// Size of the intersection with another list over the same id space.
    pub fn overlap(&self, other: &GreenList) -> usize {
        self.bits
            .iter()
            .zip(other.bits.iter())
            .map(|(a, b)| (a & b).count_ones() as usize)
            .sum()
    }
}

fn validate_gamma(gamma: f64) -> Result<()> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidParameter(format!(
            "gamma must be in (0, 1), got {gamma}"
        )));
    }
    Ok(())
}

fn expected_green_count(vocab_size: usize, gamma: f64) -> Result<usize> {
    let count = (gamma * vocab_size as f64).floor() as usize;
    if count == 0 {
        return Err(Error::InvalidParameter(format!(
            "gamma {gamma} yields an empty green list for |V| = {vocab_size}"
        )));
    }
    Ok(count)
}

/// Deterministic seeded partition: Fisher-Yates over 0..|V|-1 consuming one
/// uniform per swap, then the first ⌊γ·|V|⌋ permuted ids become green.
pub fn green_partition(seed: Seed, vocab_size: usize, gamma: f64) -> Result<GreenList> {
    validate_gamma(gamma)?;
    if vocab_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "vocabulary needs at least 2 tokens, got {vocab_size}"
        )));
    }
    let green_count = expected_green_count(vocab_size, gamma)?;

    let mut perm: Vec<TokenId> = (0..vocab_size as TokenId).collect();
    let mut stream = UniformStream::new(seed);
    for i in (1..vocab_size).rev() {
        let j = stream.next_index(i + 1);
        perm.swap(i, j);
    }

    let mut bits = vec![0u64; vocab_size.div_ceil(64)];
    for &id in &perm[..green_count] {
        bits[id as usize / 64] |= 1 << (id as usize % 64);
    }
    Ok(GreenList { bits, vocab_size, green_count, gamma })
}
