//! Probability vectors and logits over a vocabulary.

use crate::error::{Error, Result};
use crate::vocab::TokenId;

/// Tolerance for the sums-to-one invariant.
pub const PROB_SUM_TOL: f64 = 1e-9;

/// Raw scores over the vocabulary. Entries may be `-inf` (impossible token)
/// but never `+inf` or NaN.
#[derive(Clone, Debug, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidParameter("logits must be non-empty".into()));
        }
        for &v in &values {
            if v.is_nan() || v == f64::INFINITY {
                return Err(Error::InvalidParameter(
                    "logit entries must be finite or -inf".into(),
                ));
            }
        }
        Ok(Self(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A probability distribution over token ids: non-negative, sums to one.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.len() < 2 {
            return Err(Error::InvalidParameter(
                "distribution needs at least 2 entries".into(),
            ));
        }
        let mut sum = 0.0;
        for &p in &probs {
            if !(p >= 0.0) {
                return Err(Error::InvalidParameter(format!(
                    "negative or NaN probability {p}"
                )));
            }
            sum += p;
        }
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(Error::InvalidParameter(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self(probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n < 2 {
            return Err(Error::InvalidParameter("uniform needs n >= 2".into()));
        }
        Ok(Self(vec![1.0 / n as f64; n]))
    }

    /// Numerically stable softmax. Errors if every logit is -inf.
    pub fn from_logits(logits: &Logits) -> Result<Self> {
        let max = logits.values().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(Error::InvalidParameter("softmax of all -inf logits".into()));
        }
        let weights: Vec<f64> = logits.values().iter().map(|&v| (v - max).exp()).collect();
        let sum: f64 = weights.iter().sum();
        Ok(Self(weights.into_iter().map(|w| w / sum).collect()))
    }

    pub fn probs(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Natural-log probabilities; zero entries map to -inf.
    pub fn to_logits(&self) -> Logits {
        Logits(
            self.0
                .iter()
                .map(|&p| if p > 0.0 { p.ln() } else { f64::NEG_INFINITY })
                .collect(),
        )
    }

    /// Shannon entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.0
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.ln())
            .sum()
    }

    /// Highest-probability token, ties broken by lower id.
    pub fn argmax(&self) -> TokenId {
        let mut best = 0usize;
        for (i, &p) in self.0.iter().enumerate().skip(1) {
            if p > self.0[best] {
                best = i;
            }
        }
        best as TokenId
    }

    /// Inverse-CDF sample given a uniform draw in [0, 1).
    pub fn sample_at(&self, u: f64) -> TokenId {
        let mut acc = 0.0;
        for (i, &p) in self.0.iter().enumerate() {
            acc += p;
            if u < acc {
                return i as TokenId;
            }
        }
        // Rounding in the final partial sum: fall back to the last positive entry.
        self.0
            .iter()
            .rposition(|&p| p > 0.0)
            .unwrap_or(self.0.len() - 1) as TokenId
    }

    /// The `l` highest-probability (token, prob) pairs, descending by
    /// probability with ties broken by lower token id.
    pub fn top_l(&self, l: usize) -> Result<Vec<(TokenId, f64)>> {
        if l < 1 || l > self.0.len() {
            return Err(Error::InvalidParameter(format!(
                "top-l of {l} outside 1..={}",
                self.0.len()
            )));
        }
        let mut order: Vec<usize> = (0..self.0.len()).collect();
        order.sort_by(|&a, &b| {
            self.0[b]
                .partial_cmp(&self.0[a])
                .unwrap()
                .then_with(|| a.cmp(&b))
        });
        Ok(order[..l].iter().map(|&i| (i as TokenId, self.0[i])).collect())
    }

    /// Total-variation distance to another distribution of the same width.
    pub fn tv_distance(&self, other: &ProbDist) -> Result<f64> {
        if self.len() != other.len() {
            return Err(Error::SchemaMismatch(format!(
                "distribution widths differ: {} vs {}",
                self.len(),
                other.len()
            )));
        }
        Ok(self
            .0
            .iter()
            .zip(other.0.iter())
            .map(|(a, b)| (a - b).abs())
            .sum::<f64>()
            / 2.0)
    }
}
