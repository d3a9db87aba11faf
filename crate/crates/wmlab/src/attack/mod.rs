//! Attacks against the watermarking schemes: piggyback spoofing by
//! insertion/editing, multi-key removal, detection-API removal and
//! spoofing, and a green-list stealing baseline.

pub mod api;
pub mod multikey;
pub mod piggyback;
pub mod steal;

use std::cell::Cell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::keyring::{detect_multi, KeySet, SchemeInstance, ThresholdTable};
use crate::lm::LanguageModel;
use crate::vocab::{validate_tokens, TokenId, Vocabulary, UNK_TOKEN};
use crate::watermark::DetectionReport;

/// A set of flagged token ids standing in for content a spoofer wants to
/// smuggle into watermarked text.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Lexicon {
    pub name: String,
    flagged: BTreeSet<TokenId>,
}

impl Lexicon {
    pub fn new(
        name: impl Into<String>,
        ids: impl IntoIterator<Item = TokenId>,
        vocab_size: usize,
    ) -> Result<Self> {
        let flagged: BTreeSet<TokenId> = ids.into_iter().collect();
        if flagged.is_empty() {
            return Err(Error::InvalidParameter("lexicon must be non-empty".into()));
        }
        let ids: Vec<TokenId> = flagged.iter().copied().collect();
        validate_tokens(&ids, vocab_size)?;
        Ok(Self { name: name.into(), flagged })
    }

    /// Loads one surface form per line; blank lines are skipped.
    pub fn from_file(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut ids = Vec::new();
        for line in text.lines() {
            let word = line.trim();
            if word.is_empty() {
                continue;
            }
            let id = vocab.token(word);
            if id == UNK_TOKEN && vocab.surface(UNK_TOKEN) != Some(word) {
                return Err(Error::MalformedFile(format!(
                    "lexicon word {word:?} is not in the vocabulary"
                )));
            }
            ids.push(id);
        }
        let name = path.file_stem().and_then(|s| s.to_str()).unwrap_or("lexicon").to_string();
        Self::new(name, ids, vocab.size())
    }

    pub fn contains(&self, token: TokenId) -> bool {
        self.flagged.contains(&token)
    }

    pub fn ids(&self) -> impl Iterator<Item = TokenId> + '_ {
        self.flagged.iter().copied()
    }

    pub fn len(&self) -> usize {
        self.flagged.len()
    }

    pub fn is_empty(&self) -> bool {
        self.flagged.is_empty()
    }
}

/// Token-for-token replacement rules (antonym swaps, perturbed numbers).
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct SubstitutionTable {
    rules: BTreeMap<TokenId, TokenId>,
}

impl SubstitutionTable {
    pub fn from_pairs(
        pairs: impl IntoIterator<Item = (TokenId, TokenId)>,
        vocab_size: usize,
    ) -> Result<Self> {
        let mut rules = BTreeMap::new();
        for (from, to) in pairs {
            if from == to {
                return Err(Error::InvalidParameter(format!(
                    "substitution rule {from} -> {to} replaces a token with itself"
                )));
            }
            validate_tokens(&[from, to], vocab_size)?;
            rules.insert(from, to);
        }
        Ok(Self { rules })
    }

    /// Loads one rule per line: two whitespace-separated surface forms.
    pub fn from_file(path: &Path, vocab: &Vocabulary) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut pairs = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let mut words = line.split_whitespace();
            let (Some(from), Some(to), None) = (words.next(), words.next(), words.next()) else {
                return Err(Error::MalformedFile(format!(
                    "substitution rule {line:?} is not two words"
                )));
            };
            pairs.push((vocab.token(from), vocab.token(to)));
        }
        Self::from_pairs(pairs, vocab.size())
    }

    pub fn replacement(&self, token: TokenId) -> Option<TokenId> {
        self.rules.get(&token).copied()
    }

    pub fn len(&self) -> usize {
        self.rules.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rules.is_empty()
    }
}

/// The product of one attack trial. `score_before` describes the
/// reference text the attack displaces (the watermarked sample for
/// removal, the attacker's unwatermarked draft for spoofing) and
/// `score_after` the attack output. The query counters cover the
/// attack's model and oracle traffic, reference sample included;
/// quality-proxy measurement passes are excluded. Each attack documents
/// its exact accounting, so instrumented recounting reproduces the
/// totals.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AttackOutcome {
    pub text: Vec<TokenId>,
    pub score_before: DetectionReport,
    pub score_after: DetectionReport,
    pub queries_generation: usize,
    pub queries_detection: usize,
    /// Attack-specific quality measure; each attack documents its own
    /// (pseudo-perplexity for generation attacks, flagged-token fraction
    /// for insertion spoofing).
    pub quality_proxy: f64,
}

/// Black-box access to a detection endpoint returning raw scores.
pub trait DetectionOracle {
    fn score(&mut self, x: &[TokenId]) -> Result<DetectionReport>;
}

/// Oracle backed by a single scheme instance at its default threshold.
pub struct SchemeOracle<'a> {
    scheme: &'a SchemeInstance,
}

impl<'a> SchemeOracle<'a> {
    pub fn new(scheme: &'a SchemeInstance) -> Self {
        Self { scheme }
    }
}

impl DetectionOracle for SchemeOracle<'_> {
    fn score(&mut self, x: &[TokenId]) -> Result<DetectionReport> {
        self.scheme.detect(x)
    }
}

/// Oracle backed by best-over-keys detection with calibrated thresholds.
pub struct KeysetOracle<'a> {
    keyset: &'a KeySet,
    thresholds: &'a ThresholdTable,
}

impl<'a> KeysetOracle<'a> {
    pub fn new(keyset: &'a KeySet, thresholds: &'a ThresholdTable) -> Self {
        Self { keyset, thresholds }
    }
}

impl DetectionOracle for KeysetOracle<'_> {
    fn score(&mut self, x: &[TokenId]) -> Result<DetectionReport> {
        detect_multi(x, self.keyset, self.thresholds)
    }
}

/// Wrapper that counts oracle invocations, for verifying the exactness of
/// `AttackOutcome` query counters.
pub struct CountingOracle<O> {
    pub inner: O,
    pub calls: usize,
}

impl<O> CountingOracle<O> {
    pub fn new(inner: O) -> Self {
        Self { inner, calls: 0 }
    }
}

impl<O: DetectionOracle> DetectionOracle for CountingOracle<O> {
    fn score(&mut self, x: &[TokenId]) -> Result<DetectionReport> {
        self.calls += 1;
        self.inner.score(x)
    }
}

/// Wrapper that counts next-token distribution queries, for the same
/// counter-exactness checks on the generation side.
pub struct InstrumentedModel<'a> {
    inner: &'a dyn LanguageModel,
    calls: Cell<usize>,
}

impl<'a> InstrumentedModel<'a> {
    pub fn new(inner: &'a dyn LanguageModel) -> Self {
        Self { inner, calls: Cell::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.get()
    }
}

impl LanguageModel for InstrumentedModel<'_> {
    fn vocab_size(&self) -> usize {
        self.inner.vocab_size()
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        self.calls.set(self.calls.get() + 1);
        self.inner.next_dist(context)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lexicon_validates_contents() {
        assert!(Lexicon::new("t", [], 16).is_err());
        assert!(Lexicon::new("t", [16], 16).is_err());
        let lex = Lexicon::new("t", [3, 5, 3], 16).unwrap();
        assert_eq!(lex.len(), 2);
        assert!(lex.contains(3));
        assert!(!lex.contains(4));
    }

    #[test]
    fn substitution_table_rules() {
        assert!(SubstitutionTable::from_pairs([(3, 3)], 16).is_err());
        assert!(SubstitutionTable::from_pairs([(3, 16)], 16).is_err());
        let table = SubstitutionTable::from_pairs([(3, 5), (7, 1)], 16).unwrap();
        assert_eq!(table.replacement(3), Some(5));
        assert_eq!(table.replacement(4), None);
    }

    #[test]
    fn lexicon_and_table_load_from_files() {
        let vocab = Vocabulary::from_corpus("alpha beta gamma delta beta", 16).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let lex_path = dir.path().join("flagged.txt");
        std::fs::write(&lex_path, "beta\n\ngamma\n").unwrap();
        let lex = Lexicon::from_file(&lex_path, &vocab).unwrap();
        assert_eq!(lex.len(), 2);
        assert!(lex.contains(vocab.token("beta")));

        std::fs::write(&lex_path, "beta\nnotaword\n").unwrap();
        assert!(matches!(
            Lexicon::from_file(&lex_path, &vocab),
            Err(Error::MalformedFile(_))
        ));

        let rules_path = dir.path().join("rules.txt");
        std::fs::write(&rules_path, "alpha delta\nbeta gamma\n").unwrap();
        let table = SubstitutionTable::from_file(&rules_path, &vocab).unwrap();
        assert_eq!(table.replacement(vocab.token("alpha")), Some(vocab.token("delta")));

        std::fs::write(&rules_path, "alpha\n").unwrap();
        assert!(SubstitutionTable::from_file(&rules_path, &vocab).is_err());
    }
}
