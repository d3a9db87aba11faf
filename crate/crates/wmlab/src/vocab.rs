//! Token vocabularies and the corpus tokenizer.
//!
//! Tokenization is deliberately plain: lowercase, split on whitespace, cap
//! the vocabulary at the most frequent types, map everything else to a
//! reserved unknown token. The schemes under study are tokenizer-agnostic,
//! so the simplest reproducible mapping wins.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

/// Token identifier; dense in 0..|V|.
pub type TokenId = u32;

/// Reserved id for out-of-vocabulary words; doubles as the start-of-text
/// padding id for context windows that reach past the sequence start.
pub const UNK_TOKEN: TokenId = 0;

/// Default cap on trained vocabulary size (most frequent types kept).
pub const DEFAULT_VOCAB_CAP: usize = 8192;

const VOCAB_FORMAT_VERSION: u32 = 1;

/// A dense token id space with per-id display strings.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Vocabulary {
    format_version: u32,
    surface: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a synthetic vocabulary of `size` ids with generated surfaces.
    /// Id 0 keeps its unknown-token role for uniformity.
    pub fn synthetic(size: usize) -> Result<Self> {
        if size < 2 {
            return Err(Error::InvalidParameter(format!(
                "vocabulary needs at least 2 tokens, got {size}"
            )));
        }
        let mut surface = Vec::with_capacity(size);
        surface.push("<unk>".to_string());
        for i in 1..size {
            surface.push(format!("w{i}"));
        }
        Ok(Self::from_surfaces(surface))
    }

    /// Builds a vocabulary from a corpus: lowercased whitespace types ranked
    /// by frequency (ties by surface string), capped at `cap`, plus `<unk>`.
    pub fn from_corpus(text: &str, cap: usize) -> Result<Self> {
        if cap < 1 {
            return Err(Error::InvalidParameter("vocabulary cap must be positive".into()));
        }
        let mut counts: HashMap<String, u64> = HashMap::new();
        for word in text.split_whitespace() {
            *counts.entry(word.to_lowercase()).or_insert(0) += 1;
        }
        if counts.is_empty() {
            return Err(Error::Training("empty corpus: no whitespace tokens".into()));
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(cap);

        let mut surface = Vec::with_capacity(ranked.len() + 1);
        surface.push("<unk>".to_string());
        surface.extend(ranked.into_iter().map(|(w, _)| w));
        Ok(Self::from_surfaces(surface))
    }

    fn from_surfaces(surface: Vec<String>) -> Self {
        let index = surface
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i as TokenId))
            .collect();
        Self { format_version: VOCAB_FORMAT_VERSION, surface, index }
    }

    pub fn size(&self) -> usize {
        self.surface.len()
    }

    pub fn surface(&self, token: TokenId) -> Option<&str> {
        self.surface.get(token as usize).map(String::as_str)
    }

    /// Id for a surface string; unknown words map to [`UNK_TOKEN`].
    pub fn token(&self, word: &str) -> TokenId {
        self.index.get(&word.to_lowercase()).copied().unwrap_or(UNK_TOKEN)
    }

    pub fn tokenize(&self, text: &str) -> Vec<TokenId> {
        text.split_whitespace().map(|w| self.token(w)).collect()
    }

    /// Renders ids back to a whitespace-joined string.
    pub fn render(&self, tokens: &[TokenId]) -> String {
        tokens
            .iter()
            .map(|&t| self.surface(t).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Checks that every id is in range.
    pub fn validate(&self, tokens: &[TokenId]) -> Result<()> {
        validate_tokens(tokens, self.size())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        serde_json::to_writer(std::io::BufWriter::new(file), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let raw: Vocabulary = serde_json::from_reader(std::io::BufReader::new(file))?;
        if raw.format_version != VOCAB_FORMAT_VERSION {
            return Err(Error::MalformedFile(format!(
                "unsupported vocabulary format version {}",
                raw.format_version
            )));
        }
        if raw.surface.len() < 2 {
            return Err(Error::MalformedFile("vocabulary smaller than 2 tokens".into()));
        }
        Ok(Self::from_surfaces(raw.surface))
    }
}

/// Range check shared by operations that take raw token slices.
pub fn validate_tokens(tokens: &[TokenId], vocab_size: usize) -> Result<()> {
    for &t in tokens {
        if t as usize >= vocab_size {
            return Err(Error::TokenOutOfRange { token: t, vocab_size });
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corpus_vocab_ranks_by_frequency() {
        let v = Vocabulary::from_corpus("b a a a c c B", 10).unwrap();
        // a:3, b:2, c:2 (ties by surface) then <unk> at 0.
        assert_eq!(v.size(), 4);
        assert_eq!(v.token("a"), 1);
        assert_eq!(v.token("b"), 2);
        assert_eq!(v.token("c"), 3);
        assert_eq!(v.token("zzz"), UNK_TOKEN);
    }

    #[test]
    fn cap_keeps_most_frequent() {
        let v = Vocabulary::from_corpus("a a a b b c", 2).unwrap();
        assert_eq!(v.size(), 3); // <unk> + 2 kept types
        assert_eq!(v.token("a"), 1);
        assert_eq!(v.token("c"), UNK_TOKEN);
    }

    #[test]
    fn tokenize_render_round_trip_known_words() {
        let v = Vocabulary::from_corpus("alpha beta gamma", 10).unwrap();
        let toks = v.tokenize("beta ALPHA gamma");
        assert_eq!(v.render(&toks), "beta alpha gamma");
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(Vocabulary::from_corpus("   \n\t ", 10).is_err());
    }

    #[test]
    fn validate_rejects_out_of_range() {
        let v = Vocabulary::synthetic(4).unwrap();
        assert!(v.validate(&[0, 3]).is_ok());
        assert!(v.validate(&[4]).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        let v = Vocabulary::from_corpus("x y z x", 10).unwrap();
        v.save(&path).unwrap();
        let loaded = Vocabulary::load(&path).unwrap();
        assert_eq!(loaded.size(), v.size());
        assert_eq!(loaded.token("y"), v.token("y"));
    }
}
