//! Count-based Markov model with additive smoothing.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dist::ProbDist;
use crate::error::{Error, Result};
use crate::lm::LanguageModel;
use crate::prf::UniformStream;
use crate::vocab::{validate_tokens, TokenId};

pub const MARKOV_FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
struct ContextCounts {
    counts: BTreeMap<TokenId, u64>,
    total: u64,
}

/// Order-k Markov model over token ids. Keeps count tables for every
/// context length 0..=order so positions near a sequence start condition on
/// however much context exists.
#[derive(Clone, Debug, PartialEq)]
pub struct MarkovModel {
    order: usize,
    alpha: f64,
    vocab_size: usize,
    tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>>,
}

pub fn train_markov(
    corpus: &[TokenId],
    vocab_size: usize,
    order: usize,
    alpha: f64,
) -> Result<MarkovModel> {
    if order < 1 {
        return Err(Error::InvalidParameter("order must be at least 1".into()));
    }
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!(
            "smoothing constant must be positive, got {alpha}"
        )));
    }
    if vocab_size < 2 {
        return Err(Error::InvalidParameter(format!(
            "vocabulary needs at least 2 tokens, got {vocab_size}"
        )));
    }
    if corpus.is_empty() {
        return Err(Error::Training("empty corpus".into()));
    }
    if corpus.len() <= order {
        return Err(Error::Training(format!(
            "corpus of {} tokens cannot train an order-{order} model",
            corpus.len()
        )));
    }
    validate_tokens(corpus, vocab_size)?;

    let mut tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>> = vec![BTreeMap::new(); order + 1];
    for (i, &next) in corpus.iter().enumerate() {
        for k in 0..=order.min(i) {
            let entry = tables[k].entry(corpus[i - k..i].to_vec()).or_default();
            *entry.counts.entry(next).or_insert(0) += 1;
            entry.total += 1;
        }
    }
    Ok(MarkovModel { order, alpha, vocab_size, tables })
}

impl MarkovModel {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    fn lookup(&self, context: &[TokenId]) -> Option<&ContextCounts> {
        let k = self.order.min(context.len());
        self.tables[k].get(&context[context.len() - k..])
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = MarkovFile {
            format_version: MARKOV_FORMAT_VERSION,
            order: self.order,
            alpha: self.alpha,
            vocab_size: self.vocab_size,
            tables: self
                .tables
                .iter()
                .map(|t| {
                    t.iter()
                        .map(|(ctx, cc)| {
                            (ctx.clone(), cc.counts.iter().map(|(&t, &c)| (t, c)).collect())
                        })
                        .collect()
                })
                .collect(),
        };
        std::fs::write(path, serde_json::to_vec(&file)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file: MarkovFile = serde_json::from_slice(&std::fs::read(path)?)
            .map_err(|e| Error::MalformedFile(format!("markov model: {e}")))?;
        if file.format_version != MARKOV_FORMAT_VERSION {
            return Err(Error::MalformedFile(format!(
                "markov model format version {} (expected {MARKOV_FORMAT_VERSION})",
                file.format_version
            )));
        }
        if file.tables.len() != file.order + 1 {
            return Err(Error::MalformedFile("markov model table count mismatch".into()));
        }
        let mut tables: Vec<BTreeMap<Vec<TokenId>, ContextCounts>> =
            vec![BTreeMap::new(); file.order + 1];
        for (k, table) in file.tables.into_iter().enumerate() {
            for (ctx, pairs) in table {
                if ctx.len() != k {
                    return Err(Error::MalformedFile("context length mismatch".into()));
                }
                let mut cc = ContextCounts::default();
                for (t, c) in pairs {
                    if t as usize >= file.vocab_size {
                        return Err(Error::MalformedFile("token id out of range".into()));
                    }
                    cc.counts.insert(t, c);
                    cc.total += c;
                }
                tables[k].insert(ctx, cc);
            }
        }
        Ok(MarkovModel {
            order: file.order,
            alpha: file.alpha,
            vocab_size: file.vocab_size,
            tables,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct MarkovFile {
    format_version: u32,
    order: usize,
    alpha: f64,
    vocab_size: usize,
    tables: Vec<Vec<(Vec<TokenId>, Vec<(TokenId, u64)>)>>,
}

impl LanguageModel for MarkovModel {
    fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    fn next_dist(&self, context: &[TokenId]) -> Result<ProbDist> {
        validate_tokens(context, self.vocab_size)?;
        let v = self.vocab_size as f64;
        let mut probs = vec![0.0; self.vocab_size];
        match self.lookup(context) {
            Some(cc) => {
                let denom = cc.total as f64 + self.alpha * v;
                for p in probs.iter_mut() {
                    *p = self.alpha / denom;
                }
                for (&t, &c) in &cc.counts {
                    probs[t as usize] = (c as f64 + self.alpha) / denom;
                }
            }
            None => {
                for p in probs.iter_mut() {
                    *p = 1.0 / v;
                }
            }
        }
        ProbDist::new(probs)
    }

    /// Sparse draw: the smoothed law is a mixture of the empirical counts
    /// (weight total/(total+α|V|)) and the uniform distribution, so one
    /// uniform variate picks the branch and the position within it.
    fn sample_next(&self, context: &[TokenId], stream: &mut UniformStream) -> Result<TokenId> {
        validate_tokens(context, self.vocab_size)?;
        let u = stream.next_f64();
        let v = self.vocab_size as f64;
        if let Some(cc) = self.lookup(context) {
            if cc.total > 0 {
                let w = cc.total as f64 / (cc.total as f64 + self.alpha * v);
                if u < w {
                    let target = u / w * cc.total as f64;
                    let mut cum = 0.0;
                    for (&t, &c) in &cc.counts {
                        cum += c as f64;
                        if target < cum {
                            return Ok(t);
                        }
                    }
                    return Ok(*cc.counts.keys().next_back().expect("nonzero total"));
                }
                let r = (u - w) / (1.0 - w);
                return Ok(((r * v) as usize).min(self.vocab_size - 1) as TokenId);
            }
        }
        Ok(((u * v) as usize).min(self.vocab_size - 1) as TokenId)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{generate, LanguageModel};
    use crate::prf::{prf, WatermarkKey};
    use crate::vocab::Vocabulary;

    fn ab_setup(alpha: f64) -> (Vocabulary, MarkovModel) {
        let vocab = Vocabulary::from_corpus("a b a b a b", 100).unwrap();
        let corpus = vocab.tokenize("a b a b a b");
        let m = train_markov(&corpus, vocab.size(), 1, alpha).unwrap();
        (vocab, m)
    }

    fn stream(tag: &[u8]) -> UniformStream {
        UniformStream::new(prf(&WatermarkKey::from_bytes(&[9u8; 16]).unwrap(), tag))
    }

    #[test]
    fn vanishing_smoothing_recovers_count_ratio() {
        let (vocab, m) = ab_setup(1e-9);
        let d = m.next_dist(&[vocab.token("a")]).unwrap();
        assert!(d.probs()[vocab.token("b") as usize] > 0.999999);
    }

    #[test]
    fn huge_smoothing_approaches_uniform() {
        let (vocab, m) = ab_setup(1e12);
        let d = m.next_dist(&[vocab.token("a")]).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn unseen_context_is_uniform() {
        let (vocab, m) = ab_setup(0.1);
        let d = m.next_dist(&[vocab.token("<unk>")]).unwrap();
        for &p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn trained_context_argmax() {
        let (vocab, m) = ab_setup(0.1);
        let d = m.next_dist(&[vocab.token("a")]).unwrap();
        assert_eq!(d.argmax(), vocab.token("b"));
    }

    #[test]
    fn short_context_uses_matching_table() {
        // Order-2 model queried with one token of context falls back to the
        // order-1 statistics rather than treating the context as unseen.
        let text = "a b c a b c a b c a b c";
        let vocab = Vocabulary::from_corpus(text, 100).unwrap();
        let corpus = vocab.tokenize(text);
        let m = train_markov(&corpus, vocab.size(), 2, 0.1).unwrap();
        let d = m.next_dist(&[vocab.token("b")]).unwrap();
        assert_eq!(d.argmax(), vocab.token("c"));
        let d0 = m.next_dist(&[]).unwrap();
        assert_eq!(d0.argmax(), vocab.token("a"));
    }

    #[test]
    fn training_rejects_bad_input() {
        assert!(matches!(train_markov(&[], 4, 1, 0.1), Err(Error::Training(_))));
        assert!(matches!(train_markov(&[1, 2], 4, 2, 0.1), Err(Error::Training(_))));
        assert!(train_markov(&[1, 2, 3], 4, 0, 0.1).is_err());
        assert!(train_markov(&[1, 2, 3], 4, 1, 0.0).is_err());
        assert!(train_markov(&[1, 9], 4, 1, 0.1).is_err());
    }

    #[test]
    fn sparse_sampling_matches_smoothed_law() {
        let (vocab, m) = ab_setup(0.5);
        let ctx = [vocab.token("a")];
        let expect = m.next_dist(&ctx).unwrap().probs()[vocab.token("b") as usize];
        let mut s = stream(b"law");
        let draws = 40_000;
        let hits = (0..draws)
            .filter(|_| m.sample_next(&ctx, &mut s).unwrap() == vocab.token("b"))
            .count();
        let freq = hits as f64 / draws as f64;
        assert!((freq - expect).abs() < 0.01, "freq {freq} vs {expect}");
    }

    #[test]
    fn sampling_deterministic() {
        let (_, m) = ab_setup(0.1);
        let a = generate(&m, &[1], 64, &mut stream(b"d")).unwrap();
        let b = generate(&m, &[1], 64, &mut stream(b"d")).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn save_load_round_trip() {
        let (vocab, m) = ab_setup(0.1);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.json");
        m.save(&path).unwrap();
        let loaded = MarkovModel::load(&path).unwrap();
        assert_eq!(m, loaded);
        let ctx = [vocab.token("a")];
        assert_eq!(m.next_dist(&ctx).unwrap(), loaded.next_dist(&ctx).unwrap());
    }

    #[test]
    fn load_rejects_bad_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.json");
        std::fs::write(&path, b"{not json").unwrap();
        assert!(matches!(MarkovModel::load(&path), Err(Error::MalformedFile(_))));
        let (_, m) = ab_setup(0.1);
        let good = dir.path().join("good.json");
        m.save(&good).unwrap();
        let mut text = std::fs::read_to_string(&good).unwrap();
        text = text.replace("\"format_version\":1", "\"format_version\":9");
        std::fs::write(&good, text).unwrap();
        assert!(matches!(MarkovModel::load(&good), Err(Error::MalformedFile(_))));
    }
}
