//! Piggyback spoofing: riding on a genuinely watermarked text by inserting
//! flagged tokens or applying small meaning-inverting edits, so the
//! modified text still detects as watermarked.

use crate::attack::{Lexicon, SubstitutionTable};
use crate::error::{Error, Result};
use crate::prf::UniformStream;
use crate::vocab::{validate_tokens, TokenId};

/// Inserts `s` tokens at uniformly random positions, preserving the
/// relative order of the original tokens. Returns the new text and the
/// final indices of the inserted tokens.
fn insert_with_trace(
    x: &[TokenId],
    s: usize,
    mut draw_token: impl FnMut(&mut UniformStream) -> TokenId,
    stream: &mut UniformStream,
) -> (Vec<TokenId>, Vec<usize>) {
    let mut text: Vec<(TokenId, bool)> = x.iter().map(|&t| (t, false)).collect();
    for _ in 0..s {
        let pos = stream.next_index(text.len() + 1);
        let token = draw_token(stream);
        text.insert(pos, (token, true));
    }
    let positions = text
        .iter()
        .enumerate()
        .filter_map(|(i, &(_, inserted))| inserted.then_some(i))
        .collect();
    (text.into_iter().map(|(t, _)| t).collect(), positions)
}

/// Inserts `s` tokens drawn uniformly from the whole vocabulary at
/// uniformly random positions.
pub fn insert_random_tokens(
    x: &[TokenId],
    s: usize,
    vocab_size: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    Ok(insert_random_tokens_traced(x, s, vocab_size, stream)?.0)
}

/// As [`insert_random_tokens`], also returning the inserted positions.
pub fn insert_random_tokens_traced(
    x: &[TokenId],
    s: usize,
    vocab_size: usize,
    stream: &mut UniformStream,
) -> Result<(Vec<TokenId>, Vec<usize>)> {
    if vocab_size < 2 {
        return Err(Error::InvalidParameter("vocabulary must have at least 2 tokens".into()));
    }
    validate_tokens(x, vocab_size)?;
    Ok(insert_with_trace(x, s, |st| st.next_index(vocab_size) as TokenId, stream))
}

/// Inserts `s` lexicon tokens (drawn uniformly from the lexicon, with
/// replacement) at uniformly random positions of a watermarked text.
pub fn piggyback_insert(
    x_wm: &[TokenId],
    lexicon: &Lexicon,
    s: usize,
    stream: &mut UniformStream,
) -> Result<Vec<TokenId>> {
    Ok(piggyback_insert_traced(x_wm, lexicon, s, stream)?.0)
}

/// As [`piggyback_insert`], also returning the inserted positions.
pub fn piggyback_insert_traced(
    x_wm: &[TokenId],
    lexicon: &Lexicon,
    s: usize,
    stream: &mut UniformStream,
) -> Result<(Vec<TokenId>, Vec<usize>)> {
    let ids: Vec<TokenId> = lexicon.ids().collect();
    Ok(insert_with_trace(x_wm, s, |st| ids[st.next_index(ids.len())], stream))
}

/// Replaces up to `max_edits` rule-matched tokens, scanning left to
/// right. Length is unchanged. Returns the edited text and the number of
/// edits applied; zero means no rule matched and the text is unmodified.
pub fn piggyback_edit(
    x_wm: &[TokenId],
    table: &SubstitutionTable,
    max_edits: usize,
) -> Result<(Vec<TokenId>, usize)> {
    if max_edits < 1 {
        return Err(Error::InvalidParameter("edit budget must be at least 1".into()));
    }
    let mut text = x_wm.to_vec();
    let mut applied = 0usize;
    for slot in text.iter_mut() {
        if applied == max_edits {
            break;
        }
        if let Some(to) = table.replacement(*slot) {
            *slot = to;
            applied += 1;
        }
    }
    Ok((text, applied))
}

/// Fraction of output tokens that are flagged by the lexicon — the
/// quality proxy for insertion spoofing.
pub fn flagged_fraction(x: &[TokenId], lexicon: &Lexicon) -> f64 {
    if x.is_empty() {
        return 0.0;
    }
    x.iter().filter(|&&t| lexicon.contains(t)).count() as f64 / x.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prf::{prf, WatermarkKey};

    fn stream(tag: &[u8]) -> UniformStream {
        let key = WatermarkKey::from_bytes(&[0x4Au8; 16]).unwrap();
        UniformStream::new(prf(&key, tag))
    }

    #[test]
    fn zero_insertions_change_nothing() {
        let x = vec![5, 9, 2, 2, 7];
        let y = insert_random_tokens(&x, 0, 16, &mut stream(b"z")).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn insertion_preserves_order_and_is_removable() {
        let x: Vec<TokenId> = (0..50).map(|i| (i * 7) % 16).collect();
        let (y, pos) = insert_random_tokens_traced(&x, 30, 16, &mut stream(b"ins")).unwrap();
        assert_eq!(y.len(), x.len() + 30);
        assert_eq!(pos.len(), 30);
        let mut reconstructed = y.clone();
        for &p in pos.iter().rev() {
            reconstructed.remove(p);
        }
        assert_eq!(reconstructed, x);
    }

    #[test]
    fn lexicon_insertion_tokens_come_from_lexicon() {
        let lex = Lexicon::new("flag", [3, 11], 16).unwrap();
        let x = vec![0u32; 20];
        let (y, pos) = piggyback_insert_traced(&x, &lex, 40, &mut stream(b"lex")).unwrap();
        for &p in &pos {
            assert!(lex.contains(y[p]), "non-lexicon token {} inserted", y[p]);
        }
        assert!((flagged_fraction(&y, &lex) - 40.0 / 60.0).abs() < 1e-12);
    }

    #[test]
    fn edits_cap_and_noop() {
        let table = SubstitutionTable::from_pairs([(2, 9), (5, 1)], 16).unwrap();
        let x = vec![2, 3, 5, 2, 5, 2];
        let (y, applied) = piggyback_edit(&x, &table, 3).unwrap();
        assert_eq!(applied, 3);
        assert_eq!(y, vec![9, 3, 1, 9, 5, 2]);
        assert_eq!(y.len(), x.len());

        let (y, applied) = piggyback_edit(&x, &table, 100).unwrap();
        assert_eq!(applied, 5);
        assert_eq!(y, vec![9, 3, 1, 9, 1, 9]);

        let none = SubstitutionTable::from_pairs([(14, 15)], 16).unwrap();
        let (y, applied) = piggyback_edit(&x, &none, 3).unwrap();
        assert_eq!(applied, 0);
        assert_eq!(y, x);

        assert!(piggyback_edit(&x, &table, 0).is_err());
    }

    #[test]
    fn insertion_positions_cover_the_text() {
        // With 400 insertions into a 10-token text, both ends get used.
        let x = vec![1u32; 10];
        let (y, pos) = insert_random_tokens_traced(&x, 400, 16, &mut stream(b"cov")).unwrap();
        assert_eq!(y.len(), 410);
        assert!(pos.iter().any(|&p| p == 0));
        assert!(pos.iter().any(|&p| p == 409));
    }

    #[test]
    fn invalid_inputs_rejected() {
        assert!(insert_random_tokens(&[1, 2], 3, 1, &mut stream(b"v")).is_err());
        assert!(insert_random_tokens(&[99], 3, 16, &mut stream(b"v2")).is_err());
    }
}
