//! Randomized property suite: structural invariants that must hold for
//! every key, parameter set, and text, not just the fixed seeds the unit
//! tests pin down.

use proptest::prelude::*;

use wmlab::attack::piggyback::{insert_random_tokens_traced, piggyback_insert_traced};
use wmlab::attack::Lexicon;
use wmlab::dist::Logits;
use wmlab::dp::{dp_detect, DpMode, DpParams};
use wmlab::greenlist::green_partition;
use wmlab::keyring::{detect_each, detect_multi, ExpInstance, KeySet, SchemeInstance, ThresholdTable};
use wmlab::lm::{pseudo_perplexity, top_l, LanguageModel, SyntheticModel};
use wmlab::prf::{prf, Seed, UniformStream, WatermarkKey};
use wmlab::report::{summarize, AttackGoal, Report, ReportRow};
use wmlab::vocab::TokenId;
use wmlab::watermark::{
    ExpKey, KgwParams, KgwScheme, ScoreKind, UnigramParams, UnigramScheme,
};

fn stream_from(tag: &[u8], salt: &[u8]) -> UniformStream {
    let key = WatermarkKey::from_bytes(&[0x5Au8; 16]).unwrap();
    let mut bytes = tag.to_vec();
    bytes.extend_from_slice(salt);
    UniformStream::new(prf(&key, &bytes))
}

fn tokens(len: usize, vocab: usize, s: &mut UniformStream) -> Vec<TokenId> {
    (0..len).map(|_| s.next_index(vocab) as TokenId).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn green_partition_is_pure_and_exactly_sized(
        seed in any::<[u8; 32]>(),
        vocab in 2usize..300,
        gamma in 0.05f64..0.95,
    ) {
        let a = green_partition(Seed(seed), vocab, gamma).unwrap();
        let b = green_partition(Seed(seed), vocab, gamma).unwrap();
        prop_assert_eq!(a.ids(), b.ids());
        prop_assert_eq!(a.green_count(), (gamma * vocab as f64).floor() as usize);
        let ids = a.ids();
        prop_assert!(ids.windows(2).all(|w| w[0] < w[1]), "ids sorted and unique");
        prop_assert!(ids.iter().all(|&t| (t as usize) < vocab));
        for &t in &ids {
            prop_assert!(a.contains(t));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn model_distributions_are_normalized_and_top_l_is_the_argmax_set(
        seed in any::<[u8; 32]>(),
        concentration in 0.01f64..10.0,
        vocab in 2usize..200,
        ctx_salt in any::<u64>(),
        l_frac in 0.0f64..1.0,
    ) {
        let model = SyntheticModel::new(Seed(seed), concentration, vocab).unwrap();
        let mut s = stream_from(b"ctx", &ctx_salt.to_le_bytes());
        let ctx = tokens(s.next_index(6), vocab, &mut s);
        let dist = model.next_dist(&ctx).unwrap();
        let sum: f64 = dist.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9, "sum {sum}");
        prop_assert!(dist.probs().iter().all(|&p| p >= 0.0));

        let l = 1 + (l_frac * (vocab - 1) as f64).floor() as usize;
        let picked = top_l(&model, &ctx, l).unwrap();
        prop_assert_eq!(picked.entries.len(), l);
        let mut sorted: Vec<f64> = dist.probs().to_vec();
        sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let sum_sel: f64 = picked.entries.iter().map(|&(_, p)| p).sum();
        let sum_top: f64 = sorted[..l].iter().sum();
        prop_assert!((sum_sel - sum_top).abs() <= 1e-12, "top-{l} mass {sum_sel} vs {sum_top}");
        let min_sel = picked.entries.iter().map(|&(_, p)| p).fold(f64::INFINITY, f64::min);
        let max_out = sorted.get(l).copied().unwrap_or(0.0);
        prop_assert!(min_sel >= max_out - 1e-15);
        for &(t, p) in &picked.entries {
            prop_assert_eq!(p, dist.probs()[t as usize]);
        }
    }

    #[test]
    fn pseudo_perplexity_matches_a_naive_recomputation(
        seed in any::<[u8; 32]>(),
        concentration in 0.05f64..5.0,
        vocab in 4usize..100,
        salt in any::<u64>(),
        len in 2usize..40,
    ) {
        let model = SyntheticModel::new(Seed(seed), concentration, vocab).unwrap();
        let mut s = stream_from(b"ppl", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let ppl = pseudo_perplexity(&model, &x).unwrap();
        let mut nll = 0.0;
        for i in 0..x.len() {
            nll -= model.next_dist(&x[..i]).unwrap().probs()[x[i] as usize].ln();
        }
        let naive = (nll / x.len() as f64).exp();
        prop_assert!((ppl - naive).abs() < 1e-9 * naive.max(1.0), "{ppl} vs {naive}");
    }

    #[test]
    fn greenlist_boost_is_an_exact_softmax_over_shifted_logits(
        key in any::<[u8; 32]>(),
        vocab in 10usize..100,
        gamma in 0.1f64..0.9,
        delta in 0.0f64..4.0,
        salt in any::<u64>(),
        ctx_len in 0usize..3,
    ) {
        let mut s = stream_from(b"step", &salt.to_le_bytes());
        let logits: Vec<f64> = (0..vocab).map(|_| s.next_f64() * 20.0 - 10.0).collect();
        let ctx = tokens(ctx_len, vocab, &mut s);
        let params = KgwParams { gamma, delta, ..KgwParams::default() };
        let scheme = KgwScheme::new(WatermarkKey::from_bytes(&key).unwrap(), params, vocab).unwrap();
        let boosted = scheme.embed_step(&Logits::new(logits.clone()).unwrap(), &ctx).unwrap();
        let sum: f64 = boosted.probs().iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);

        let green = scheme.green_for_context(&ctx).unwrap();
        let shifted: Vec<f64> = logits
            .iter()
            .enumerate()
            .map(|(i, &v)| v + if green.contains(i as TokenId) { delta } else { 0.0 })
            .collect();
        let m = shifted.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = shifted.iter().map(|v| (v - m).exp()).sum();
        for (i, &p) in boosted.probs().iter().enumerate() {
            let expect = (shifted[i] - m).exp() / z;
            prop_assert!((p - expect).abs() < 1e-12, "entry {i}: {p} vs {expect}");
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn detection_is_a_pure_function_of_the_text(
        key in any::<[u8; 32]>(),
        salt in any::<u64>(),
        len in 10usize..80,
    ) {
        let vocab = 64;
        let mut s = stream_from(b"pure", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let wkey = WatermarkKey::from_bytes(&key).unwrap();
        let kgw = KgwScheme::new(wkey.clone(), KgwParams::default(), vocab).unwrap();
        prop_assert_eq!(kgw.detect(&x).unwrap(), kgw.detect(&x.clone()).unwrap());
        let uni = UnigramScheme::new(wkey, UnigramParams::default(), vocab).unwrap();
        prop_assert_eq!(uni.detect(&x).unwrap(), uni.detect(&x).unwrap());
    }

    #[test]
    fn z_scores_recompute_from_an_independent_green_count(
        key in any::<[u8; 32]>(),
        salt in any::<u64>(),
        len in 10usize..80,
        gamma in 0.2f64..0.8,
    ) {
        let vocab = 64;
        let mut s = stream_from(b"zrec", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let wkey = WatermarkKey::from_bytes(&key).unwrap();

        let params = KgwParams { gamma, ..KgwParams::default() };
        let h = params.h;
        let kgw = KgwScheme::new(wkey.clone(), params, vocab).unwrap();
        let report = kgw.detect(&x).unwrap();
        let mut g = 0usize;
        for i in h..x.len() {
            if kgw.green_for_context(&x[i - h..i]).unwrap().contains(x[i]) {
                g += 1;
            }
        }
        let l = (x.len() - h) as f64;
        prop_assert_eq!(report.green_count, Some(g));
        prop_assert_eq!(report.length, x.len() - h);
        let z = (g as f64 - gamma * l) / (gamma * (1.0 - gamma) * l).sqrt();
        prop_assert!((report.value - z).abs() < 1e-12);

        let uni =
            UnigramScheme::new(wkey, UnigramParams { gamma, ..UnigramParams::default() }, vocab)
                .unwrap();
        let report = uni.detect(&x).unwrap();
        let g = x.iter().filter(|&&t| uni.green().contains(t)).count();
        let l = x.len() as f64;
        prop_assert_eq!(report.green_count, Some(g));
        let z = (g as f64 - gamma * l) / (gamma * (1.0 - gamma) * l).sqrt();
        prop_assert!((report.value - z).abs() < 1e-12);
    }

    #[test]
    fn recoloring_one_token_moves_z_in_the_token_color_direction(
        key in any::<[u8; 32]>(),
        salt in any::<u64>(),
        len in 10usize..60,
        gamma in 0.2f64..0.8,
    ) {
        let vocab = 64;
        let mut s = stream_from(b"flip", &salt.to_le_bytes());
        let mut x = tokens(len, vocab, &mut s);
        let wkey = WatermarkKey::from_bytes(&key).unwrap();

        // Global-list scheme: recolor a uniformly chosen position.
        let uni = UnigramScheme::new(
            wkey.clone(),
            UnigramParams { gamma, ..UnigramParams::default() },
            vocab,
        )
        .unwrap();
        let green = uni.green();
        let pos = s.next_index(x.len());
        let was_green = green.contains(x[pos]);
        let replacement = (0..vocab as TokenId)
            .find(|&t| green.contains(t) != was_green)
            .expect("both colors exist");
        let before = uni.detect(&x).unwrap().value;
        let old = x[pos];
        x[pos] = replacement;
        let after = uni.detect(&x).unwrap().value;
        if was_green {
            prop_assert!(after < before, "red substitution must strictly lower z");
        } else {
            prop_assert!(after > before, "green substitution must strictly raise z");
        }
        x[pos] = old;

        // Context-seeded scheme: recolor the last token, whose membership
        // is the only thing that changes.
        let kgw = KgwScheme::new(wkey, KgwParams { gamma, ..KgwParams::default() }, vocab).unwrap();
        let h = kgw.params().h;
        let last = x.len() - 1;
        let glist = kgw.green_for_context(&x[last - h..last]).unwrap();
        let was_green = glist.contains(x[last]);
        let replacement = (0..vocab as TokenId)
            .find(|&t| glist.contains(t) != was_green)
            .expect("both colors exist");
        let before = kgw.detect(&x).unwrap().value;
        x[last] = replacement;
        let after = kgw.detect(&x).unwrap().value;
        if was_green {
            prop_assert!(after < before);
        } else {
            prop_assert!(after > before);
        }
    }

    #[test]
    fn singleton_keysets_detect_exactly_like_the_bare_key(
        key in any::<[u8; 32]>(),
        salt in any::<u64>(),
        len in 12usize..50,
        kind in 0usize..3,
    ) {
        let vocab = 48;
        let mut s = stream_from(b"one", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let instance = match kind {
            0 => SchemeInstance::Kgw(
                KgwScheme::new(WatermarkKey::from_bytes(&key).unwrap(), KgwParams::default(), vocab)
                    .unwrap(),
            ),
            1 => SchemeInstance::Unigram(
                UnigramScheme::new(
                    WatermarkKey::from_bytes(&key).unwrap(),
                    UnigramParams::default(),
                    vocab,
                )
                .unwrap(),
            ),
            _ => {
                let mut ks = stream_from(b"xkey", &key);
                SchemeInstance::Exp(ExpInstance {
                    key: ExpKey::draw(&mut ks, 16, vocab).unwrap(),
                    resamples: 19,
                    edit_penalty: 1.0,
                    p_threshold: 0.1,
                })
            }
        };
        let threshold = match instance.score_kind() {
            ScoreKind::ZScore => 4.0,
            ScoreKind::PValue => 0.1,
        };
        let single = instance.detect_with_threshold(&x, threshold).unwrap();
        let keyset = KeySet::from_instances(vec![instance]).unwrap();
        // Hand-built table: detection only reads the kind and threshold.
        let table = ThresholdTable {
            kind: keyset.score_kind(),
            keys: 1,
            threshold,
            target_fpr: 0.05,
            calibration_samples: 0,
            low_sample_warning: true,
            analytic_bound: threshold,
        };
        let multi = detect_multi(&x, &keyset, &table).unwrap();
        prop_assert_eq!(multi, single);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn nested_keysets_never_lower_the_best_score(
        salt in any::<u64>(),
        len in 12usize..60,
    ) {
        let vocab = 64;
        let mut s = stream_from(b"nest", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let keys: Vec<WatermarkKey> = (0..5u8)
            .map(|i| WatermarkKey::from_bytes(&[i + 9; 32]).unwrap())
            .collect();
        let keyset = KeySet::kgw(keys, KgwParams::default(), vocab).unwrap();
        let mut last = f64::NEG_INFINITY;
        for n in 1..=5 {
            let prefix = keyset.prefix(n).unwrap();
            let best = detect_each(&x, &prefix, 4.0)
                .unwrap()
                .into_iter()
                .map(|r| r.value)
                .fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(best >= last, "best-over-{n} score dropped: {best} < {last}");
            last = best;
        }
    }

    #[test]
    fn insertion_attacks_preserve_order_and_reconstruct_exactly(
        salt in any::<u64>(),
        len in 1usize..150,
        s_tokens in 0usize..100,
    ) {
        let vocab = 200;
        let mut s = stream_from(b"ins", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let (y, positions) = insert_random_tokens_traced(&x, s_tokens, vocab, &mut s).unwrap();
        prop_assert_eq!(y.len(), x.len() + s_tokens);
        prop_assert_eq!(positions.len(), s_tokens);
        let mut reconstructed = y.clone();
        let mut sorted = positions.clone();
        sorted.sort_unstable();
        prop_assert!(sorted.windows(2).all(|w| w[0] < w[1]), "positions distinct");
        for &p in sorted.iter().rev() {
            reconstructed.remove(p);
        }
        prop_assert_eq!(&reconstructed, &x, "removing inserted positions must restore the text");

        let lexicon = Lexicon::new("flagged", [3u32, 17, 91, 140], vocab).unwrap();
        let (y, positions) = piggyback_insert_traced(&x, &lexicon, s_tokens, &mut s).unwrap();
        for &p in &positions {
            prop_assert!(lexicon.contains(y[p]), "inserted token must come from the lexicon");
        }
    }

    #[test]
    fn summaries_survive_the_csv_round_trip(
        salt in any::<u64>(),
        goal_spoof in any::<bool>(),
        rows in prop::collection::vec(
            (
                -1.0e9f64..1.0e9,
                -1.0e9f64..1.0e9,
                any::<bool>(),
                any::<bool>(),
                0usize..100_000,
                0usize..100_000,
                prop::option::of(0.001f64..1.0e6),
            ),
            1..30,
        ),
    ) {
        let mut s = stream_from(b"csv", &salt.to_le_bytes());
        let goal = if goal_spoof { AttackGoal::Spoof } else { AttackGoal::Removal };
        let rows: Vec<ReportRow> = rows
            .into_iter()
            .enumerate()
            .map(|(i, (b, a, vb, va, qg, qd, q))| ReportRow {
                trial: i,
                // Divisions manufacture values with no short decimal form.
                score_before: b / 3.0,
                score_after: a / 7.0,
                verdict_before: vb,
                verdict_after: va,
                queries_generation: qg,
                queries_detection: qd,
                quality: q.map(|v| v / 9.0),
                wall_clock_ms: s.next_f64() * 1e4,
            })
            .collect();
        let report = Report::new("prop", goal, rows).unwrap();
        let back = Report::from_csv("prop", goal, &report.to_csv()).unwrap();
        prop_assert_eq!(summarize(&back).unwrap(), summarize(&report).unwrap());
        for (a, b) in report.rows.iter().zip(&back.rows) {
            prop_assert_eq!(a.score_before, b.score_before);
            prop_assert_eq!(a.score_after, b.score_after);
            prop_assert_eq!(a.quality, b.quality);
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn noised_detection_is_deterministic_and_vanishes_at_sigma_zero(
        key in any::<[u8; 32]>(),
        noise_key in any::<[u8; 32]>(),
        salt in any::<u64>(),
        len in 15usize..60,
    ) {
        let vocab = 32;
        let mut s = stream_from(b"dp", &salt.to_le_bytes());
        let x = tokens(len, vocab, &mut s);
        let scheme = SchemeInstance::Unigram(
            UnigramScheme::new(
                WatermarkKey::from_bytes(&key).unwrap(),
                UnigramParams::default(),
                vocab,
            )
            .unwrap(),
        );
        let nk = WatermarkKey::from_bytes(&noise_key).unwrap();
        let silent = DpParams::new(0.0, nk.clone(), DpMode::ZScore).unwrap();
        let exact = scheme.detect(&x).unwrap();
        let noised = dp_detect(&x, &scheme, &silent).unwrap();
        prop_assert_eq!(&noised.base, &exact);
        prop_assert_eq!(noised.noised_value, exact.value);
        prop_assert_eq!(noised.verdict, exact.verdict);

        let loud = DpParams::new(2.0, nk, DpMode::ZScore).unwrap();
        let a = dp_detect(&x, &scheme, &loud).unwrap();
        let b = dp_detect(&x, &scheme, &loud).unwrap();
        prop_assert_eq!(a, b);
    }
}
