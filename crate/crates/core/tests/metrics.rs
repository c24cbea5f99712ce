use proptest::prelude::*;
use qagen_core::corpus::{EmbeddingTable, Vocab};
use qagen_core::metrics::{
    aggregate_scores, bleu3_smoothed, bleu_agg, bow_similarity, distinct, evaluate, BowMode, DistinctScope, EvalItem,
};
use qagen_core::numerics::cosine;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(String::from).collect()
}

fn table() -> EmbeddingTable {
    let words: Vec<String> = "a b c d e f g h".split(' ').map(String::from).collect();
    EmbeddingTable::random(Vocab::from(words), 6, &mut ChaCha8Rng::seed_from_u64(17))
}

#[test]
fn bleu_zero_unigram_overlap_is_zero() {
    assert_eq!(bleu3_smoothed(&toks("a b c"), &toks("d e f g")), 0.0);
    assert_eq!(bleu3_smoothed::<String, String>(&[], &toks("a")), 0.0);
}

#[test]
fn bleu_pure_smoothing_floor_by_hand() {
    // every unigram matches, no bigram or trigram does
    let c = toks("a b c d");
    let r = toks("d c b a");
    let expected = (1.0f64 * (0.0 + 1.0) / (3.0 + 1.0) * (0.0 + 1.0) / (2.0 + 1.0)).powf(1.0 / 3.0);
    assert!((bleu3_smoothed(&c, &r) - expected).abs() < 1e-15);
}

#[test]
fn bleu_brevity_penalty_by_hand() {
    let c = toks("a b");
    let r = toks("a b c d");
    // p1 = 1, p2 = 2/2, p3 = (0+1)/(0+1), bp = exp(1 - 4/2)
    assert_eq!(bleu3_smoothed(&c, &r), (-1.0f64).exp());
}

#[test]
fn bleu_aggregation_cases() {
    let agg = aggregate_scores(&[0.2, 0.8]).unwrap();
    assert!((agg.precision - 0.5).abs() < 1e-15);
    assert_eq!(agg.recall, 0.8);
    assert!((agg.f1 - 2.0 * 0.5 * 0.8 / 1.3).abs() < 1e-15);
    let one = aggregate_scores(&[0.37]).unwrap();
    assert_eq!(one.precision, one.recall);
    let dup = aggregate_scores(&[0.2, 0.8, 0.8]).unwrap();
    assert!(dup.precision > agg.precision);
    assert_eq!(dup.recall, agg.recall);
    let r = toks("a b c");
    let s = bleu_agg(&[toks("a b c"), toks("a b d")], &r).unwrap();
    assert_eq!(s.recall, 1.0);
}

#[test]
fn bow_reduces_to_cosine_for_single_words() {
    let t = table();
    let direct = cosine(t.token_vector("a"), t.token_vector("e"));
    for mode in [BowMode::Average, BowMode::Extreme, BowMode::Greedy] {
        assert!((bow_similarity(&["a"], &["e"], &t, mode) - direct).abs() < 1e-15);
        assert!((bow_similarity(&["a", "b"], &["a", "b"], &t, mode) - 1.0).abs() < 1e-12);
    }
}

#[test]
fn greedy_matches_all_pairs_oracle() {
    let t = table();
    let a = ["a", "c", "f"];
    let b = ["b", "c", "g", "h"];
    let mut ab = 0.0;
    for x in a {
        let mut best = f64::NEG_INFINITY;
        for y in b {
            best = best.max(cosine(t.token_vector(x), t.token_vector(y)));
        }
        ab += best;
    }
    let mut ba = 0.0;
    for y in b {
        let mut best = f64::NEG_INFINITY;
        for x in a {
            best = best.max(cosine(t.token_vector(x), t.token_vector(y)));
        }
        ba += best;
    }
    let oracle = 0.5 * (ab / 3.0 + ba / 4.0);
    assert!((bow_similarity(&a, &b, &t, BowMode::Greedy) - oracle).abs() < 1e-15);
    assert_eq!(
        bow_similarity(&a, &b, &t, BowMode::Greedy),
        bow_similarity(&b, &a, &t, BowMode::Greedy)
    );
}

#[test]
fn extreme_keeps_signed_largest_magnitude() {
    let vocab = Vocab::from(vec!["p".to_string(), "q".to_string()]);
    let mut data = vec![0.0; vocab.len() * 2];
    let p = vocab.id("p");
    let q = vocab.id("q");
    data[p * 2..p * 2 + 2].copy_from_slice(&[0.5, -3.0]);
    data[q * 2..q * 2 + 2].copy_from_slice(&[-2.0, 1.0]);
    let t = EmbeddingTable::new(vocab, 2, data).unwrap();
    // pooled extreme of (p, q) is (-2, -3)
    let expected = cosine(&[-2.0, -3.0], &[0.5, -3.0]);
    assert!((bow_similarity(&["p", "q"], &["p"], &t, BowMode::Extreme) - expected).abs() < 1e-15);
    assert_eq!(bow_similarity(&["<unk>"], &["p"], &t, BowMode::Average), 0.0);
}

#[test]
fn distinct_hand_cases() {
    assert_eq!(distinct(&[toks("a b c")], 1, DistinctScope::Intra).unwrap(), 1.0);
    assert_eq!(distinct(&[toks("a a a")], 1, DistinctScope::Intra).unwrap(), 1.0 / 3.0);
    let two = [toks("a b"), toks("a b")];
    assert_eq!(distinct(&two, 1, DistinctScope::Intra).unwrap(), 1.0);
    assert_eq!(distinct(&two, 1, DistinctScope::Inter).unwrap(), 0.5);
    // the too-short sample is skipped rather than averaged in as zero
    assert_eq!(distinct(&[toks("a"), toks("a b a b")], 2, DistinctScope::Intra).unwrap(), 2.0 / 3.0);
    assert_eq!(distinct(&[toks("a")], 2, DistinctScope::Inter).unwrap(), 0.0);
    assert!(distinct(&two, 0, DistinctScope::Inter).is_err());
}

#[test]
fn self_evaluation_is_perfect_bleu() {
    let reference = vec![toks("a b c"), toks("d e")];
    let item = EvalItem {
        reference: reference.clone(),
        samples: vec![reference.clone(), reference],
    };
    let r = evaluate(&[item], &table()).unwrap();
    assert_eq!(r.bleu_f1, 1.0);
    assert!((r.bow_average - 1.0).abs() < 1e-12);
    assert!(r.in_unit_range());
}

fn sentence() -> impl Strategy<Value = Vec<String>> {
    prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]), 1..7)
        .prop_map(|v| v.into_iter().map(String::from).collect())
}

proptest! {
    #[test]
    fn bleu_in_unit_range_and_reflexive(c in sentence(), r in sentence()) {
        let s = bleu3_smoothed(&c, &r);
        prop_assert!((0.0..=1.0).contains(&s));
        prop_assert!((bleu3_smoothed(&r, &r) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_dominates_precision(samples in prop::collection::vec(sentence(), 1..6), r in sentence()) {
        let agg = bleu_agg(&samples, &r).unwrap();
        prop_assert!(agg.recall >= agg.precision);
        prop_assert!((0.0..=1.0).contains(&agg.f1));
    }

    #[test]
    fn distinct_in_unit_range_and_duplication(samples in prop::collection::vec(sentence(), 1..5), n in 1usize..3) {
        let intra = distinct(&samples, n, DistinctScope::Intra).unwrap();
        let inter = distinct(&samples, n, DistinctScope::Inter).unwrap();
        prop_assert!((0.0..=1.0).contains(&intra) && (0.0..=1.0).contains(&inter));
        let doubled: Vec<Vec<String>> = samples.iter().chain(&samples).cloned().collect();
        prop_assert!((distinct(&doubled, n, DistinctScope::Intra).unwrap() - intra).abs() < 1e-12);
        let inter2 = distinct(&doubled, n, DistinctScope::Inter).unwrap();
        prop_assert!((inter2 - inter / 2.0).abs() < 1e-12);
    }

    #[test]
    fn bow_in_range(c in sentence(), r in sentence()) {
        let t = table();
        for mode in [BowMode::Average, BowMode::Extreme, BowMode::Greedy] {
            let s = bow_similarity(&c, &r, &t, mode);
            prop_assert!((-1.0..=1.0).contains(&s));
        }
    }
}
