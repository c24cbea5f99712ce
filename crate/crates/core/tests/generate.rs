mod common;

use common::*;
use proptest::prelude::*;
use qagen_core::corpus::{Phrase, QaPair};
use qagen_core::detector::SignificanceProfile;
use qagen_core::generate::{beam_search, generate_pair, GenerationConfig, Provenance};

/// Position- and history-dependent toy distribution over `v` tokens.
fn toy_log_probs(prefix: &[usize], v: usize, salt: u64) -> Vec<f64> {
    let logits: Vec<f64> = (0..v)
        .map(|t| {
            let mut h = salt ^ 0x9e37_79b9_7f4a_7c15;
            for &p in prefix.iter().chain(std::iter::once(&t)) {
                h = (h ^ p as u64).wrapping_mul(0x0100_0000_01b3);
            }
            ((h >> 11) as f64 / (1u64 << 53) as f64) * 4.0 - 2.0
        })
        .collect();
    log_softmax(&logits)
}

fn run_toy(v: usize, salt: u64, eos: Option<usize>, width: usize, max_len: usize) -> qagen_core::generate::BeamResult {
    beam_search(Vec::<usize>::new(), 99, eos, &[], width, max_len, |prefix, prev| {
        let mut next = prefix.clone();
        if prev != 99 {
            next.push(prev);
        }
        let lp = toy_log_probs(&next, v, salt);
        Ok((next, lp))
    })
    .unwrap()
}

/// Every sequence of at most `max_len` tokens, with its normalised score.
fn exhaustive(v: usize, salt: u64, eos: Option<usize>, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(f64, Vec<usize>)> = None;
    let mut consider = |score: f64, toks: &[usize]| {
        let better = match &best {
            None => true,
            Some((s, t)) => score > *s || (score == *s && toks < t.as_slice()),
        };
        if better {
            best = Some((score, toks.to_vec()));
        }
    };
    let mut frontier: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    for t in 0..max_len {
        let mut next = Vec::new();
        for (toks, lp) in &frontier {
            let dist = toy_log_probs(toks, v, salt);
            for (w, &l) in dist.iter().enumerate() {
                if Some(w) == eos {
                    if t > 0 {
                        consider((lp + l) / toks.len() as f64, toks);
                    }
                    continue;
                }
                let mut n = toks.clone();
                n.push(w);
                next.push((n, lp + l));
            }
        }
        frontier = next;
    }
    for (toks, lp) in &frontier {
        consider(lp / toks.len() as f64, toks);
    }
    let (s, t) = best.unwrap();
    (t, s)
}

#[test]
fn full_width_beam_is_exhaustive_on_fixed_length() {
    for salt in 0..20 {
        let r = run_toy(4, salt, None, 4, 2);
        let (t, s) = exhaustive(4, salt, None, 2);
        assert_eq!(r.tokens, t);
        assert!((r.score - s).abs() < 1e-12);
    }
}

#[test]
fn wide_beam_is_exhaustive_with_end_token() {
    for salt in 0..20 {
        let r = run_toy(4, salt, Some(0), 64, 3);
        let (t, s) = exhaustive(4, salt, Some(0), 3);
        assert_eq!(r.tokens, t, "salt {salt}");
        assert!((r.score - s).abs() < 1e-12);
    }
}

#[test]
fn beam_argument_errors_and_limits() {
    let step = |s: &(), _: usize| Ok((*s, vec![0.0f64.ln(), 0.5f64.ln(), 0.5f64.ln()]));
    assert!(beam_search((), 0, None, &[], 0, 3, step).is_err());
    assert!(beam_search((), 0, None, &[], 2, 0, step).is_err());
    let r = beam_search((), 0, Some(0), &[], 2, 3, step).unwrap();
    assert_eq!(r.tokens.len(), 3);
    assert!(!r.finished);
    // ties go to the lexicographically smallest sequence
    assert_eq!(r.tokens, vec![1, 1, 1]);
    let banned = beam_search((), 0, None, &[1], 2, 2, step).unwrap();
    assert_eq!(banned.tokens, vec![2, 2]);
}

#[test]
fn end_token_is_never_first() {
    let step = |s: &(), _: usize| Ok((*s, log_softmax(&[10.0, 0.0, -1.0])));
    let r = beam_search((), 9, Some(0), &[], 3, 5, step).unwrap();
    assert!(!r.tokens.is_empty());
    assert!(!r.tokens.contains(&0));
}

fn micro_qa() -> QaPair {
    let p = |s: &str| Phrase::parse(s).unwrap();
    QaPair::new("q1", vec!["fever".into()], vec![p("fever cough"), p("cough"), p("cough fever")]).unwrap()
}

#[test]
fn keeping_everything_reproduces_the_source() {
    let table = micro_table(1);
    let model = micro_model(&table, &micro_config(), 2);
    let pair = micro_qa();
    let cfg = GenerationConfig {
        samples: 4,
        ..GenerationConfig::default()
    };
    let batch = generate_pair(&model, &table, &pair, &SignificanceProfile::constant(3, 1.0), &cfg).unwrap();
    for s in &batch.samples {
        assert!(s.provenance.iter().all(|&p| p == Provenance::Kept));
        let orig: Vec<Vec<String>> = pair.phrases.iter().map(|p| p.tokens.clone()).collect();
        assert_eq!(s.phrases, orig);
        assert_eq!(s.score, 0.0);
    }
}

#[test]
fn replacing_everything_is_reproducible_and_well_formed() {
    let table = micro_table(3);
    let model = micro_model(&table, &micro_config(), 4);
    let pair = micro_qa();
    for width in [1, 3] {
        let cfg = GenerationConfig {
            samples: 5,
            beam_width: width,
            max_phrase_len: 4,
            seed: 11,
        };
        let profile = SignificanceProfile::constant(3, 0.0);
        let a = generate_pair(&model, &table, &pair, &profile, &cfg).unwrap();
        let b = generate_pair(&model, &table, &pair, &profile, &cfg).unwrap();
        assert_eq!(a, b);
        for s in &a.samples {
            assert!(s.provenance.iter().all(|&p| p == Provenance::Generated));
            for ph in &s.phrases {
                assert!((1..=4).contains(&ph.len()));
                assert!(ph.iter().all(|w| w == "fever" || w == "cough"));
            }
        }
        let recs = a.records();
        assert_eq!(recs.len(), 5);
        assert!(recs.iter().all(|r| r.source_id == "q1" && r.answer == "fever"));
        assert!(a.render_text().contains('['));
    }
    let cfg = GenerationConfig::default();
    assert!(generate_pair(&model, &table, &pair, &SignificanceProfile::uniform(2), &cfg).is_err());
    let none = GenerationConfig {
        samples: 0,
        ..cfg
    };
    assert!(generate_pair(&model, &table, &pair, &SignificanceProfile::uniform(3), &none).is_err());
}

proptest! {
    #[test]
    fn provenance_matches_changes(scores in prop::collection::vec(0.0f64..=1.0, 3), seed in 0u64..1000) {
        let table = micro_table(5);
        let model = micro_model(&table, &micro_config(), 6);
        let pair = micro_qa();
        let cfg = GenerationConfig { samples: 3, beam_width: 2, max_phrase_len: 3, seed };
        let profile = SignificanceProfile { raw: scores.clone(), normalized: scores };
        let batch = generate_pair(&model, &table, &pair, &profile, &cfg).unwrap();
        for s in &batch.samples {
            prop_assert_eq!(s.phrases.len(), 3);
            for (k, prov) in s.provenance.iter().enumerate() {
                if *prov == Provenance::Kept {
                    prop_assert_eq!(&s.phrases[k], &pair.phrases[k].tokens);
                }
            }
        }
    }
}
