//! Deterministic synthetic QA corpus with planted key phrases.
//!
//! Each answer owns a few key phrases (an entity plus a fixed modifier). Key
//! phrases are written into that answer's material documents with
//! probability `key_cooccurrence`; distractor phrases come from a shared pool
//! and land in answer documents only with probability
//! `distractor_cooccurrence`. Every entity token is unique to its entity, so
//! the dictionary-projected word type is a function of the token alone.

use std::collections::BTreeSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EntityDictionary, MaterialCorpus, Phrase, QaPair};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub answers: usize,
    pub pairs_per_answer: usize,
    pub key_phrases_per_answer: usize,
    pub distractor_entities: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub docs_per_answer: usize,
    pub distractor_docs: usize,
    pub key_cooccurrence: f64,
    pub distractor_cooccurrence: f64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            answers: 10,
            pairs_per_answer: 20,
            key_phrases_per_answer: 2,
            distractor_entities: 24,
            min_phrases: 3,
            max_phrases: 5,
            docs_per_answer: 12,
            distractor_docs: 60,
            key_cooccurrence: 1.0,
            distractor_cooccurrence: 0.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthCorpus {
    pub pairs: Vec<QaPair>,
    pub materials: MaterialCorpus,
    pub dictionary: EntityDictionary,
    /// `key_flags[i][k]` marks phrase `k` of pair `i` as a planted key phrase.
    pub key_flags: Vec<Vec<bool>>,
}

const ENTITY_TYPES: &[&str] = &["symptom", "sign", "examination", "drug"];

const MODIFIERS: &[&[&str]] = &[
    &["positive"],
    &["negative"],
    &["elevated"],
    &["decreased"],
    &["normal"],
    &["absent"],
    &["mild"],
    &["persistent"],
];

const FILLERS: &[&[&str]] = &[
    &["the", "patient", "presented", "with"],
    &["history", "of"],
    &["was", "observed"],
    &["on", "examination"],
    &["and"],
    &["clinical", "findings", "include"],
    &["reported"],
    &["in", "the", "ward"],
];

const BACKGROUND_FILLERS: &[&[&str]] = &[
    &["routine", "screening", "recorded"],
    &["follow", "up", "visit"],
    &["as", "noted", "previously"],
    &["outpatient", "note"],
    &["per", "protocol"],
    &["seen", "at", "clinic"],
];

fn strings(words: &[&str]) -> Vec<String> {
    words.iter().map(|w| w.to_string()).collect()
}

fn pseudo_word(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> String {
    const CONS: &[u8] = b"bdfgklmnprstvz";
    const VOWELS: &[u8] = b"aeiou";
    loop {
        let syllables = rng.random_range(2..=3);
        let mut w = String::new();
        for _ in 0..syllables {
            w.push(*CONS.choose(rng).expect("non-empty") as char);
            w.push(*VOWELS.choose(rng).expect("non-empty") as char);
        }
        if used.insert(w.clone()) {
            return w;
        }
    }
}

fn surface(rng: &mut ChaCha8Rng, used: &mut BTreeSet<String>) -> Vec<String> {
    let n = rng.random_range(1..=2);
    (0..n).map(|_| pseudo_word(rng, used)).collect()
}

pub fn synth_corpus(spec: &SynthSpec, seed: u64) -> Result<SynthCorpus> {
    if spec.answers == 0 || spec.pairs_per_answer == 0 {
        return Err(Error::InvalidArgument("synthetic corpus needs at least one answer and pair".into()));
    }
    if spec.min_phrases < 2 || spec.max_phrases < spec.min_phrases {
        return Err(Error::InvalidArgument("phrase counts must satisfy 2 <= min <= max".into()));
    }
    if spec.key_phrases_per_answer == 0 || spec.distractor_entities < spec.max_phrases {
        return Err(Error::InvalidArgument(
            "need at least one key phrase per answer and max_phrases distractor entities".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut used: BTreeSet<String> = MODIFIERS
        .iter()
        .chain(FILLERS)
        .chain(BACKGROUND_FILLERS)
        .flat_map(|ws| ws.iter().map(|w| w.to_string()))
        .collect();
    let mut dict = EntityDictionary::new();
    dict.add_type("disease")?;
    for t in ENTITY_TYPES {
        dict.add_type(t)?;
    }

    let mut answers = Vec::new();
    let mut key_phrases: Vec<Vec<Vec<String>>> = Vec::new();
    for _ in 0..spec.answers {
        let ans = vec![pseudo_word(&mut rng, &mut used)];
        dict.add(ans.clone(), "disease")?;
        answers.push(ans);
        let mut keys = Vec::new();
        for _ in 0..spec.key_phrases_per_answer {
            let ent = surface(&mut rng, &mut used);
            dict.add(ent.clone(), ENTITY_TYPES[rng.random_range(0..3)])?;
            let mut phrase = ent;
            phrase.extend(strings(MODIFIERS.choose(&mut rng).expect("non-empty")));
            keys.push(phrase);
        }
        key_phrases.push(keys);
    }
    let distractors: Vec<Vec<String>> = (0..spec.distractor_entities)
        .map(|_| {
            let ent = surface(&mut rng, &mut used);
            dict.add(ent.clone(), ENTITY_TYPES.choose(&mut rng).expect("non-empty"))?;
            Ok(ent)
        })
        .collect::<Result<_>>()?;
    let distractor_phrase = |rng: &mut ChaCha8Rng, ent: &[String]| -> Vec<String> {
        let mut p = ent.to_vec();
        p.extend(strings(MODIFIERS.choose(rng).expect("non-empty")));
        p
    };

    let mut pairs = Vec::new();
    let mut key_flags = Vec::new();
    for (a, ans) in answers.iter().enumerate() {
        for j in 0..spec.pairs_per_answer {
            let n = rng.random_range(spec.min_phrases..=spec.max_phrases);
            let n_keys = rng.random_range(1..=spec.key_phrases_per_answer.min(n - 1));
            let mut slots: Vec<(Vec<String>, bool)> = key_phrases[a]
                .choose_multiple(&mut rng, n_keys)
                .map(|p| (p.clone(), true))
                .collect();
            for ent in distractors.choose_multiple(&mut rng, n - n_keys) {
                slots.push((distractor_phrase(&mut rng, ent), false));
            }
            slots.shuffle(&mut rng);
            let flags = slots.iter().map(|(_, k)| *k).collect();
            let phrases = slots
                .into_iter()
                .map(|(p, _)| Phrase::new(p))
                .collect::<Result<Vec<_>>>()?;
            pairs.push(QaPair::new(format!("a{a:02}-q{j:03}"), ans.clone(), phrases)?);
            key_flags.push(flags);
        }
    }

    let filler = |rng: &mut ChaCha8Rng| strings(FILLERS.choose(rng).expect("non-empty"));
    let mut documents = Vec::new();
    for (a, ans) in answers.iter().enumerate() {
        for _ in 0..spec.docs_per_answer {
            let mut segs = vec![ans.clone()];
            for k in &key_phrases[a] {
                if rng.random_bool(spec.key_cooccurrence.clamp(0.0, 1.0)) {
                    segs.push(k.clone());
                }
            }
            if rng.random_bool(spec.distractor_cooccurrence.clamp(0.0, 1.0)) {
                let ent = distractors.choose(&mut rng).expect("non-empty");
                segs.push(distractor_phrase(&mut rng, ent));
            }
            for _ in 0..rng.random_range(2..=3) {
                segs.push(filler(&mut rng));
            }
            segs.shuffle(&mut rng);
            documents.push(segs.concat());
        }
    }
    for _ in 0..spec.distractor_docs {
        let k = rng.random_range(2..=3);
        let chosen: Vec<Vec<String>> = distractors.choose_multiple(&mut rng, k).cloned().collect();
        let mut segs: Vec<Vec<String>> = chosen.iter().map(|e| distractor_phrase(&mut rng, e)).collect();
        for _ in 0..2 {
            segs.push(strings(BACKGROUND_FILLERS.choose(&mut rng).expect("non-empty")));
        }
        segs.shuffle(&mut rng);
        documents.push(segs.concat());
    }

    Ok(SynthCorpus {
        pairs,
        materials: MaterialCorpus::new(documents),
        dictionary: dict,
        key_flags,
    })
}
