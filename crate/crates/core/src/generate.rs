//! Inference: keep or regenerate each phrase according to the detector
//! profile, decoding replacements left to right with prior latents and beam search.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, QaPair, BOS_ID, EOS_ID, UNK_ID};
use crate::detector::{sample_mask_with, SignificanceProfile};
use crate::egcvae::EgCvae;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct BeamResult {
    pub tokens: Vec<usize>,
    /// Cumulative log-probability, including the end token when one was emitted.
    pub log_prob: f64,
    /// `log_prob / tokens.len()`.
    pub score: f64,
    pub finished: bool,
}

#[derive(Clone)]
struct Hypothesis<S> {
    tokens: Vec<usize>,
    log_prob: f64,
    state: S,
    finished: bool,
}

fn normalized(log_prob: f64, len: usize) -> f64 {
    log_prob / len.max(1) as f64
}

/// Beam search over `step(state, previous token) -> (state, log-probs)`.
///
/// Hypotheses are ranked by length-normalised log-probability; ties go to
/// the lexicographically smaller token sequence. `eos` may not be emitted
/// first, `banned` tokens are never emitted, and hypotheses still open at
/// `max_len` are force-finished.
pub fn beam_search<S, F>(
    init: S,
    start: usize,
    eos: Option<usize>,
    banned: &[usize],
    width: usize,
    max_len: usize,
    mut step: F,
) -> Result<BeamResult>
where
    S: Clone,
    F: FnMut(&S, usize) -> Result<(S, Vec<f64>)>,
{
    if width == 0 {
        return Err(Error::InvalidArgument("beam width must be at least 1".into()));
    }
    if max_len == 0 {
        return Err(Error::InvalidArgument("maximum length must be at least 1".into()));
    }
    let rank = |a: &Hypothesis<S>, b: &Hypothesis<S>| {
        let sa = normalized(a.log_prob, a.tokens.len());
        let sb = normalized(b.log_prob, b.tokens.len());
        sb.total_cmp(&sa).then_with(|| a.tokens.cmp(&b.tokens))
    };
    let mut live = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: init,
        finished: false,
    }];
    let mut done: Vec<Hypothesis<S>> = Vec::new();
    for t in 0..max_len {
        let mut candidates = Vec::new();
        for h in &live {
            let prev = h.tokens.last().copied().unwrap_or(start);
            let (state, log_probs) = step(&h.state, prev)?;
            for (v, &lp) in log_probs.iter().enumerate() {
                if banned.contains(&v) {
                    continue;
                }
                if Some(v) == eos {
                    if t > 0 {
                        candidates.push(Hypothesis {
                            tokens: h.tokens.clone(),
                            log_prob: h.log_prob + lp,
                            state: state.clone(),
                            finished: true,
                        });
                    }
                    continue;
                }
                let mut tokens = h.tokens.clone();
                tokens.push(v);
                candidates.push(Hypothesis {
                    tokens,
                    log_prob: h.log_prob + lp,
                    state: state.clone(),
                    finished: false,
                });
            }
        }
        candidates.sort_by(rank);
        candidates.truncate(width);
        live.clear();
        for c in candidates {
            if c.finished {
                done.push(c);
            } else {
                live.push(c);
            }
        }
        if live.is_empty() {
            break;
        }
    }
    done.extend(live);
    done.sort_by(rank);
    let best = done
        .into_iter()
        .next()
        .ok_or(Error::InvalidArgument("beam search produced no hypothesis".into()))?;
    Ok(BeamResult {
        score: normalized(best.log_prob, best.tokens.len()),
        tokens: best.tokens,
        log_prob: best.log_prob,
        finished: best.finished,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerationConfig {
    /// Candidate questions per source pair.
    pub samples: usize,
    pub beam_width: usize,
    pub max_phrase_len: usize,
    pub seed: u64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            samples: 10,
            beam_width: 5,
            max_phrase_len: 30,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Provenance {
    Kept,
    Generated,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GeneratedSample {
    pub phrases: Vec<Vec<String>>,
    pub provenance: Vec<Provenance>,
    /// Mean normalised beam score of generated phrases (0 when all are kept).
    pub score: f64,
    pub latent_seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationBatch {
    pub source_id: String,
    pub answer: Vec<String>,
    pub samples: Vec<GeneratedSample>,
}

/// One line-delimited output record.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenerationRecord {
    pub source_id: String,
    pub sample: usize,
    pub answer: String,
    pub phrases: Vec<String>,
    pub provenance: Vec<Provenance>,
    pub score: f64,
}

impl GenerationBatch {
    pub fn records(&self) -> Vec<GenerationRecord> {
        self.samples
            .iter()
            .enumerate()
            .map(|(i, s)| GenerationRecord {
                source_id: self.source_id.clone(),
                sample: i,
                answer: self.answer.join(" "),
                phrases: s.phrases.iter().map(|p| p.join(" ")).collect(),
                provenance: s.provenance.clone(),
                score: s.score,
            })
            .collect()
    }

    /// Human-readable rendering; generated phrases are bracketed.
    pub fn render_text(&self) -> String {
        let mut out = format!("# {} | answer: {}\n", self.source_id, self.answer.join(" "));
        for (i, s) in self.samples.iter().enumerate() {
            let parts: Vec<String> = s
                .phrases
                .iter()
                .zip(&s.provenance)
                .map(|(p, prov)| match prov {
                    Provenance::Kept => p.join(" "),
                    Provenance::Generated => format!("[{}]", p.join(" ")),
                })
                .collect();
            out.push_str(&format!("{i:>3} {:>8.4}  {}\n", s.score, parts.join(" , ")));
        }
        out
    }
}

/// Deterministic per-pair seed, independent of processing order.
pub fn pair_seed(seed: u64, id: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325 ^ seed;
    for b in id.bytes() {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

/// Decodes one phrase at position `k` of `phrases` from a prior latent drawn with `rng`.
pub fn generate_phrase<R: Rng + ?Sized>(
    model: &EgCvae,
    table: &EmbeddingTable,
    phrases: &[Vec<usize>],
    answer: &[f64],
    k: usize,
    config: &GenerationConfig,
    rng: &mut R,
) -> Result<BeamResult> {
    let prior = model.prior_gaussian(table, phrases, answer, k)?;
    let eps: Vec<f64> = (0..prior.dim()).map(|_| rng.sample(StandardNormal)).collect();
    let z = prior.reparameterize(&eps)?;
    let init = model.decoder_init(table, phrases, answer, k, &z)?;
    beam_search(
        init.state.clone(),
        BOS_ID,
        Some(EOS_ID),
        &[BOS_ID, UNK_ID],
        config.beam_width,
        config.max_phrase_len,
        |state, prev| model.decoder_step(table, &init, state, prev),
    )
}

pub fn generate_pair(
    model: &EgCvae,
    table: &EmbeddingTable,
    pair: &QaPair,
    profile: &SignificanceProfile,
    config: &GenerationConfig,
) -> Result<GenerationBatch> {
    if config.samples == 0 {
        return Err(Error::InvalidArgument("at least one sample per pair is required".into()));
    }
    if profile.len() != pair.num_phrases() {
        return Err(Error::shape(
            "generate_pair",
            format!("profile has {} scores for {} phrases", profile.len(), pair.num_phrases()),
        ));
    }
    let vocab = table.vocab();
    let original: Vec<Vec<usize>> = pair.phrases.iter().map(|p| vocab.encode(&p.tokens)).collect();
    let answer = table.mean_vector(&pair.answer);
    let base = pair_seed(config.seed, &pair.id);
    let mut samples = Vec::with_capacity(config.samples);
    for s in 0..config.samples {
        let latent_seed = base.wrapping_add(s as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(latent_seed);
        let replace = sample_mask_with(profile, &mut rng);
        let mut current = original.clone();
        let mut phrases: Vec<Vec<String>> = pair.phrases.iter().map(|p| p.tokens.clone()).collect();
        let mut provenance = vec![Provenance::Kept; pair.num_phrases()];
        let mut scores = Vec::new();
        for k in 0..pair.num_phrases() {
            if !replace[k] {
                continue;
            }
            let best = generate_phrase(model, table, &current, &answer, k, config, &mut rng)?;
            phrases[k] = vocab.decode(&best.tokens);
            current[k] = best.tokens;
            provenance[k] = Provenance::Generated;
            scores.push(best.score);
        }
        let score = if scores.is_empty() {
            0.0
        } else {
            scores.iter().sum::<f64>() / scores.len() as f64
        };
        samples.push(GeneratedSample {
            phrases,
            provenance,
            score,
            latent_seed,
        });
    }
    Ok(GenerationBatch {
        source_id: pair.id.clone(),
        answer: pair.answer.clone(),
        samples,
    })
}
