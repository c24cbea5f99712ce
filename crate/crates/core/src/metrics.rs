//! Automatic evaluation: smoothed BLEU-3, BOW-embedding similarities and distinct-n.
//!
//! Evaluation is phrase-level. For every source pair and phrase position, the
//! N candidate phrases at that position are scored against the reference
//! phrase; results are averaged over all positions of all pairs.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::corpus::EmbeddingTable;
use crate::numerics::cosine;
use crate::{Error, Result};

pub const BLEU_ORDER: usize = 3;

fn ngram_counts<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Sentence BLEU with n = 1..3; orders above one use add-one smoothing.
/// Empty candidate or reference scores 0.
pub fn bleu3_smoothed<S: AsRef<str>, T: AsRef<str>>(candidate: &[S], reference: &[T]) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let mut log_sum = 0.0;
    for n in 1..=BLEU_ORDER {
        let cand = ngram_counts(candidate, n);
        let refc = ngram_counts(reference, n);
        let total: usize = cand.values().sum();
        let clipped: usize = cand
            .iter()
            .map(|(g, &c)| c.min(refc.get(g).copied().unwrap_or(0)))
            .sum();
        let p = if n == 1 {
            clipped as f64 / total as f64
        } else {
            (clipped as f64 + 1.0) / (total as f64 + 1.0)
        };
        if p == 0.0 {
            return 0.0;
        }
        log_sum += p.ln();
    }
    let c = candidate.len() as f64;
    let r = reference.len() as f64;
    let bp = (1.0 - r / c).exp().min(1.0);
    bp * (log_sum / BLEU_ORDER as f64).exp()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuAgg {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

pub fn harmonic_mean(a: f64, b: f64) -> f64 {
    if a + b == 0.0 {
        0.0
    } else {
        2.0 * a * b / (a + b)
    }
}

/// Mean (precision) and max (recall) of per-sample scores.
pub fn aggregate_scores(scores: &[f64]) -> Result<BleuAgg> {
    if scores.is_empty() {
        return Err(Error::EmptyInput("BLEU samples"));
    }
    let precision = scores.iter().sum::<f64>() / scores.len() as f64;
    let recall = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    Ok(BleuAgg {
        precision,
        recall,
        f1: harmonic_mean(precision, recall),
    })
}

pub fn bleu_agg<S: AsRef<str>, T: AsRef<str>>(samples: &[Vec<S>], reference: &[T]) -> Result<BleuAgg> {
    let scores: Vec<f64> = samples.iter().map(|s| bleu3_smoothed(s, reference)).collect();
    aggregate_scores(&scores)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BowMode {
    Average,
    Extreme,
    Greedy,
}

fn vectors<'a, S: AsRef<str>>(tokens: &[S], table: &'a EmbeddingTable) -> Vec<&'a [f64]> {
    tokens.iter().map(|t| table.token_vector(t.as_ref())).collect()
}

fn mean_of(vs: &[&[f64]], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for v in vs {
        for (o, x) in out.iter_mut().zip(v.iter()) {
            *o += x;
        }
    }
    out.iter_mut().for_each(|o| *o /= vs.len() as f64);
    out
}

/// Per dimension, the value of largest magnitude (sign kept; first wins ties).
fn extreme_of(vs: &[&[f64]], d: usize) -> Vec<f64> {
    (0..d)
        .map(|j| {
            vs.iter()
                .map(|v| v[j])
                .fold(0.0, |best: f64, x| if x.abs() > best.abs() { x } else { best })
        })
        .collect()
}

fn greedy_direction(a: &[&[f64]], b: &[&[f64]]) -> f64 {
    a.iter()
        .map(|u| b.iter().map(|v| cosine(u, v)).fold(f64::NEG_INFINITY, f64::max))
        .sum::<f64>()
        / a.len() as f64
}

/// Embedding similarity of two token sequences; empty input scores 0.
pub fn bow_similarity<S: AsRef<str>, T: AsRef<str>>(
    candidate: &[S],
    reference: &[T],
    table: &EmbeddingTable,
    mode: BowMode,
) -> f64 {
    if candidate.is_empty() || reference.is_empty() {
        return 0.0;
    }
    let a = vectors(candidate, table);
    let b = vectors(reference, table);
    let d = table.dim();
    match mode {
        BowMode::Average => cosine(&mean_of(&a, d), &mean_of(&b, d)),
        BowMode::Extreme => cosine(&extreme_of(&a, d), &extreme_of(&b, d)),
        BowMode::Greedy => 0.5 * (greedy_direction(&a, &b) + greedy_direction(&b, &a)),
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistinctScope {
    Intra,
    Inter,
}

/// Unique over total n-grams; `Intra` averages per sample (skipping samples
/// with no n-grams), `Inter` pools all samples. No n-grams at all scores 0.
pub fn distinct<S: AsRef<str>>(samples: &[Vec<S>], n: usize, scope: DistinctScope) -> Result<f64> {
    if n == 0 {
        return Err(Error::InvalidArgument("distinct-n needs n >= 1".into()));
    }
    match scope {
        DistinctScope::Intra => {
            let ratios: Vec<f64> = samples
                .iter()
                .filter(|s| s.len() >= n)
                .map(|s| {
                    let grams: HashSet<Vec<&str>> =
                        s.windows(n).map(|w| w.iter().map(AsRef::as_ref).collect()).collect();
                    grams.len() as f64 / (s.len() - n + 1) as f64
                })
                .collect();
            if ratios.is_empty() {
                Ok(0.0)
            } else {
                Ok(ratios.iter().sum::<f64>() / ratios.len() as f64)
            }
        }
        DistinctScope::Inter => {
            let mut unique: HashSet<Vec<&str>> = HashSet::new();
            let mut total = 0usize;
            for s in samples.iter().filter(|s| s.len() >= n) {
                for w in s.windows(n) {
                    unique.insert(w.iter().map(AsRef::as_ref).collect());
                    total += 1;
                }
            }
            Ok(if total == 0 { 0.0 } else { unique.len() as f64 / total as f64 })
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub bleu_precision: f64,
    pub bleu_recall: f64,
    pub bleu_f1: f64,
    pub bow_average: f64,
    pub bow_extreme: f64,
    pub bow_greedy: f64,
    pub intra_dist1: f64,
    pub intra_dist2: f64,
    pub inter_dist1: f64,
    pub inter_dist2: f64,
}

impl MetricReport {
    pub fn values(&self) -> [(&'static str, f64); 10] {
        [
            ("bleu_precision", self.bleu_precision),
            ("bleu_recall", self.bleu_recall),
            ("bleu_f1", self.bleu_f1),
            ("bow_average", self.bow_average),
            ("bow_extreme", self.bow_extreme),
            ("bow_greedy", self.bow_greedy),
            ("intra_dist1", self.intra_dist1),
            ("intra_dist2", self.intra_dist2),
            ("inter_dist1", self.inter_dist1),
            ("inter_dist2", self.inter_dist2),
        ]
    }

    pub fn in_unit_range(&self) -> bool {
        self.values().iter().all(|(_, v)| (0.0..=1.0).contains(v))
    }
}

/// One source pair: reference phrases and N candidate questions, each split
/// into the same number of phrases.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalItem {
    pub reference: Vec<Vec<String>>,
    pub samples: Vec<Vec<Vec<String>>>,
}

/// Phrase-level statistics of one (pair, position) group.
#[derive(Clone, Copy, Debug, PartialEq)]
struct PositionScores {
    bleu: BleuAgg,
    bow: [f64; 3],
    intra: [f64; 2],
    inter: [f64; 2],
}

fn score_position(candidates: &[&Vec<String>], reference: &[String], table: &EmbeddingTable) -> Result<PositionScores> {
    let owned: Vec<Vec<String>> = candidates.iter().map(|c| (*c).clone()).collect();
    let bleu = bleu_agg(&owned, reference)?;
    let n = owned.len() as f64;
    let mut bow = [0.0; 3];
    for (slot, mode) in bow.iter_mut().zip([BowMode::Average, BowMode::Extreme, BowMode::Greedy]) {
        *slot = owned.iter().map(|c| bow_similarity(c, reference, table, mode)).sum::<f64>() / n;
    }
    Ok(PositionScores {
        bleu,
        bow,
        intra: [distinct(&owned, 1, DistinctScope::Intra)?, distinct(&owned, 2, DistinctScope::Intra)?],
        inter: [distinct(&owned, 1, DistinctScope::Inter)?, distinct(&owned, 2, DistinctScope::Inter)?],
    })
}

/// Scores every (pair, position) group and averages. F1 is the harmonic mean
/// of the averaged precision and recall.
pub fn evaluate(items: &[EvalItem], table: &EmbeddingTable) -> Result<MetricReport> {
    let mut groups = Vec::new();
    for item in items {
        if item.samples.is_empty() {
            return Err(Error::EmptyInput("candidate samples"));
        }
        for (s, sample) in item.samples.iter().enumerate() {
            if sample.len() != item.reference.len() {
                return Err(Error::InvalidArgument(format!(
                    "sample {s} has {} phrases, reference has {}",
                    sample.len(),
                    item.reference.len()
                )));
            }
        }
        for (k, reference) in item.reference.iter().enumerate() {
            let candidates: Vec<&Vec<String>> = item.samples.iter().map(|s| &s[k]).collect();
            groups.push(score_position(&candidates, reference, table)?);
        }
    }
    if groups.is_empty() {
        return Err(Error::EmptyInput("evaluation items"));
    }
    let m = groups.len() as f64;
    let mean = |f: &dyn Fn(&PositionScores) -> f64| groups.iter().map(f).sum::<f64>() / m;
    let bleu_precision = mean(&|g| g.bleu.precision);
    let bleu_recall = mean(&|g| g.bleu.recall);
    Ok(MetricReport {
        bleu_precision,
        bleu_recall,
        bleu_f1: harmonic_mean(bleu_precision, bleu_recall),
        bow_average: mean(&|g| g.bow[0]),
        bow_extreme: mean(&|g| g.bow[1]),
        bow_greedy: mean(&|g| g.bow[2]),
        intra_dist1: mean(&|g| g.intra[0]),
        intra_dist2: mean(&|g| g.intra[1]),
        inter_dist1: mean(&|g| g.inter[0]),
        inter_dist2: mean(&|g| g.inter[1]),
    })
}

/// Plain-text table, one row per named report.
pub fn format_table(rows: &[(String, MetricReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!("{:<width$}", "method");
    for (name, _) in MetricReport::default().values() {
        out.push_str(&format!(" {:>14}", name));
    }
    out.push('\n');
    for (name, report) in rows {
        out.push_str(&format!("{name:<width$}"));
        for (_, v) in report.values() {
            out.push_str(&format!(" {v:>14.4}"));
        }
        out.push('\n');
    }
    out
}
