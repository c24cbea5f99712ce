//! Unsupervised key-phrase significance scoring.
//!
//! For a QA pair: retrieve answer-bearing documents with BM25, split each into
//! fixed-stride windows, embed phrases and windows by hierarchical pooling,
//! keep each phrase's best cosine match per document, average over documents
//! and Min-Max normalise within the question. The normalised score is the
//! probability of keeping the phrase at generation time.

mod bm25;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use bm25::Bm25Index;

use crate::corpus::{EmbeddingTable, MaterialCorpus, QaPair};
use crate::numerics::cosine;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DetectorConfig {
    /// Maximum number of retrieved documents.
    pub retrieved: usize,
    /// Sliding window of the average-pooling stage.
    pub pool_window: usize,
    pub split_width: usize,
    pub split_stride: usize,
    pub bm25_k1: f64,
    pub bm25_b: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        DetectorConfig {
            retrieved: 10,
            pool_window: 3,
            split_width: 8,
            split_stride: 4,
            bm25_k1: 1.2,
            bm25_b: 0.75,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RetrievalResult {
    pub doc_ids: Vec<usize>,
    pub texts: Vec<Vec<String>>,
}

impl RetrievalResult {
    pub fn len(&self) -> usize {
        self.texts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.texts.is_empty()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SignificanceProfile {
    pub raw: Vec<f64>,
    pub normalized: Vec<f64>,
}

impl SignificanceProfile {
    /// Uniform 0.5 profile, used when nothing could be retrieved.
    pub fn uniform(n: usize) -> Self {
        SignificanceProfile {
            raw: vec![0.0; n],
            normalized: vec![0.5; n],
        }
    }

    pub fn constant(n: usize, s: f64) -> Self {
        SignificanceProfile {
            raw: vec![s; n],
            normalized: vec![s; n],
        }
    }

    pub fn len(&self) -> usize {
        self.normalized.len()
    }

    pub fn is_empty(&self) -> bool {
        self.normalized.is_empty()
    }
}

/// Index plus configuration, reusable across pairs.
#[derive(Clone, Debug)]
pub struct Detector {
    corpus: MaterialCorpus,
    index: Bm25Index,
    pub config: DetectorConfig,
}

impl Detector {
    pub fn new(corpus: MaterialCorpus, config: DetectorConfig) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::EmptyInput("material corpus"));
        }
        if config.pool_window == 0 || config.split_width == 0 || config.split_stride == 0 {
            return Err(Error::InvalidArgument("detector windows must be positive".into()));
        }
        let index = Bm25Index::new(&corpus, config.bm25_k1, config.bm25_b);
        Ok(Detector { corpus, index, config })
    }

    pub fn index(&self) -> &Bm25Index {
        &self.index
    }

    /// Top documents for the concatenated pair, restricted to those containing every answer token.
    pub fn retrieve(&self, pair: &QaPair) -> RetrievalResult {
        let mut query = pair.answer.clone();
        query.extend(pair.question_tokens());
        let filter = self.index.containing_all(&pair.answer);
        let hits = self.index.top_k(&query, &filter, self.config.retrieved);
        RetrievalResult {
            doc_ids: hits.iter().map(|h| h.0).collect(),
            texts: hits.iter().map(|h| self.corpus.documents[h.0].clone()).collect(),
        }
    }

    pub fn profile(&self, pair: &QaPair, table: &EmbeddingTable) -> Result<SignificanceProfile> {
        let result = self.retrieve(pair);
        score_phrases(pair, &result, table, &self.config)
    }
}

/// Average pooling over each window of `min(window, L)` tokens, then an
/// element-wise max over the window averages.
pub fn hier_pool<S: AsRef<str>>(tokens: &[S], table: &EmbeddingTable, window: usize) -> Result<Vec<f64>> {
    if tokens.is_empty() {
        return Err(Error::EmptyInput("hierarchical pooling input"));
    }
    if window == 0 {
        return Err(Error::InvalidArgument("pooling window must be positive".into()));
    }
    let d = table.dim();
    let vecs: Vec<&[f64]> = tokens.iter().map(|t| table.token_vector(t.as_ref())).collect();
    let w = window.min(vecs.len());
    let mut pooled = vec![f64::NEG_INFINITY; d];
    let mut avg = vec![0.0; d];
    for start in 0..=vecs.len() - w {
        avg.fill(0.0);
        for v in &vecs[start..start + w] {
            for (a, x) in avg.iter_mut().zip(v.iter()) {
                *a += x;
            }
        }
        for (p, a) in pooled.iter_mut().zip(&avg) {
            *p = p.max(a / w as f64);
        }
    }
    Ok(pooled)
}

/// Windows of `width` tokens every `stride` tokens; the last window ends at the document end.
pub fn split_text<S: Clone>(doc: &[S], width: usize, stride: usize) -> Vec<Vec<S>> {
    if doc.is_empty() {
        return Vec::new();
    }
    if doc.len() <= width {
        return vec![doc.to_vec()];
    }
    let mut out = Vec::new();
    let mut start = 0;
    loop {
        if start + width >= doc.len() {
            out.push(doc[doc.len() - width..].to_vec());
            break;
        }
        out.push(doc[start..start + width].to_vec());
        start += stride;
    }
    out
}

/// Min-Max normalisation; all-equal inputs map to 0.5.
pub fn min_max(raw: &[f64]) -> Vec<f64> {
    let lo = raw.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&r| (r - lo) / (hi - lo)).collect()
}

pub fn score_phrases(
    pair: &QaPair,
    result: &RetrievalResult,
    table: &EmbeddingTable,
    config: &DetectorConfig,
) -> Result<SignificanceProfile> {
    let n = pair.num_phrases();
    if result.is_empty() {
        return Ok(SignificanceProfile::uniform(n));
    }
    let phrase_vecs = pair
        .phrases
        .iter()
        .map(|p| hier_pool(&p.tokens, table, config.pool_window))
        .collect::<Result<Vec<_>>>()?;
    let mut raw = vec![0.0; n];
    for text in &result.texts {
        let splits = split_text(text, config.split_width, config.split_stride)
            .iter()
            .map(|s| hier_pool(s, table, config.pool_window))
            .collect::<Result<Vec<_>>>()?;
        for (r, pv) in raw.iter_mut().zip(&phrase_vecs) {
            let best = splits.iter().map(|sv| cosine(pv, sv)).fold(f64::NEG_INFINITY, f64::max);
            *r += best;
        }
    }
    let m = result.len() as f64;
    raw.iter_mut().for_each(|r| *r /= m);
    let normalized = min_max(&raw);
    Ok(SignificanceProfile { raw, normalized })
}

/// Replace phrase `k` iff a uniform draw on `[0, 1)` exceeds `s_k`.
pub fn sample_mask_with<R: Rng + ?Sized>(profile: &SignificanceProfile, rng: &mut R) -> Vec<bool> {
    profile
        .normalized
        .iter()
        .map(|&s| rng.random::<f64>() > s)
        .collect()
}

pub fn sample_mask(profile: &SignificanceProfile, seed: u64) -> Vec<bool> {
    sample_mask_with(profile, &mut ChaCha8Rng::seed_from_u64(seed))
}
