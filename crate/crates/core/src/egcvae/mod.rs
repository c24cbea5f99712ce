//! Entity-guided conditional VAE over question phrases.
//!
//! Each phrase position `k` of a question is one instance. The phrase is
//! encoded by a bidirectional GRU, the other phrases by a context GRU over
//! their encodings, and the condition is `c = [hv_c, a]` with `a` the answer
//! embedding. A latent `z` comes from the recognition network in training and
//! the prior network at test. Decoding runs three passes: a type vector
//! `t' = MLP_t(z, c)`, an entity distribution `MLP_e(z, c, t)` whose expected
//! embedding is `e`, and a phrase GRU initialised from `[z, c, t, e]` with
//! `[w, t, e]` as its step input.

mod model;
mod train;

use serde::{Deserialize, Serialize};

pub use model::{DecoderInit, EgCvae, LossVars, MultiPass, Teacher};
pub use train::{kl_weight, train, EpochSummary, LossRecord, TrainConfig, TrainLog};

use crate::corpus::{EmbeddingTable, EntityDictionary, QaPair};
use crate::typelab::TypeTagger;
use crate::{Error, Result};

/// Which decoding passes contribute to the objective.
///
/// With both passes off the objective is the plain CVAE bound; the type pass
/// adds the type likelihood, the entity pass the entity likelihood.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Passes {
    pub type_pass: bool,
    pub entity_pass: bool,
}

impl Passes {
    pub const CVAE: Passes = Passes {
        type_pass: false,
        entity_pass: false,
    };
    pub const TYPED: Passes = Passes {
        type_pass: true,
        entity_pass: false,
    };
    pub const FULL: Passes = Passes {
        type_pass: true,
        entity_pass: true,
    };
}

impl Default for Passes {
    fn default() -> Self {
        Passes::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CvaeConfig {
    /// Phrase encoder hidden size per direction.
    pub encoder_hidden: usize,
    pub context_hidden: usize,
    pub latent: usize,
    pub mlp_hidden: usize,
    pub decoder_hidden: usize,
    pub entity_dim: usize,
    /// Feed `[hv_k, t_k]` rather than `hv_k` to the recognition network.
    pub recognition_uses_type: bool,
    pub passes: Passes,
}

impl Default for CvaeConfig {
    fn default() -> Self {
        CvaeConfig {
            encoder_hidden: 300,
            context_hidden: 600,
            latent: 200,
            mlp_hidden: 400,
            decoder_hidden: 400,
            entity_dim: 50,
            recognition_uses_type: true,
            passes: Passes::FULL,
        }
    }
}

/// Sizes fixed by the data rather than the configuration.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DataShape {
    pub embedding_dim: usize,
    pub type_dim: usize,
    pub vocab_size: usize,
    /// Dictionary entities; the entity softmax has one more slot for NULL.
    pub num_entities: usize,
}

/// Diagonal Gaussian as plain values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentGaussian {
    pub mean: Vec<f64>,
    pub log_var: Vec<f64>,
}

impl LatentGaussian {
    pub fn standard(dim: usize) -> Self {
        LatentGaussian {
            mean: vec![0.0; dim],
            log_var: vec![0.0; dim],
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `z = mu + exp(log_var / 2) * eps`
    pub fn reparameterize(&self, eps: &[f64]) -> Result<Vec<f64>> {
        if eps.len() != self.dim() {
            return Err(Error::shape("reparameterize", format!("noise {} vs latent {}", eps.len(), self.dim())));
        }
        Ok(self
            .mean
            .iter()
            .zip(&self.log_var)
            .zip(eps)
            .map(|((m, lv), e)| m + (0.5 * lv).exp() * e)
            .collect())
    }
}

/// Closed-form `KL(q || p)` between diagonal Gaussians.
pub fn kl_divergence(q: &LatentGaussian, p: &LatentGaussian) -> Result<f64> {
    if q.dim() != p.dim() || q.log_var.len() != q.dim() || p.log_var.len() != p.dim() {
        return Err(Error::shape("kl_divergence", format!("{} vs {}", q.dim(), p.dim())));
    }
    let mut kl = 0.0;
    for i in 0..q.dim() {
        let d = q.mean[i] - p.mean[i];
        kl += p.log_var[i] - q.log_var[i] + ((q.log_var[i]).exp() + d * d) / p.log_var[i].exp() - 1.0;
    }
    Ok(0.5 * kl)
}

/// A QA pair converted to model inputs and frozen teacher signals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PreparedPair {
    pub id: String,
    pub phrases: Vec<Vec<usize>>,
    pub answer: Vec<f64>,
    /// Teacher type vector per phrase.
    pub type_vectors: Vec<Vec<f64>>,
    /// Sparse target distribution over entities (NULL at index `num_entities`).
    pub entity_targets: Vec<Vec<(usize, f64)>>,
}

impl PreparedPair {
    pub fn num_phrases(&self) -> usize {
        self.phrases.len()
    }
}

/// Uniform distribution over the distinct entities in `tokens`, or NULL.
pub fn entity_target<S: AsRef<str>>(tokens: &[S], dict: &EntityDictionary) -> Vec<(usize, f64)> {
    let mut ids: Vec<usize> = dict.tag(tokens).iter().map(|s| s.entity).collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return vec![(dict.len(), 1.0)];
    }
    let w = 1.0 / ids.len() as f64;
    ids.into_iter().map(|i| (i, w)).collect()
}

pub fn prepare_pair(
    pair: &QaPair,
    table: &EmbeddingTable,
    tagger: &TypeTagger,
    dict: &EntityDictionary,
) -> Result<PreparedPair> {
    let vocab = table.vocab();
    Ok(PreparedPair {
        id: pair.id.clone(),
        phrases: pair.phrases.iter().map(|p| vocab.encode(&p.tokens)).collect(),
        answer: table.mean_vector(&pair.answer),
        type_vectors: tagger.type_vectors(table, pair)?,
        entity_targets: pair.phrases.iter().map(|p| entity_target(&p.tokens, dict)).collect(),
    })
}

pub fn prepare_pairs(
    pairs: &[QaPair],
    table: &EmbeddingTable,
    tagger: &TypeTagger,
    dict: &EntityDictionary,
) -> Result<Vec<PreparedPair>> {
    pairs.iter().map(|p| prepare_pair(p, table, tagger, dict)).collect()
}

/// Value of every loss term for one instance or averaged over many.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub type_ll: f64,
    pub entity_ll: f64,
    pub reconstruction_ll: f64,
    pub bow_ll: f64,
    pub kl_weight: f64,
    pub bow_weight: f64,
    pub total: f64,
}

impl LossBreakdown {
    /// `kl_weight * kl - type_ll - entity_ll - reconstruction_ll - bow_weight * bow_ll`
    pub fn recombine(&self) -> f64 {
        self.kl_weight * self.kl - self.type_ll - self.entity_ll - self.reconstruction_ll - self.bow_weight * self.bow_ll
    }
}
