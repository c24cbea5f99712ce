use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{EgCvae, LossBreakdown, PreparedPair};
use crate::corpus::EmbeddingTable;
use crate::numerics::{Adam, AdamConfig, Gradients, Graph};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Phrase instances per Adam step.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    /// Batches over which the KL weight ramps linearly from 0 to 1.
    pub anneal_batches: usize,
    pub bow_weight: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 30,
            learning_rate: 0.001,
            clip_norm: 5.0,
            anneal_batches: 10_000,
            bow_weight: 1.0,
        }
    }
}

/// `min(1, step / anneal_batches)`; no annealing when `anneal_batches` is 0.
pub fn kl_weight(step: usize, anneal_batches: usize) -> f64 {
    if anneal_batches == 0 {
        1.0
    } else {
        (step as f64 / anneal_batches as f64).min(1.0)
    }
}

/// Per-instance mean loss terms of one batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub epoch: usize,
    pub batch: usize,
    pub kl: f64,
    pub type_ll: f64,
    pub entity_ll: f64,
    pub recon_ll: f64,
    pub bow_ll: f64,
    pub kl_weight: f64,
    pub total: f64,
}

/// Per-instance mean loss terms over one epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub instances: usize,
    pub kl: f64,
    pub type_ll: f64,
    pub entity_ll: f64,
    pub recon_ll: f64,
    pub bow_ll: f64,
    /// KL weight at the last batch of the epoch.
    pub kl_weight: f64,
    pub total: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub batches: Vec<LossRecord>,
    pub epochs: Vec<EpochSummary>,
}

#[derive(Default)]
struct Sums {
    n: usize,
    kl: f64,
    type_ll: f64,
    entity_ll: f64,
    recon: f64,
    bow: f64,
    total: f64,
}

impl Sums {
    fn add(&mut self, b: &LossBreakdown) {
        self.n += 1;
        self.kl += b.kl;
        self.type_ll += b.type_ll;
        self.entity_ll += b.entity_ll;
        self.recon += b.reconstruction_ll;
        self.bow += b.bow_ll;
        self.total += b.total;
    }

    fn merge(&mut self, o: &Sums) {
        self.n += o.n;
        self.kl += o.kl;
        self.type_ll += o.type_ll;
        self.entity_ll += o.entity_ll;
        self.recon += o.recon;
        self.bow += o.bow;
        self.total += o.total;
    }

    fn record(&self, epoch: usize, batch: usize, kl_weight: f64) -> LossRecord {
        let n = self.n.max(1) as f64;
        LossRecord {
            epoch,
            batch,
            kl: self.kl / n,
            type_ll: self.type_ll / n,
            entity_ll: self.entity_ll / n,
            recon_ll: self.recon / n,
            bow_ll: self.bow / n,
            kl_weight,
            total: self.total / n,
        }
    }
}

/// Trains in place. Pairs are shuffled each epoch, their phrase instances
/// flattened in that order and cut into batches; instances of one pair in a
/// batch share a graph so phrase encodings are computed once.
pub fn train(
    model: &mut EgCvae,
    table: &EmbeddingTable,
    pairs: &[PreparedPair],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainLog> {
    let instances: usize = pairs.iter().map(PreparedPair::num_phrases).sum();
    if instances == 0 {
        return Err(Error::EmptyInput("generator training pairs"));
    }
    if config.batch_size == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        model.store(),
    )?;
    let passes = model.config().passes;
    let latent = model.latent_dim();
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    let mut log = TrainLog::default();
    let mut step = 0usize;
    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let flat: Vec<(usize, usize)> = order
            .iter()
            .flat_map(|&p| (0..pairs[p].num_phrases()).map(move |k| (p, k)))
            .collect();
        let mut epoch_sums = Sums::default();
        let mut w = 0.0;
        for (b, batch) in flat.chunks(config.batch_size).enumerate() {
            w = kl_weight(step, config.anneal_batches);
            let mut grads = Gradients::default();
            let mut sums = Sums::default();
            for group in batch.chunk_by(|a, b| a.0 == b.0) {
                let pair = &pairs[group[0].0];
                let mut g = Graph::new(model.store());
                let enc = model.encode_pair(&mut g, table, pair)?;
                let mut totals = Vec::with_capacity(group.len());
                for &(_, k) in group {
                    let eps: Vec<f64> = (0..latent).map(|_| rng.sample(StandardNormal)).collect();
                    let vars = model
                        .instance_loss(&mut g, table, pair, &enc, k, &eps, w, config.bow_weight, passes)
                        .map_err(|e| numeric_context(e, epoch, b + 1, &pair.id, k))?;
                    sums.add(&EgCvae::breakdown(&g, &vars, w, config.bow_weight));
                    totals.push(vars.total);
                }
                let loss = g.add_all(&totals)?;
                let gr = g.backward(loss).map_err(|e| numeric_context(e, epoch, b + 1, &pair.id, 0))?;
                grads.accumulate(&gr);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(model.store_mut(), &grads)
                .map_err(|e| numeric_context(e, epoch, b + 1, "batch", 0))?;
            step += 1;
            log.batches.push(sums.record(epoch, b + 1, w));
            epoch_sums.merge(&sums);
        }
        let r = epoch_sums.record(epoch, 0, w);
        log.epochs.push(EpochSummary {
            epoch,
            instances: epoch_sums.n,
            kl: r.kl,
            type_ll: r.type_ll,
            entity_ll: r.entity_ll,
            recon_ll: r.recon_ll,
            bow_ll: r.bow_ll,
            kl_weight: w,
            total: r.total,
        });
    }
    Ok(log)
}

fn numeric_context(e: Error, epoch: usize, batch: usize, pair: &str, k: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("epoch {epoch} batch {batch} ({pair}, phrase {k}): {what}")),
        other => other,
    }
}
