use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{CvaeConfig, DataShape, LatentGaussian, LossBreakdown, Passes, PreparedPair};
use crate::corpus::{EmbeddingTable, BOS_ID, EOS_ID};
use crate::numerics::layers::{BiGru, GruCell, Linear, Mlp};
use crate::numerics::{Checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Debug)]
pub struct EgCvae {
    store: ParamStore,
    config: CvaeConfig,
    shape: DataShape,
    phrase: BiGru,
    context: GruCell,
    recognition: Linear,
    prior: Mlp,
    type_mlp: Mlp,
    entity_mlp: Mlp,
    entity_embedding: ParamId,
    init: Linear,
    decoder: GruCell,
    output: Linear,
    bow: Mlp,
}

/// Teacher signals for the multi-pass decoder.
#[derive(Clone, Copy, Debug)]
pub struct Teacher<'a> {
    pub type_vector: Var,
    pub entity_target: &'a [(usize, f64)],
}

/// Graph nodes of one multi-pass decode.
#[derive(Clone, Copy, Debug)]
pub struct MultiPass {
    /// Predicted type vector `t'` (absent when the type pass is off).
    pub type_pred: Option<Var>,
    /// Entity log-probabilities (absent when the entity pass is off).
    pub entity_log_probs: Option<Var>,
    /// Type vector fed downstream: teacher in training, `t'` at test.
    pub type_used: Var,
    /// Entity vector fed downstream: teacher mean in training, expected embedding at test.
    pub entity_used: Var,
    pub init: Var,
}

/// Loss terms of one instance as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub kl: Var,
    pub type_ll: Option<Var>,
    pub entity_ll: Option<Var>,
    pub reconstruction_ll: Var,
    pub bow_ll: Option<Var>,
}

/// Everything the phrase decoder needs to run step by step.
#[derive(Clone, Debug, PartialEq)]
pub struct DecoderInit {
    pub state: Vec<f64>,
    pub type_vector: Vec<f64>,
    pub entity_vector: Vec<f64>,
}

impl EgCvae {
    pub fn new(config: &CvaeConfig, shape: DataShape, seed: u64) -> Result<Self> {
        let positive = [
            config.encoder_hidden,
            config.context_hidden,
            config.latent,
            config.mlp_hidden,
            config.decoder_hidden,
            config.entity_dim,
            shape.embedding_dim,
            shape.type_dim,
            shape.vocab_size,
        ];
        if positive.contains(&0) {
            return Err(Error::InvalidArgument("all model dimensions must be positive".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let (d, t, z) = (shape.embedding_dim, shape.type_dim, config.latent);
        let enc = 2 * config.encoder_hidden;
        let cdim = config.context_hidden + d;
        let x_dim = if config.recognition_uses_type { enc + t } else { enc };
        let n_ent = shape.num_entities + 1;
        let ed = config.entity_dim;
        let h = config.mlp_hidden;
        let phrase = BiGru::new(&mut store, "cvae.phrase", d, config.encoder_hidden, &mut rng)?;
        let context = GruCell::new(&mut store, "cvae.context", enc, config.context_hidden, &mut rng)?;
        let recognition = Linear::new(&mut store, "cvae.recognition", x_dim + cdim, 2 * z, &mut rng)?;
        let prior = Mlp::new(&mut store, "cvae.prior", cdim, h, 2 * z, &mut rng)?;
        let type_mlp = Mlp::new(&mut store, "cvae.type", z + cdim, h, t, &mut rng)?;
        let entity_mlp = Mlp::new(&mut store, "cvae.entity", z + cdim + t, h, n_ent, &mut rng)?;
        let entity_embedding = store.add_uniform("cvae.entity_embedding", &[n_ent, ed], &mut rng)?;
        let init = Linear::new(&mut store, "cvae.init", z + cdim + t + ed, config.decoder_hidden, &mut rng)?;
        let decoder = GruCell::new(&mut store, "cvae.decoder", d + t + ed, config.decoder_hidden, &mut rng)?;
        let output = Linear::new(&mut store, "cvae.output", config.decoder_hidden, shape.vocab_size, &mut rng)?;
        let bow = Mlp::new(&mut store, "cvae.bow", z + cdim, h, shape.vocab_size, &mut rng)?;
        Ok(EgCvae {
            store,
            config: config.clone(),
            shape,
            phrase,
            context,
            recognition,
            prior,
            type_mlp,
            entity_mlp,
            entity_embedding,
            init,
            decoder,
            output,
            bow,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn config(&self) -> &CvaeConfig {
        &self.config
    }

    pub fn shape(&self) -> DataShape {
        self.shape
    }

    pub fn latent_dim(&self) -> usize {
        self.config.latent
    }

    pub fn null_entity(&self) -> usize {
        self.shape.num_entities
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.shape.embedding_dim || table.len() != self.shape.vocab_size {
            return Err(Error::shape(
                "generator vocabulary",
                format!(
                    "model expects {}x{}, table is {}x{}",
                    self.shape.vocab_size,
                    self.shape.embedding_dim,
                    table.len(),
                    table.dim()
                ),
            ));
        }
        Ok(())
    }

    fn embed(&self, g: &mut Graph, table: &EmbeddingTable, ids: &[usize]) -> Result<Vec<Var>> {
        ids.iter().map(|&i| g.constant(table.row(i))).collect()
    }

    /// `hv_k = [last forward state, last backward state]`.
    pub fn encode_phrase(&self, g: &mut Graph, table: &EmbeddingTable, ids: &[usize]) -> Result<Var> {
        if ids.is_empty() {
            return Err(Error::EmptyInput("phrase"));
        }
        let xs = self.embed(g, table, ids)?;
        self.phrase.encode(g, &xs)
    }

    /// `c = [hv_c, a]` with the context GRU run over every encoding except `k`.
    pub fn encode_context(&self, g: &mut Graph, encodings: &[Var], k: usize, answer: Var) -> Result<Var> {
        if k >= encodings.len() {
            return Err(Error::Index {
                what: "phrase position",
                index: k,
                size: encodings.len(),
            });
        }
        let mut h = self.context.zero_state(g)?;
        for (j, &e) in encodings.iter().enumerate() {
            if j != k {
                h = self.context.step(g, e, h)?;
            }
        }
        g.concat_cols(&[h, answer])
    }

    fn split_gaussian(&self, g: &mut Graph, out: Var) -> Result<(Var, Var)> {
        let z = self.config.latent;
        Ok((g.slice_cols(out, 0, z)?, g.slice_cols(out, z, z)?))
    }

    /// `[mu; log_var] = W_r [x; c] + b_r`.
    pub fn recognition(&self, g: &mut Graph, x: Var, c: Var) -> Result<(Var, Var)> {
        let xc = g.concat_cols(&[x, c])?;
        let out = self.recognition.forward(g, xc)?;
        self.split_gaussian(g, out)
    }

    /// `[mu'; log_var'] = MLP_p(c)`.
    pub fn prior(&self, g: &mut Graph, c: Var) -> Result<(Var, Var)> {
        let out = self.prior.forward(g, c)?;
        self.split_gaussian(g, out)
    }

    pub fn reparameterize(&self, g: &mut Graph, mean: Var, log_var: Var, eps: &[f64]) -> Result<Var> {
        let e = g.row(eps.to_vec())?;
        let half = g.scale(log_var, 0.5)?;
        let sigma = g.exp(half)?;
        let noise = g.mul(sigma, e)?;
        g.add(mean, noise)
    }

    /// Closed-form diagonal-Gaussian `KL(q || p)` as a scalar node.
    pub fn kl(&self, g: &mut Graph, q: (Var, Var), p: (Var, Var)) -> Result<Var> {
        let lv_diff = g.sub(q.1, p.1)?;
        let ratio = g.exp(lv_diff)?;
        let d = g.sub(q.0, p.0)?;
        let d2 = g.square(d)?;
        let neg_lvp = g.neg(p.1)?;
        let inv_var = g.exp(neg_lvp)?;
        let scaled = g.mul(d2, inv_var)?;
        let s = g.add(ratio, scaled)?;
        let s = g.sub(s, lv_diff)?;
        let s = g.affine(s, 1.0, -1.0)?;
        let total = g.sum(s)?;
        g.scale(total, 0.5)
    }

    fn zeros(&self, g: &mut Graph, n: usize) -> Result<Var> {
        g.row(vec![0.0; n])
    }

    fn target_row(&self, target: &[(usize, f64)]) -> Result<Vec<f64>> {
        let size = self.shape.num_entities + 1;
        let mut row = vec![0.0; size];
        for &(i, w) in target {
            *row.get_mut(i).ok_or(Error::Index {
                what: "entity",
                index: i,
                size,
            })? += w;
        }
        Ok(row)
    }

    /// Type, entity and initial-state passes. Disabled passes feed zero vectors downstream.
    pub fn decode_passes(
        &self,
        g: &mut Graph,
        z: Var,
        c: Var,
        teacher: Option<Teacher<'_>>,
        passes: Passes,
    ) -> Result<MultiPass> {
        let zc = g.concat_cols(&[z, c])?;
        let (type_pred, type_used) = if passes.type_pass {
            let t_pred = self.type_mlp.forward(g, zc)?;
            let used = match teacher {
                Some(t) => t.type_vector,
                None => t_pred,
            };
            (Some(t_pred), used)
        } else {
            (None, self.zeros(g, self.shape.type_dim)?)
        };
        let (entity_log_probs, entity_used) = if passes.entity_pass {
            let zct = g.concat_cols(&[z, c, type_used])?;
            let logits = self.entity_mlp.forward(g, zct)?;
            let log_probs = g.log_softmax(logits)?;
            let weights = match teacher {
                Some(t) => g.row(self.target_row(t.entity_target)?)?,
                None => g.softmax(logits)?,
            };
            let table = g.param(self.entity_embedding);
            (Some(log_probs), g.matmul(weights, table)?)
        } else {
            (None, self.zeros(g, self.config.entity_dim)?)
        };
        let all = g.concat_cols(&[z, c, type_used, entity_used])?;
        let init = self.init.forward(g, all)?;
        Ok(MultiPass {
            type_pred,
            entity_log_probs,
            type_used,
            entity_used,
            init,
        })
    }

    /// Teacher-forced decode of `target` then EOS; returns the summed log-likelihood
    /// and the `[(n+1) x V]` per-step log-probabilities.
    pub fn decode_phrase(
        &self,
        g: &mut Graph,
        table: &EmbeddingTable,
        passes: &MultiPass,
        target: &[usize],
    ) -> Result<(Var, Var)> {
        let mut inputs = vec![BOS_ID];
        inputs.extend_from_slice(target);
        let mut labels = target.to_vec();
        labels.push(EOS_ID);
        let words = self.embed(g, table, &inputs)?;
        let mut h = passes.init;
        let mut states = Vec::with_capacity(words.len());
        for w in words {
            let x = g.concat_cols(&[w, passes.type_used, passes.entity_used])?;
            h = self.decoder.step(g, x, h)?;
            states.push(h);
        }
        let hs = g.concat_rows(&states)?;
        let logits = self.output.forward(g, hs)?;
        let log_probs = g.log_softmax(logits)?;
        let picks = labels.iter().enumerate().map(|(i, &l)| (i, l, 1.0)).collect();
        Ok((g.gather_sum(log_probs, picks)?, log_probs))
    }

    /// Summed log-probability of the bag of words of `target` under `MLP_bow(z, c)`.
    pub fn bow_log_likelihood(&self, g: &mut Graph, z: Var, c: Var, target: &[usize]) -> Result<Var> {
        let zc = g.concat_cols(&[z, c])?;
        let logits = self.bow.forward(g, zc)?;
        let log_probs = g.log_softmax(logits)?;
        g.gather_sum(log_probs, target.iter().map(|&w| (0, w, 1.0)).collect())
    }

    /// Phrase encodings and answer-embedding node shared by every instance of a pair.
    pub fn encode_pair(&self, g: &mut Graph, table: &EmbeddingTable, pair: &PreparedPair) -> Result<(Vec<Var>, Var)> {
        self.check_table(table)?;
        let encs = pair
            .phrases
            .iter()
            .map(|p| self.encode_phrase(g, table, p))
            .collect::<Result<Vec<_>>>()?;
        let answer = g.row(pair.answer.clone())?;
        Ok((encs, answer))
    }

    /// Training loss of phrase `k`, with `z` drawn from the recognition network using `eps`.
    #[allow(clippy::too_many_arguments)]
    pub fn instance_loss(
        &self,
        g: &mut Graph,
        table: &EmbeddingTable,
        pair: &PreparedPair,
        encoded: &(Vec<Var>, Var),
        k: usize,
        eps: &[f64],
        kl_weight: f64,
        bow_weight: f64,
        passes: Passes,
    ) -> Result<LossVars> {
        let (encs, answer) = encoded;
        let c = self.encode_context(g, encs, k, *answer)?;
        let t = g.row(pair.type_vectors[k].clone())?;
        let x = if self.config.recognition_uses_type {
            let t_in = if passes.type_pass { t } else { self.zeros(g, self.shape.type_dim)? };
            g.concat_cols(&[encs[k], t_in])?
        } else {
            encs[k]
        };
        let q = self.recognition(g, x, c)?;
        let p = self.prior(g, c)?;
        let z = self.reparameterize(g, q.0, q.1, eps)?;
        let kl = self.kl(g, q, p)?;
        let teacher = Teacher {
            type_vector: t,
            entity_target: &pair.entity_targets[k],
        };
        let mp = self.decode_passes(g, z, c, Some(teacher), passes)?;
        let (recon, _) = self.decode_phrase(g, table, &mp, &pair.phrases[k])?;

        let mut total = g.scale(kl, kl_weight)?;
        total = g.sub(total, recon)?;
        let type_ll = match mp.type_pred {
            Some(tp) => {
                let diff = g.sub(tp, t)?;
                let sq = g.square(diff)?;
                let s = g.sum(sq)?;
                let ll = g.neg(s)?;
                total = g.sub(total, ll)?;
                Some(ll)
            }
            None => None,
        };
        let entity_ll = match mp.entity_log_probs {
            Some(lp) => {
                let picks = pair.entity_targets[k].iter().map(|&(i, w)| (0, i, w)).collect();
                let ll = g.gather_sum(lp, picks)?;
                total = g.sub(total, ll)?;
                Some(ll)
            }
            None => None,
        };
        let bow_ll = if bow_weight != 0.0 {
            let ll = self.bow_log_likelihood(g, z, c, &pair.phrases[k])?;
            let weighted = g.scale(ll, bow_weight)?;
            total = g.sub(total, weighted)?;
            Some(ll)
        } else {
            None
        };
        Ok(LossVars {
            total,
            kl,
            type_ll,
            entity_ll,
            reconstruction_ll: recon,
            bow_ll,
        })
    }

    /// Reads the values of `vars` into a breakdown.
    pub fn breakdown(g: &Graph, vars: &LossVars, kl_weight: f64, bow_weight: f64) -> LossBreakdown {
        let v = |x: Option<Var>| x.map_or(0.0, |x| g.value(x).item());
        LossBreakdown {
            kl: g.value(vars.kl).item(),
            type_ll: v(vars.type_ll),
            entity_ll: v(vars.entity_ll),
            reconstruction_ll: g.value(vars.reconstruction_ll).item(),
            bow_ll: v(vars.bow_ll),
            kl_weight,
            bow_weight: if vars.bow_ll.is_some() { bow_weight } else { 0.0 },
            total: g.value(vars.total).item(),
        }
    }

    /// Loss breakdown of one instance without building gradients.
    #[allow(clippy::too_many_arguments)]
    pub fn loss(
        &self,
        table: &EmbeddingTable,
        pair: &PreparedPair,
        k: usize,
        eps: &[f64],
        kl_weight: f64,
        bow_weight: f64,
        passes: Passes,
    ) -> Result<LossBreakdown> {
        let mut g = Graph::new(&self.store);
        let enc = self.encode_pair(&mut g, table, pair)?;
        let vars = self.instance_loss(&mut g, table, pair, &enc, k, eps, kl_weight, bow_weight, passes)?;
        Ok(Self::breakdown(&g, &vars, kl_weight, bow_weight))
    }

    /// Prior network output for phrase `k` of `phrases` (token ids) given `answer`.
    pub fn prior_gaussian(
        &self,
        table: &EmbeddingTable,
        phrases: &[Vec<usize>],
        answer: &[f64],
        k: usize,
    ) -> Result<LatentGaussian> {
        let mut g = Graph::new(&self.store);
        let c = self.condition(&mut g, table, phrases, answer, k)?;
        let (m, lv) = self.prior(&mut g, c)?;
        Ok(LatentGaussian {
            mean: g.value(m).data().to_vec(),
            log_var: g.value(lv).data().to_vec(),
        })
    }

    fn condition(
        &self,
        g: &mut Graph,
        table: &EmbeddingTable,
        phrases: &[Vec<usize>],
        answer: &[f64],
        k: usize,
    ) -> Result<Var> {
        self.check_table(table)?;
        let encs = phrases
            .iter()
            .map(|p| self.encode_phrase(g, table, p))
            .collect::<Result<Vec<_>>>()?;
        let a = g.row(answer.to_vec())?;
        self.encode_context(g, &encs, k, a)
    }

    /// Test-time passes from a given latent `z`: predicted `t'` and expected entity embedding.
    pub fn decoder_init(
        &self,
        table: &EmbeddingTable,
        phrases: &[Vec<usize>],
        answer: &[f64],
        k: usize,
        z: &[f64],
    ) -> Result<DecoderInit> {
        let mut g = Graph::new(&self.store);
        let c = self.condition(&mut g, table, phrases, answer, k)?;
        let zv = g.row(z.to_vec())?;
        let mp = self.decode_passes(&mut g, zv, c, None, self.config.passes)?;
        Ok(DecoderInit {
            state: g.value(mp.init).data().to_vec(),
            type_vector: g.value(mp.type_used).data().to_vec(),
            entity_vector: g.value(mp.entity_used).data().to_vec(),
        })
    }

    /// One decoder step from `state` after emitting `prev`; returns the new state and log-probabilities.
    pub fn decoder_step(
        &self,
        table: &EmbeddingTable,
        init: &DecoderInit,
        state: &[f64],
        prev: usize,
    ) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(&self.store);
        let w = g.constant(table.row(prev))?;
        let t = g.row(init.type_vector.clone())?;
        let e = g.row(init.entity_vector.clone())?;
        let x = g.concat_cols(&[w, t, e])?;
        let h = g.row(state.to_vec())?;
        let h = self.decoder.step(&mut g, x, h)?;
        let logits = self.output.forward(&mut g, h)?;
        let lp = g.log_softmax(logits)?;
        Ok((g.value(h).data().to_vec(), g.value(lp).data().to_vec()))
    }

    /// Log-probability of `tokens` followed by EOS from `init`.
    pub fn sequence_log_prob(&self, table: &EmbeddingTable, init: &DecoderInit, tokens: &[usize]) -> Result<f64> {
        let mut state = init.state.clone();
        let mut prev = BOS_ID;
        let mut total = 0.0;
        for &t in tokens.iter().chain(std::iter::once(&EOS_ID)) {
            let (s, lp) = self.decoder_step(table, init, &state, prev)?;
            total += lp[t];
            state = s;
            prev = t;
        }
        Ok(total)
    }

    pub fn to_checkpoint(&self) -> Result<Checkpoint> {
        let mut ckpt = Checkpoint::default();
        ckpt.meta.insert("model".into(), "egcvae".into());
        ckpt.meta.insert("egcvae.config".into(), serde_json::to_string(&self.config)?);
        ckpt.meta.insert("egcvae.shape".into(), serde_json::to_string(&self.shape)?);
        ckpt.tensors = self.store.to_named();
        Ok(ckpt)
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("generator checkpoint lacks `{k}`")))
        };
        let config: CvaeConfig = serde_json::from_str(field("egcvae.config")?)?;
        let shape: DataShape = serde_json::from_str(field("egcvae.shape")?)?;
        let mut model = EgCvae::new(&config, shape, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }

    pub fn named_parameters(&self) -> BTreeMap<String, Tensor> {
        self.store.to_named()
    }
}
