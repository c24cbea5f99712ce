//! Phrase-type tagger: frozen word embeddings -> Bi-LSTM -> linear emissions -> CRF.
//!
//! Labels are projected from the entity dictionary, so training needs no
//! annotation. After training, a phrase's type vector is the element-wise
//! max of the Bi-LSTM hidden states over the phrase's words, computed with
//! the whole question as context.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{EmbeddingTable, EntityDictionary, QaPair};
use crate::numerics::layers::{BiLstm, Linear};
use crate::numerics::{crf, Adam, AdamConfig, Checkpoint, Gradients, Graph, ParamId, ParamStore, Var};
use crate::{Error, Result};

/// Dictionary type per question token; tokens outside any entry get "other".
pub fn project_labels(pair: &QaPair, dict: &EntityDictionary) -> Vec<usize> {
    dict.token_types(&pair.question_tokens())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaggerConfig {
    /// Bi-LSTM hidden size per direction.
    pub hidden: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub clip_norm: f64,
    pub holdout_fraction: f64,
}

impl Default for TaggerConfig {
    fn default() -> Self {
        TaggerConfig {
            hidden: 100,
            epochs: 20,
            batch_size: 10,
            learning_rate: 0.01,
            clip_norm: 5.0,
            holdout_fraction: 0.2,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TypeTagger {
    store: ParamStore,
    bilstm: BiLstm,
    emit: Linear,
    transitions: ParamId,
    tag_names: Vec<String>,
    embedding_dim: usize,
}

impl TypeTagger {
    pub fn new(embedding_dim: usize, hidden: usize, tag_names: Vec<String>, seed: u64) -> Result<Self> {
        if tag_names.is_empty() || hidden == 0 || embedding_dim == 0 {
            return Err(Error::InvalidArgument("tagger needs tags and positive sizes".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let t = tag_names.len();
        let bilstm = BiLstm::new(&mut store, "tagger.bilstm", embedding_dim, hidden, &mut rng)?;
        let emit = Linear::new(&mut store, "tagger.emit", 2 * hidden, t, &mut rng)?;
        let transitions = store.add_uniform("tagger.transitions", &[t, t], &mut rng)?;
        Ok(TypeTagger {
            store,
            bilstm,
            emit,
            transitions,
            tag_names,
            embedding_dim,
        })
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_tags(&self) -> usize {
        self.tag_names.len()
    }

    pub fn tag_names(&self) -> &[String] {
        &self.tag_names
    }

    pub fn hidden(&self) -> usize {
        self.bilstm.fwd.d_hidden
    }

    /// Dimension of a type vector.
    pub fn type_dim(&self) -> usize {
        self.bilstm.d_out()
    }

    fn check_table(&self, table: &EmbeddingTable) -> Result<()> {
        if table.dim() != self.embedding_dim {
            return Err(Error::shape(
                "tagger embeddings",
                format!("model expects {}, table has {}", self.embedding_dim, table.dim()),
            ));
        }
        Ok(())
    }

    fn hidden_vars<S: AsRef<str>>(&self, g: &mut Graph, table: &EmbeddingTable, tokens: &[S]) -> Result<Vec<Var>> {
        self.check_table(table)?;
        let inputs = tokens
            .iter()
            .map(|t| g.constant(table.row(table.vocab().id(t.as_ref()))))
            .collect::<Result<Vec<_>>>()?;
        self.bilstm.encode(g, &inputs)
    }

    fn emissions(&self, g: &mut Graph, hidden: &[Var]) -> Result<Var> {
        let h = g.concat_rows(hidden)?;
        self.emit.forward(g, h)
    }

    /// CRF negative log-likelihood of `tags` for `tokens`, as a graph node.
    pub fn nll<S: AsRef<str>>(&self, g: &mut Graph, table: &EmbeddingTable, tokens: &[S], tags: &[usize]) -> Result<Var> {
        let hidden = self.hidden_vars(g, table, tokens)?;
        let e = self.emissions(g, &hidden)?;
        let a = g.param(self.transitions);
        g.crf_nll(e, a, tags)
    }

    /// Viterbi tags for `tokens`.
    pub fn predict<S: AsRef<str>>(&self, table: &EmbeddingTable, tokens: &[S]) -> Result<Vec<usize>> {
        let mut g = Graph::new(&self.store);
        let hidden = self.hidden_vars(&mut g, table, tokens)?;
        let e = self.emissions(&mut g, &hidden)?;
        crf::viterbi(g.value(e), self.store.get(self.transitions))
    }

    /// Word-level Bi-LSTM states `[forward, backward]` for `tokens`.
    pub fn hidden_states<S: AsRef<str>>(&self, table: &EmbeddingTable, tokens: &[S]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new(&self.store);
        let hidden = self.hidden_vars(&mut g, table, tokens)?;
        Ok(hidden.iter().map(|&h| g.value(h).data().to_vec()).collect())
    }

    /// One type vector per phrase of `pair`, with the full question as context.
    pub fn type_vectors(&self, table: &EmbeddingTable, pair: &QaPair) -> Result<Vec<Vec<f64>>> {
        let states = self.hidden_states(table, &pair.question_tokens())?;
        let offsets = pair.phrase_offsets();
        Ok(pair
            .phrases
            .iter()
            .zip(offsets)
            .map(|(p, start)| max_pool(&states[start..start + p.len()]))
            .collect())
    }

    /// Type vector of phrase `k` of `pair`.
    pub fn type_vector(&self, table: &EmbeddingTable, pair: &QaPair, k: usize) -> Result<Vec<f64>> {
        if k >= pair.num_phrases() {
            return Err(Error::Index {
                what: "phrase",
                index: k,
                size: pair.num_phrases(),
            });
        }
        Ok(self.type_vectors(table, pair)?.swap_remove(k))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ckpt = Checkpoint::default();
        ckpt.meta.insert("model".into(), "tagger".into());
        ckpt.meta.insert("tagger.hidden".into(), self.hidden().to_string());
        ckpt.meta.insert("tagger.embedding_dim".into(), self.embedding_dim.to_string());
        ckpt.meta.insert("tagger.tags".into(), self.tag_names.join("\t"));
        ckpt.tensors = self.store.to_named();
        ckpt
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let field = |k: &str| -> Result<&String> {
            ckpt.meta
                .get(k)
                .ok_or_else(|| Error::InvalidArgument(format!("tagger checkpoint lacks `{k}`")))
        };
        let num = |k: &str| -> Result<usize> {
            field(k)?
                .parse()
                .map_err(|_| Error::InvalidArgument(format!("tagger checkpoint field `{k}` is not a count")))
        };
        let tags = field("tagger.tags")?.split('\t').map(String::from).collect();
        let mut model = TypeTagger::new(num("tagger.embedding_dim")?, num("tagger.hidden")?, tags, 0)?;
        model.store.load_named(&ckpt.tensors)?;
        Ok(model)
    }
}

/// Element-wise max over rows.
pub fn max_pool(rows: &[Vec<f64>]) -> Vec<f64> {
    let mut out = rows[0].clone();
    for r in &rows[1..] {
        for (o, v) in out.iter_mut().zip(r) {
            *o = o.max(*v);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerEpoch {
    pub epoch: usize,
    /// Mean per-sentence CRF NLL over the training split.
    pub loss: f64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaggerReport {
    pub epochs: Vec<TaggerEpoch>,
    pub train_size: usize,
    pub heldout_size: usize,
    pub heldout_accuracy: f64,
    pub tag_names: Vec<String>,
    /// `confusion[gold][predicted]` token counts on the held-out split.
    pub confusion: Vec<Vec<usize>>,
}

impl TaggerReport {
    /// One line per gold tag: support, correct, and the most frequent wrong prediction.
    pub fn confusion_summary(&self) -> String {
        let mut out = String::new();
        for (gold, row) in self.confusion.iter().enumerate() {
            let support: usize = row.iter().sum();
            if support == 0 {
                continue;
            }
            let worst = row
                .iter()
                .enumerate()
                .filter(|&(p, &c)| p != gold && c > 0)
                .max_by_key(|&(p, &c)| (c, std::cmp::Reverse(p)));
            let confused = worst.map_or("-".to_string(), |(p, c)| format!("{} ({c})", self.tag_names[p]));
            out.push_str(&format!(
                "{:<12} support {:>5}  correct {:>5}  confused-with {}\n",
                self.tag_names[gold], support, row[gold], confused
            ));
        }
        out
    }
}

/// Token accuracy and confusion counts of `model` on `items`.
pub fn evaluate_tagger(
    model: &TypeTagger,
    table: &EmbeddingTable,
    items: &[(Vec<String>, Vec<usize>)],
) -> Result<(f64, Vec<Vec<usize>>)> {
    let t = model.num_tags();
    let mut confusion = vec![vec![0usize; t]; t];
    let mut correct = 0usize;
    let mut total = 0usize;
    for (tokens, gold) in items {
        let pred = model.predict(table, tokens)?;
        for (&g, &p) in gold.iter().zip(&pred) {
            confusion[g][p] += 1;
            correct += usize::from(g == p);
            total += 1;
        }
    }
    Ok((if total == 0 { 0.0 } else { correct as f64 / total as f64 }, confusion))
}

/// Trains on dictionary-projected labels; reports held-out token accuracy per epoch.
pub fn train_tagger(
    pairs: &[QaPair],
    dict: &EntityDictionary,
    table: &EmbeddingTable,
    config: &TaggerConfig,
    seed: u64,
) -> Result<(TypeTagger, TaggerReport)> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput("tagger training pairs"));
    }
    if config.batch_size == 0 || !(0.0..1.0).contains(&config.holdout_fraction) {
        return Err(Error::InvalidArgument("tagger batch size must be positive and holdout in [0,1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut items: Vec<(Vec<String>, Vec<usize>)> = pairs
        .iter()
        .map(|p| (p.question_tokens(), project_labels(p, dict)))
        .collect();
    items.shuffle(&mut rng);
    let mut heldout_size = (items.len() as f64 * config.holdout_fraction).round() as usize;
    if items.len() > 1 {
        heldout_size = heldout_size.clamp(usize::from(config.holdout_fraction > 0.0), items.len() - 1);
    } else {
        heldout_size = 0;
    }
    let heldout = items.split_off(items.len() - heldout_size);
    let mut train = items;

    let mut model = TypeTagger::new(table.dim(), config.hidden, dict.tag_names(), seed)?;
    let mut adam = Adam::new(
        AdamConfig {
            lr: config.learning_rate,
            clip_norm: config.clip_norm,
            ..AdamConfig::default()
        },
        &model.store,
    )?;
    let mut epochs = Vec::new();
    for epoch in 1..=config.epochs {
        train.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for batch in train.chunks(config.batch_size) {
            let mut grads = Gradients::default();
            for (tokens, tags) in batch {
                let mut g = Graph::new(&model.store);
                let loss = model.nll(&mut g, table, tokens, tags)?;
                loss_sum += g.value(loss).item();
                grads.accumulate(&g.backward(loss)?);
            }
            grads.scale(1.0 / batch.len() as f64);
            adam.step(&mut model.store, &grads)?;
        }
        let (acc, _) = evaluate_tagger(&model, table, &heldout)?;
        epochs.push(TaggerEpoch {
            epoch,
            loss: loss_sum / train.len() as f64,
            heldout_accuracy: acc,
        });
    }
    let (heldout_accuracy, confusion) = evaluate_tagger(&model, table, &heldout)?;
    let report = TaggerReport {
        epochs,
        train_size: train.len(),
        heldout_size,
        heldout_accuracy,
        tag_names: model.tag_names.clone(),
        confusion,
    };
    Ok((model, report))
}
