use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::vocab::{Vocab, UNK_ID};
use super::MaterialCorpus;
use crate::numerics::{sigmoid, Tensor, INIT_SCALE};
use crate::{Error, Result};

/// Word vectors indexed by vocabulary id. The `<unk>` row is all zeros.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingTable {
    vocab: Vocab,
    dim: usize,
    data: Vec<f64>,
}

impl EmbeddingTable {
    pub fn new(vocab: Vocab, dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || data.len() != vocab.len() * dim {
            return Err(Error::shape(
                "embedding table",
                format!("{} rows of dim {dim} need {} values, got {}", vocab.len(), vocab.len() * dim, data.len()),
            ));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("embedding table".into()));
        }
        Ok(EmbeddingTable { vocab, dim, data })
    }

    /// Uniform-initialised table with a zero `<unk>` row.
    pub fn random<R: Rng + ?Sized>(vocab: Vocab, dim: usize, rng: &mut R) -> Self {
        let mut data: Vec<f64> = (0..vocab.len() * dim)
            .map(|_| rng.random_range(-INIT_SCALE..=INIT_SCALE))
            .collect();
        data[UNK_ID * dim..(UNK_ID + 1) * dim].fill(0.0);
        EmbeddingTable { vocab, dim, data }
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.vocab.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vocab.is_empty()
    }

    pub fn vector(&self, id: usize) -> &[f64] {
        &self.data[id * self.dim..(id + 1) * self.dim]
    }

    /// Vector of `token`, falling back to the `<unk>` row.
    pub fn token_vector(&self, token: &str) -> &[f64] {
        self.vector(self.vocab.id(token))
    }

    /// `[1 x d]` row for `id`.
    pub fn row(&self, id: usize) -> Tensor {
        Tensor::from_parts(vec![1, self.dim], self.vector(id).to_vec())
    }

    /// Mean of the tokens' vectors (zeros for an empty list).
    pub fn mean_vector<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim];
        for t in tokens {
            for (o, v) in out.iter_mut().zip(self.token_vector(t.as_ref())) {
                *o += v;
            }
        }
        if !tokens.is_empty() {
            let n = tokens.len() as f64;
            out.iter_mut().for_each(|v| *v /= n);
        }
        out
    }

    /// Text format: a `count dim` header, then one `token v1 .. vd` line per row.
    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}\n", self.vocab.len(), self.dim);
        for id in 0..self.vocab.len() {
            s.push_str(self.vocab.token(id));
            for v in self.vector(id) {
                let _ = write!(s, " {v}");
            }
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| Error::parse(source, "missing header"))?;
        let mut it = header.split_whitespace().map(str::parse::<usize>);
        let (count, dim) = match (it.next(), it.next(), it.next()) {
            (Some(Ok(c)), Some(Ok(d)), None) => (c, d),
            _ => return Err(Error::parse(source, "header must be `count dim`")),
        };
        let mut tokens = Vec::with_capacity(count);
        let mut data = Vec::with_capacity(count * dim);
        for (n, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let mut parts = line.split(' ');
            let tok = parts.next().unwrap_or_default();
            let vals: Vec<f64> = parts
                .map(str::parse::<f64>)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::parse(source, format!("line {}: {e}", n + 2)))?;
            if vals.len() != dim {
                return Err(Error::parse(source, format!("line {}: expected {dim} values", n + 2)));
            }
            tokens.push(tok.to_string());
            data.extend(vals);
        }
        if tokens.len() != count {
            return Err(Error::parse(source, format!("header says {count} rows, found {}", tokens.len())));
        }
        let vocab = Vocab::from(tokens.clone());
        if vocab.tokens() != tokens.as_slice() {
            return Err(Error::parse(source, "rows must start with <unk> <bos> <eos> and be unique"));
        }
        EmbeddingTable::new(vocab, dim, data)
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Skip-gram with negative sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SkipGramConfig {
    pub dim: usize,
    pub window: usize,
    pub epochs: usize,
    pub negatives: usize,
    pub learning_rate: f64,
}

impl Default for SkipGramConfig {
    fn default() -> Self {
        SkipGramConfig {
            dim: 200,
            window: 5,
            epochs: 5,
            negatives: 5,
            learning_rate: 0.025,
        }
    }
}

/// Trains input vectors over `corpus`. Rows of `vocab` tokens that never
/// occur in the corpus keep their random initialisation; corpus tokens
/// missing from `vocab` are appended.
pub fn train_embeddings(corpus: &MaterialCorpus, vocab: &Vocab, cfg: &SkipGramConfig, seed: u64) -> Result<EmbeddingTable> {
    if corpus.documents.iter().all(|d| d.is_empty()) {
        return Err(Error::EmptyInput("embedding corpus"));
    }
    if cfg.dim == 0 || cfg.window == 0 {
        return Err(Error::InvalidArgument("embedding dim and window must be positive".into()));
    }
    let mut vocab = vocab.clone();
    let docs: Vec<Vec<usize>> = corpus
        .documents
        .iter()
        .map(|d| d.iter().map(|t| vocab.insert(t)).collect())
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut table = EmbeddingTable::random(vocab, cfg.dim, &mut rng);
    let n = table.len();
    let d = cfg.dim;
    let mut output = vec![0.0; n * d];

    let mut counts = vec![0usize; n];
    for &t in docs.iter().flatten() {
        counts[t] += 1;
    }
    let mut cumulative = Vec::with_capacity(n);
    let mut acc = 0.0;
    for &c in &counts {
        acc += (c as f64).powf(0.75);
        cumulative.push(acc);
    }
    let sample_negative = |rng: &mut ChaCha8Rng| -> usize {
        let x = rng.random::<f64>() * acc;
        cumulative.partition_point(|&c| c <= x).min(n - 1)
    };

    let total_steps = (cfg.epochs * counts.iter().sum::<usize>()).max(1) as f64;
    let mut step = 0usize;
    let mut grad_in = vec![0.0; d];
    for _ in 0..cfg.epochs {
        for doc in &docs {
            for (i, &center) in doc.iter().enumerate() {
                let lr = cfg.learning_rate * (1.0 - step as f64 / total_steps).max(1e-4);
                step += 1;
                let reach = rng.random_range(1..=cfg.window);
                let lo = i.saturating_sub(reach);
                let hi = (i + reach).min(doc.len() - 1);
                for j in lo..=hi {
                    if j == i {
                        continue;
                    }
                    let context = doc[j];
                    grad_in.fill(0.0);
                    let input = &mut table.data[center * d..(center + 1) * d];
                    for s in 0..=cfg.negatives {
                        let (target, label) = if s == 0 {
                            (context, 1.0)
                        } else {
                            let t = sample_negative(&mut rng);
                            if t == context {
                                continue;
                            }
                            (t, 0.0)
                        };
                        let out = &mut output[target * d..(target + 1) * d];
                        let dot: f64 = input.iter().zip(out.iter()).map(|(a, b)| a * b).sum();
                        let coeff = (label - sigmoid(dot)) * lr;
                        for k in 0..d {
                            grad_in[k] += coeff * out[k];
                            out[k] += coeff * input[k];
                        }
                    }
                    for (x, g) in input.iter_mut().zip(&grad_in) {
                        *x += g;
                    }
                }
            }
        }
    }
    table.data[UNK_ID * d..(UNK_ID + 1) * d].fill(0.0);
    if table.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("skip-gram training".into()));
    }
    Ok(table)
}
