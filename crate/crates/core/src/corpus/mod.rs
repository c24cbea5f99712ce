//! Data model, tokenization, vocabulary, entity dictionary, embeddings and
//! the synthetic fixture generator.

mod embeddings;
mod entities;
pub mod synth;
mod text;
mod vocab;

use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use embeddings::{train_embeddings, EmbeddingTable, SkipGramConfig};
pub use entities::{Entity, EntityDictionary, EntitySpan, OTHER_TYPE};
pub use synth::{synth_corpus, SynthCorpus, SynthSpec};
pub use text::{detokenize, split_phrases, tokenize, PHRASE_DELIMITERS};
pub use vocab::{Vocab, BOS, BOS_ID, EOS, EOS_ID, NUM_SPECIALS, UNK, UNK_ID};

use crate::{Error, Result};

/// One question phrase.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct Phrase {
    pub tokens: Vec<String>,
}

impl Phrase {
    pub fn new(tokens: Vec<String>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("phrase"));
        }
        Ok(Phrase { tokens })
    }

    pub fn parse(text: &str) -> Result<Self> {
        Phrase::new(tokenize(text))
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn text(&self) -> String {
        detokenize(&self.tokens)
    }
}

/// An answer and its question, the latter pre-split into ordered phrases.
#[derive(Clone, Debug, PartialEq)]
pub struct QaPair {
    pub id: String,
    pub answer: Vec<String>,
    pub phrases: Vec<Phrase>,
}

/// Line-delimited record of the QA pairs file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QaRecord {
    pub id: String,
    pub answer: String,
    pub phrases: Vec<String>,
}

impl QaPair {
    pub fn new(id: impl Into<String>, answer: Vec<String>, phrases: Vec<Phrase>) -> Result<Self> {
        if phrases.is_empty() {
            return Err(Error::EmptyInput("question phrases"));
        }
        Ok(QaPair {
            id: id.into(),
            answer,
            phrases,
        })
    }

    /// Builds a pair from raw question text, splitting phrases on `delimiters`.
    pub fn from_raw(id: impl Into<String>, answer: &str, question: &str, delimiters: &[char]) -> Result<Self> {
        let phrases = split_phrases(question, delimiters)
            .into_iter()
            .map(Phrase::new)
            .collect::<Result<Vec<_>>>()?;
        QaPair::new(id, tokenize(answer), phrases)
    }

    pub fn num_phrases(&self) -> usize {
        self.phrases.len()
    }

    /// All question tokens in order.
    pub fn question_tokens(&self) -> Vec<String> {
        self.phrases.iter().flat_map(|p| p.tokens.iter().cloned()).collect()
    }

    /// Token offset of each phrase inside [`Self::question_tokens`].
    pub fn phrase_offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.phrases
            .iter()
            .map(|p| {
                let o = off;
                off += p.len();
                o
            })
            .collect()
    }

    pub fn to_record(&self) -> QaRecord {
        QaRecord {
            id: self.id.clone(),
            answer: detokenize(&self.answer),
            phrases: self.phrases.iter().map(Phrase::text).collect(),
        }
    }

    pub fn from_record(r: &QaRecord) -> Result<Self> {
        let phrases = r.phrases.iter().map(|p| Phrase::parse(p)).collect::<Result<Vec<_>>>()?;
        QaPair::new(r.id.clone(), tokenize(&r.answer), phrases)
    }
}

/// Unstructured documents the detector retrieves from.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MaterialCorpus {
    pub documents: Vec<Vec<String>>,
}

impl MaterialCorpus {
    pub fn new(documents: Vec<Vec<String>>) -> Self {
        MaterialCorpus { documents }
    }

    pub fn len(&self) -> usize {
        self.documents.len()
    }

    pub fn is_empty(&self) -> bool {
        self.documents.is_empty()
    }

    /// One document per line.
    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(MaterialCorpus::new(
            text.lines().map(tokenize).filter(|d| !d.is_empty()).collect(),
        ))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut s = String::new();
        for d in &self.documents {
            s.push_str(&detokenize(d));
            s.push('\n');
        }
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }
}

pub fn read_pairs(path: &Path) -> Result<Vec<QaPair>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: QaRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(path.display().to_string(), format!("line {}: {e}", n + 1)))?;
        out.push(QaPair::from_record(&rec)?);
    }
    Ok(out)
}

pub fn write_pairs(path: &Path, pairs: &[QaPair]) -> Result<()> {
    let mut buf = Vec::new();
    for p in pairs {
        serde_json::to_writer(&mut buf, &p.to_record())?;
        buf.push(b'\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Vocabulary over every answer and question token of `pairs` plus every
/// material token, in first-seen order.
pub fn build_vocab(pairs: &[QaPair], materials: &MaterialCorpus) -> Vocab {
    let mut v = Vocab::new();
    for p in pairs {
        for t in p.answer.iter().chain(p.phrases.iter().flat_map(|ph| &ph.tokens)) {
            v.insert(t);
        }
    }
    for d in &materials.documents {
        for t in d {
            v.insert(t);
        }
    }
    v
}
