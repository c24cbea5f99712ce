//! In-process BM25 inverted index.
//!
//! `score(D, Q) = sum_{q in unique(Q)} idf(q) * tf(q, D) * (k1 + 1) / (tf(q, D) + k1 * (1 - b + b * |D| / avgdl))`
//! with `idf(q) = ln(1 + (N - n_q + 0.5) / (n_q + 0.5))`.

use std::collections::{BTreeSet, HashMap};

use crate::corpus::MaterialCorpus;

#[derive(Clone, Debug)]
pub struct Bm25Index {
    postings: HashMap<String, Vec<(usize, usize)>>,
    doc_len: Vec<usize>,
    avg_len: f64,
    k1: f64,
    b: f64,
}

impl Bm25Index {
    pub fn new(corpus: &MaterialCorpus, k1: f64, b: f64) -> Self {
        let mut postings: HashMap<String, Vec<(usize, usize)>> = HashMap::new();
        for (d, doc) in corpus.documents.iter().enumerate() {
            let mut tf: HashMap<&str, usize> = HashMap::new();
            for t in doc {
                *tf.entry(t.as_str()).or_default() += 1;
            }
            for (t, n) in tf {
                postings.entry(t.to_string()).or_default().push((d, n));
            }
        }
        for list in postings.values_mut() {
            list.sort_unstable();
        }
        let doc_len: Vec<usize> = corpus.documents.iter().map(Vec::len).collect();
        let avg_len = doc_len.iter().sum::<usize>() as f64 / doc_len.len().max(1) as f64;
        Bm25Index {
            postings,
            doc_len,
            avg_len,
            k1,
            b,
        }
    }

    pub fn num_docs(&self) -> usize {
        self.doc_len.len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.postings.get(term).map_or(0, Vec::len) as f64;
        let total = self.num_docs() as f64;
        (1.0 + (total - n + 0.5) / (n + 0.5)).ln()
    }

    /// Score of every document for `query` (unique terms).
    pub fn scores<S: AsRef<str>>(&self, query: &[S]) -> Vec<f64> {
        let mut out = vec![0.0; self.num_docs()];
        let terms: BTreeSet<&str> = query.iter().map(AsRef::as_ref).collect();
        for term in terms {
            let Some(list) = self.postings.get(term) else { continue };
            let idf = self.idf(term);
            for &(d, tf) in list {
                let tf = tf as f64;
                let norm = self.k1 * (1.0 - self.b + self.b * self.doc_len[d] as f64 / self.avg_len);
                out[d] += idf * tf * (self.k1 + 1.0) / (tf + norm);
            }
        }
        out
    }

    /// Documents containing every token of `required`.
    pub fn containing_all<S: AsRef<str>>(&self, required: &[S]) -> Vec<bool> {
        let mut keep = vec![true; self.num_docs()];
        for t in required {
            let mut has = vec![false; self.num_docs()];
            if let Some(list) = self.postings.get(t.as_ref()) {
                for &(d, _) in list {
                    has[d] = true;
                }
            }
            for (k, h) in keep.iter_mut().zip(has) {
                *k &= h;
            }
        }
        keep
    }

    /// Top `m` documents by score among those passing `filter`; ties go to the lower doc id.
    pub fn top_k<S: AsRef<str>>(&self, query: &[S], filter: &[bool], m: usize) -> Vec<(usize, f64)> {
        let scores = self.scores(query);
        let mut ranked: Vec<(usize, f64)> = scores
            .into_iter()
            .enumerate()
            .filter(|&(d, _)| filter[d])
            .collect();
        ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
        ranked.truncate(m);
        ranked
    }
}
