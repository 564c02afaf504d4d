//! Okapi BM25 over subword token ids.
//!
//! `score(q, d) = Σ_{t ∈ set(q)} idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·|d|/avgdl))`
//! with `idf(t) = max(0, ln((N − df + 0.5)/(df + 0.5)))`. Repeated query
//! tokens count once.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{EvalError, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub df: HashMap<u32, usize>,
    pub num_docs: usize,
    pub avg_len: f64,
    pub k1: f64,
    pub b: f64,
}

impl CorpusStats {
    pub fn build<D: AsRef<[u32]>>(docs: &[D]) -> Result<Self> {
        Self::with_params(docs, 1.2, 0.75)
    }

    pub fn with_params<D: AsRef<[u32]>>(docs: &[D], k1: f64, b: f64) -> Result<Self> {
        if docs.is_empty() {
            return Err(EvalError::Invalid("BM25 needs a non-empty corpus".into()));
        }
        let mut df: HashMap<u32, usize> = HashMap::new();
        let mut total = 0usize;
        for d in docs {
            let d = d.as_ref();
            total += d.len();
            for t in d.iter().collect::<HashSet<_>>() {
                *df.entry(*t).or_default() += 1;
            }
        }
        // An all-empty corpus still needs a positive average length.
        let avg_len = (total as f64 / docs.len() as f64).max(1.0);
        Ok(Self {
            df,
            num_docs: docs.len(),
            avg_len,
            k1,
            b,
        })
    }

    pub fn idf(&self, token: u32) -> f64 {
        let n = self.num_docs as f64;
        let df = *self.df.get(&token).unwrap_or(&0) as f64;
        ((n - df + 0.5) / (df + 0.5)).ln().max(0.0)
    }
}

pub fn bm25_score(query: &[u32], doc: &[u32], stats: &CorpusStats) -> f64 {
    let mut tf: HashMap<u32, usize> = HashMap::new();
    for t in doc {
        *tf.entry(*t).or_default() += 1;
    }
    let norm = stats.k1 * (1.0 - stats.b + stats.b * doc.len() as f64 / stats.avg_len);
    let mut seen = HashSet::new();
    let mut score = 0.0;
    for t in query {
        if !seen.insert(*t) {
            continue;
        }
        let Some(&f) = tf.get(t) else { continue };
        let f = f as f64;
        score += stats.idf(*t) * f * (stats.k1 + 1.0) / (f + norm);
    }
    score
}
