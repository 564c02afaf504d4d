//! Judged-set evaluation of encoders and lexical baselines.

pub mod bm25;
pub mod levenshtein;
pub mod metrics;

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::Label;
use crate::encoder::{dot_f32, encode_text, EncoderError, Embedding, ModelParams, Side};
use crate::pooling::{embed_document_concat, embed_entities, pool_entities, DocumentRecord, PoolingError, PoolingMode};
use crate::tokenizer::{encode, TokenizerError, Vocab};

pub use bm25::{bm25_score, CorpusStats};
pub use levenshtein::{levenshtein, levenshtein_similarity};
pub use metrics::{average_precision, dcg_at_k, mean_average_precision, ndcg_at_k, recall_at_k, roc_auc};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("ROC-AUC needs both positive and negative labels")]
    SingleClass,
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocEntry {
    pub id: String,
    pub doc: DocumentRecord,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Judgment {
    pub doc: String,
    pub gain: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgedQuery {
    pub id: String,
    pub text: String,
    pub judgments: Vec<Judgment>,
    /// Re-ranking candidates; the whole corpus is ranked when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub candidates: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairItem {
    pub query: String,
    pub doc: DocumentRecord,
    pub label: Label,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PairSet {
    pub name: String,
    pub pairs: Vec<PairItem>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JudgedSet {
    pub docs: Vec<DocEntry>,
    pub queries: Vec<JudgedQuery>,
    #[serde(default)]
    pub pair_sets: Vec<PairSet>,
    /// Smallest gain counted as relevant by recall and mAP.
    #[serde(default = "default_threshold")]
    pub relevance_threshold: f64,
}

/// Threshold under which any positive gain is relevant.
pub const ANY_GAIN: f64 = f64::MIN_POSITIVE;

fn default_threshold() -> f64 {
    ANY_GAIN
}

/// Plain text of a document for lexical baselines.
pub fn doc_text(doc: &DocumentRecord) -> String {
    doc.entities
        .iter()
        .map(|e| e.text.as_str())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

pub trait Scorer {
    fn name(&self) -> String;
    /// Scores for each of `docs` under `query`; higher is better.
    fn score_docs(&mut self, query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>>;
    fn score_pair(&mut self, pair: &PairItem) -> Result<f64>;
}

enum DocEmb {
    Concat(Embedding),
    Entities(Vec<Embedding>),
}

/// Dot-product scorer. The query and document towers may come from
/// different checkpoints (a distilled query encoder against teacher
/// document embeddings).
pub struct EncoderScorer<'a> {
    query_model: &'a ModelParams<f32>,
    doc_model: &'a ModelParams<f32>,
    vocab: &'a Vocab,
    pooling: PoolingMode,
    cache: HashMap<String, DocEmb>,
}

impl<'a> EncoderScorer<'a> {
    pub fn new(model: &'a ModelParams<f32>, vocab: &'a Vocab, pooling: PoolingMode) -> Self {
        Self::asymmetric(model, model, vocab, pooling)
    }

    pub fn asymmetric(
        query_model: &'a ModelParams<f32>,
        doc_model: &'a ModelParams<f32>,
        vocab: &'a Vocab,
        pooling: PoolingMode,
    ) -> Self {
        Self {
            query_model,
            doc_model,
            vocab,
            pooling,
            cache: HashMap::new(),
        }
    }

    fn embed_query(&self, text: &str) -> Result<Embedding> {
        let toks = encode(text, self.vocab, self.query_model.config.max_len_query, true)?;
        Ok(encode_text(self.query_model, Side::Query, &toks)?)
    }

    fn doc_emb(&self, doc: &DocumentRecord) -> Result<DocEmb> {
        Ok(match self.pooling {
            PoolingMode::Concat => DocEmb::Concat(embed_document_concat(self.doc_model, self.vocab, doc)?),
            PoolingMode::Attention => DocEmb::Entities(embed_entities(self.doc_model, self.vocab, doc)?),
        })
    }

    fn score_emb(&self, q: &Embedding, d: &DocEmb) -> Result<f64> {
        Ok(match d {
            DocEmb::Concat(e) => dot_f32(q.as_slice(), e.as_slice()) as f64,
            DocEmb::Entities(es) => {
                let pooled = pool_entities(&self.doc_model.params, q, es)?;
                dot_f32(q.as_slice(), pooled.as_slice()) as f64
            }
        })
    }
}

impl Scorer for EncoderScorer<'_> {
    fn name(&self) -> String {
        format!("encoder-{}", self.pooling)
    }

    fn score_docs(&mut self, query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>> {
        let q = self.embed_query(&query.text)?;
        for d in docs {
            if !self.cache.contains_key(&d.id) {
                let e = self.doc_emb(&d.doc)?;
                self.cache.insert(d.id.clone(), e);
            }
        }
        docs.iter().map(|d| self.score_emb(&q, &self.cache[&d.id])).collect()
    }

    fn score_pair(&mut self, pair: &PairItem) -> Result<f64> {
        let q = self.embed_query(&pair.query)?;
        let d = self.doc_emb(&pair.doc)?;
        self.score_emb(&q, &d)
    }
}

/// Token-level BM25 with corpus statistics over every document of a judged
/// set (ranked corpus and pair sets).
pub struct Bm25Scorer<'a> {
    vocab: &'a Vocab,
    stats: CorpusStats,
}

impl<'a> Bm25Scorer<'a> {
    pub fn new(vocab: &'a Vocab, judged: &JudgedSet) -> Result<Self> {
        let mut docs: Vec<Vec<u32>> = judged.docs.iter().map(|d| vocab.tokenize(&doc_text(&d.doc))).collect();
        for s in &judged.pair_sets {
            docs.extend(s.pairs.iter().map(|p| vocab.tokenize(&doc_text(&p.doc))));
        }
        Ok(Self {
            vocab,
            stats: CorpusStats::build(&docs)?,
        })
    }
}

impl Scorer for Bm25Scorer<'_> {
    fn name(&self) -> String {
        "bm25".into()
    }

    fn score_docs(&mut self, query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>> {
        let q = self.vocab.tokenize(&query.text);
        Ok(docs
            .iter()
            .map(|d| bm25_score(&q, &self.vocab.tokenize(&doc_text(&d.doc)), &self.stats))
            .collect())
    }

    fn score_pair(&mut self, pair: &PairItem) -> Result<f64> {
        let q = self.vocab.tokenize(&pair.query);
        Ok(bm25_score(&q, &self.vocab.tokenize(&doc_text(&pair.doc)), &self.stats))
    }
}

pub struct LevenshteinScorer;

impl Scorer for LevenshteinScorer {
    fn name(&self) -> String {
        "levenshtein".into()
    }

    fn score_docs(&mut self, query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>> {
        Ok(docs.iter().map(|d| levenshtein_similarity(&query.text, &doc_text(&d.doc))).collect())
    }

    fn score_pair(&mut self, pair: &PairItem) -> Result<f64> {
        Ok(levenshtein_similarity(&pair.query, &doc_text(&pair.doc)))
    }
}

/// Scores every document with its judged gain: the best possible ranking.
pub struct OracleScorer;

impl Scorer for OracleScorer {
    fn name(&self) -> String {
        "oracle".into()
    }

    fn score_docs(&mut self, query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>> {
        let gains: HashMap<&str, f64> = query.judgments.iter().map(|j| (j.doc.as_str(), j.gain)).collect();
        Ok(docs.iter().map(|d| *gains.get(d.id.as_str()).unwrap_or(&0.0)).collect())
    }

    fn score_pair(&mut self, pair: &PairItem) -> Result<f64> {
        Ok(pair.label.as_f64())
    }
}

/// Uniform random scores from a seeded stream.
pub struct RandomScorer {
    rng: ChaCha8Rng,
}

impl RandomScorer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }
}

impl Scorer for RandomScorer {
    fn name(&self) -> String {
        "random".into()
    }

    fn score_docs(&mut self, _query: &JudgedQuery, docs: &[&DocEntry]) -> Result<Vec<f64>> {
        Ok(docs.iter().map(|_| self.rng.random::<f64>()).collect())
    }

    fn score_pair(&mut self, _pair: &PairItem) -> Result<f64> {
        Ok(self.rng.random::<f64>())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scorer: String,
    pub depths: Vec<usize>,
    pub num_queries: usize,
    /// Queries with nothing at or above the relevance threshold; left out of
    /// mAP and recall. NDCG skips only queries with no positive gain at all.
    pub excluded_queries: usize,
    /// Judged or candidate ids that are not in the corpus.
    pub missing_docs: Vec<String>,
    pub metrics: BTreeMap<String, f64>,
}

impl EvalReport {
    pub fn metric(&self, name: &str) -> Option<f64> {
        self.metrics.get(name).copied()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("scorer,metric,value\n");
        for (k, v) in &self.metrics {
            let _ = writeln!(out, "{},{k},{v}", self.scorer);
        }
        out
    }
}

/// Ranks `scores` descending, breaking ties by id ascending.
pub fn rank_order(ids: &[&str], scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..ids.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then_with(|| ids[a].cmp(ids[b])));
    order
}

pub fn evaluate(scorer: &mut dyn Scorer, judged: &JudgedSet, depths: &[usize]) -> Result<EvalReport> {
    if depths.is_empty() || depths.contains(&0) {
        return Err(EvalError::Invalid("depths must be non-empty and at least 1".into()));
    }
    let by_id: HashMap<&str, &DocEntry> = judged.docs.iter().map(|d| (d.id.as_str(), d)).collect();
    if by_id.len() != judged.docs.len() {
        return Err(EvalError::Invalid("duplicate document ids in judged set".into()));
    }
    let mut missing = Vec::new();
    let mut sums: BTreeMap<String, f64> = BTreeMap::new();
    let mut counted = 0usize;
    let mut graded = 0usize;
    let mut ap_lists = Vec::new();
    for q in &judged.queries {
        let pool_ids: Vec<&str> = match &q.candidates {
            Some(c) => c.iter().map(String::as_str).collect(),
            None => judged.docs.iter().map(|d| d.id.as_str()).collect(),
        };
        let mut docs = Vec::with_capacity(pool_ids.len());
        for id in pool_ids {
            match by_id.get(id) {
                Some(d) => docs.push(*d),
                None => missing.push(id.to_string()),
            }
        }
        let mut gains: HashMap<&str, f64> = HashMap::new();
        for j in &q.judgments {
            if by_id.contains_key(j.doc.as_str()) {
                gains.insert(j.doc.as_str(), j.gain);
            } else {
                missing.push(j.doc.clone());
            }
        }
        let scores = scorer.score_docs(q, &docs)?;
        let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        let order = rank_order(&ids, &scores);
        let ranked: Vec<f64> = order.iter().map(|&i| *gains.get(ids[i]).unwrap_or(&0.0)).collect();
        let relevant: Vec<bool> = ranked.iter().map(|g| *g >= judged.relevance_threshold).collect();
        // Relevance is judged within the ranked pool.
        let pool: Vec<f64> = ids.iter().filter_map(|id| gains.get(id).copied()).collect();
        let total_rel = pool.iter().filter(|g| **g >= judged.relevance_threshold).count();
        for &k in depths {
            *sums.entry(format!("dcg@{k}")).or_default() += dcg_at_k(&ranked, k);
        }
        ap_lists.push((relevant.clone(), total_rel));
        if pool.iter().any(|g| *g > 0.0) {
            graded += 1;
            for &k in depths {
                *sums.entry(format!("ndcg@{k}")).or_default() += ndcg_at_k(&ranked, &pool, k);
            }
        }
        if total_rel > 0 {
            counted += 1;
            for &k in depths {
                *sums.entry(format!("recall@{k}")).or_default() +=
                    recall_at_k(&relevant, total_rel, k).expect("has relevant");
            }
        }
    }
    let nq = judged.queries.len();
    let mut metrics = BTreeMap::new();
    for (k, v) in sums {
        let denom = if k.starts_with("dcg@") {
            nq
        } else if k.starts_with("ndcg@") {
            graded
        } else {
            counted
        };
        metrics.insert(k, if denom == 0 { 0.0 } else { v / denom as f64 });
    }
    if nq > 0 {
        let (map, _) = mean_average_precision(&ap_lists);
        metrics.insert("map".into(), map);
    }
    for set in &judged.pair_sets {
        let mut scores = Vec::with_capacity(set.pairs.len());
        for p in &set.pairs {
            scores.push(scorer.score_pair(p)?);
        }
        let labels: Vec<bool> = set.pairs.iter().map(|p| p.label == Label::Positive).collect();
        metrics.insert(format!("roc:{}", set.name), roc_auc(&scores, &labels)?);
    }
    missing.sort();
    missing.dedup();
    if !missing.is_empty() {
        log::warn!("{} referenced documents missing from the corpus", missing.len());
    }
    Ok(EvalReport {
        scorer: scorer.name(),
        depths: depths.to_vec(),
        num_queries: nq,
        excluded_queries: nq - counted,
        missing_docs: missing,
        metrics,
    })
}

/// Fixed-width grid, one row per report and one column per metric.
pub fn format_grid(reports: &[EvalReport]) -> String {
    let mut cols: Vec<&String> = reports.iter().flat_map(|r| r.metrics.keys()).collect();
    cols.sort();
    cols.dedup();
    let mut out = format!("{:<20}", "scorer");
    for c in &cols {
        let _ = write!(out, " {c:>14}");
    }
    out.push('\n');
    for r in reports {
        let _ = write!(out, "{:<20}", r.scorer);
        for c in &cols {
            match r.metrics.get(*c) {
                Some(v) => {
                    let _ = write!(out, " {v:>14.4}");
                }
                None => {
                    let _ = write!(out, " {:>14}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}
