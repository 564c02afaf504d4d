//! Document embeddings from several text entities.
//!
//! `concat` joins the entities into one sequence and encodes it once, so the
//! result is independent of the query. `attention` encodes each entity on
//! its own and mixes them with query-conditioned softmax weights
//! `α_k ∝ exp(w₂ᵀ tanh(W₁[q; d_k] + b₁))`, renormalizing the sum to unit
//! length.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::encoder::{encode_text, EncoderError, Embedding, ModelParams, Side};
use crate::tensor::{Graph, NodeId, ParamSet, Real, Tensor, TensorError};
use crate::tokenizer::{encode, frame, TokenSequence, TokenizerError, Vocab, SEP};

pub const DEFAULT_MAX_ENTITIES: usize = 4;
pub const DEFAULT_ATTENTION_HIDDEN: usize = 32;

const ATTN_W1: &str = "attn.w1";
const ATTN_B1: &str = "attn.b1";
const ATTN_W2: &str = "attn.w2";

#[derive(Debug, Error)]
pub enum PoolingError {
    #[error("document has {0} entities, expected 1..={1}")]
    EntityCount(usize, usize),
    #[error("model has no attention parameters")]
    NoAttention,
    #[error("unknown pooling mode `{0}` (expected concat or attention)")]
    UnknownMode(String),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T, E = PoolingError> = std::result::Result<T, E>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EntityKind {
    Title,
    Description,
    Url,
    Caption,
    Other,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Entity {
    pub kind: EntityKind,
    pub text: String,
}

impl Entity {
    pub fn new(kind: EntityKind, text: impl Into<String>) -> Self {
        Self { kind, text: text.into() }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DocumentRecord {
    pub entities: Vec<Entity>,
    pub language: String,
}

impl DocumentRecord {
    pub fn new(entities: Vec<Entity>, language: impl Into<String>) -> Self {
        Self {
            entities,
            language: language.into(),
        }
    }

    pub fn validate(&self, max_entities: usize) -> Result<()> {
        let m = self.entities.len();
        if m == 0 || m > max_entities {
            return Err(PoolingError::EntityCount(m, max_entities));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolingMode {
    #[default]
    Concat,
    Attention,
}

impl FromStr for PoolingMode {
    type Err = PoolingError;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(PoolingMode::Concat),
            "attention" => Ok(PoolingMode::Attention),
            _ => Err(PoolingError::UnknownMode(s.to_string())),
        }
    }
}

impl fmt::Display for PoolingMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PoolingMode::Concat => "concat",
            PoolingMode::Attention => "attention",
        })
    }
}

/// `bos e₁ SEP e₂ SEP … eₘ eos`, skipping empty entities and truncated to
/// `max_len`.
pub fn concat_tokens(doc: &DocumentRecord, vocab: &Vocab, max_len: usize) -> Result<TokenSequence> {
    let mut body = Vec::new();
    for e in doc.entities.iter().filter(|e| !e.text.is_empty()) {
        if !body.is_empty() {
            body.push(SEP);
        }
        body.extend(vocab.tokenize(&e.text));
        if body.len() >= max_len {
            break;
        }
    }
    Ok(frame(body, max_len, true)?)
}

/// One truncated sequence per entity.
pub fn entity_tokens(doc: &DocumentRecord, vocab: &Vocab, max_len: usize) -> Result<Vec<TokenSequence>> {
    doc.entities
        .iter()
        .map(|e| encode(&e.text, vocab, max_len, true).map_err(Into::into))
        .collect()
}

pub fn embed_document_concat<T: Real>(model: &ModelParams<T>, vocab: &Vocab, doc: &DocumentRecord) -> Result<Embedding> {
    let toks = concat_tokens(doc, vocab, model.config.max_len_doc)?;
    Ok(encode_text(model, Side::Document, &toks)?)
}

/// Adds a fresh scoring net `2M → hidden → 1` under the `attn.` prefix.
pub fn init_attention<T: Real>(model: &mut ModelParams<T>, hidden: usize, seed: u64) -> Result<()> {
    let m = model.config.output_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut randn = |shape: [usize; 2], std: f64| {
        let normal = Normal::new(0.0, std).expect("valid std");
        let n = shape[0] * shape[1];
        Tensor::new(shape.to_vec(), (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()).expect("shape")
    };
    let w1 = randn([2 * m, hidden], (1.0 / (2 * m) as f64).sqrt());
    let w2 = randn([1, hidden], (1.0 / hidden as f64).sqrt());
    model.params.insert(ATTN_W1, w1)?;
    model.params.insert(ATTN_B1, Tensor::zeros(&[1, hidden]))?;
    model.params.insert(ATTN_W2, w2)?;
    Ok(())
}

pub fn has_attention<T: Real>(params: &ParamSet<T>) -> bool {
    params.contains(ATTN_W1) && params.contains(ATTN_B1) && params.contains(ATTN_W2)
}

/// Records `α = softmax(a(q, e_k))` as a `[1, m]` node for a `[1, M]` query
/// node and `[m, M]` entity node.
pub fn attention_weights_graph<T: Real>(g: &mut Graph<'_, T>, q: NodeId, entities: NodeId) -> Result<NodeId> {
    if !g.params().is_some_and(has_attention) {
        return Err(PoolingError::NoAttention);
    }
    let m = g.value(entities).rows();
    let qs = g.gather(q, &vec![0; m])?;
    let x = g.concat(&[qs, entities], 1)?;
    let w1 = g.param(ATTN_W1)?;
    let b1 = g.param(ATTN_B1)?;
    let w2 = g.param(ATTN_W2)?;
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.tanh(h)?;
    let scores = g.matmul_t(w2, h)?;
    Ok(g.softmax(scores)?)
}

/// Unit-normalized `Σ α_k e_k` as a `[1, M]` node.
pub fn attention_pool_graph<T: Real>(g: &mut Graph<'_, T>, q: NodeId, entities: NodeId) -> Result<NodeId> {
    let alpha = attention_weights_graph(g, q, entities)?;
    let mixed = g.matmul(alpha, entities)?;
    Ok(g.l2_normalize(mixed)?)
}

fn stack(embs: &[Embedding]) -> Result<Tensor<f64>> {
    let rows: Vec<Vec<f64>> = embs.iter().map(|e| e.as_slice().iter().map(|x| *x as f64).collect()).collect();
    Ok(Tensor::from_rows(&rows)?)
}

fn as_row(e: &Embedding) -> Tensor<f64> {
    Tensor::row(e.as_slice().iter().map(|x| *x as f64).collect())
}

/// Softmax attention weights of each entity embedding for query `q`.
pub fn attention_weights<T: Real>(params: &ParamSet<T>, q: &Embedding, entities: &[Embedding]) -> Result<Vec<f64>> {
    if entities.is_empty() {
        return Err(PoolingError::EntityCount(0, DEFAULT_MAX_ENTITIES));
    }
    let params = params.cast::<f64>();
    let mut g = Graph::with_params(&params);
    let qn = g.input(as_row(q));
    let en = g.input(stack(entities)?);
    let alpha = attention_weights_graph(&mut g, qn, en)?;
    Ok(g.value(alpha).data().to_vec())
}

/// Entity embeddings of `doc` through the document tower.
pub fn embed_entities<T: Real>(model: &ModelParams<T>, vocab: &Vocab, doc: &DocumentRecord) -> Result<Vec<Embedding>> {
    entity_tokens(doc, vocab, model.config.max_len_doc)?
        .iter()
        .map(|t| encode_text(model, Side::Document, t).map_err(Into::into))
        .collect()
}

/// Pools precomputed entity embeddings for query `q`.
pub fn pool_entities<T: Real>(params: &ParamSet<T>, q: &Embedding, entities: &[Embedding]) -> Result<Embedding> {
    let alpha = attention_weights(params, q, entities)?;
    if let [only] = entities {
        // α = [1] and the entity is already unit-norm.
        return Ok(only.clone());
    }
    let m = q.dim();
    let mut mixed = vec![0.0f64; m];
    for (a, e) in alpha.iter().zip(entities) {
        for (acc, v) in mixed.iter_mut().zip(e.as_slice()) {
            *acc += a * *v as f64;
        }
    }
    let norm = mixed.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Ok(Embedding::from_raw(mixed.iter().map(|x| (x / norm) as f32).collect()))
}

pub fn embed_document_attention<T: Real>(
    model: &ModelParams<T>,
    vocab: &Vocab,
    q: &Embedding,
    doc: &DocumentRecord,
) -> Result<Embedding> {
    let ents = embed_entities(model, vocab, doc)?;
    pool_entities(&model.params, q, &ents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::{init_params, EncoderConfig};

    fn model() -> ModelParams<f32> {
        let cfg = EncoderConfig {
            vocab_size: 259,
            num_layers: 1,
            model_dim: 16,
            num_heads: 2,
            ffn_dim: 16,
            output_dim: 8,
            max_len_query: 8,
            max_len_doc: 24,
            shared_weights: true,
        };
        let mut m = init_params(&cfg, 3).unwrap();
        init_attention(&mut m, 6, 4).unwrap();
        m
    }

    fn doc(texts: &[&str]) -> DocumentRecord {
        DocumentRecord::new(texts.iter().map(|t| Entity::new(EntityKind::Title, *t)).collect(), "en")
    }

    #[test]
    fn concat_single_entity_equals_plain_encoding() {
        let m = model();
        let v = Vocab::bytes_only();
        let a = embed_document_concat(&m, &v, &doc(&["bee sounds"])).unwrap();
        let b = encode_text(&m, Side::Document, &encode("bee sounds", &v, 24, true).unwrap()).unwrap();
        assert_eq!(a, b);
        let ab = embed_document_concat(&m, &v, &doc(&["ab", "cd"])).unwrap();
        let ba = embed_document_concat(&m, &v, &doc(&["cd", "ab"])).unwrap();
        assert_ne!(ab, ba);
    }

    #[test]
    fn concat_layout_and_truncation() {
        let v = Vocab::bytes_only();
        let t = concat_tokens(&doc(&["a", "", "b"]), &v, 10).unwrap();
        assert_eq!(t.active(), &[1, 3 + b'a' as u32, SEP, 3 + b'b' as u32, 2]);
        let long = "x".repeat(30);
        let full = concat_tokens(&doc(&[&long, "tail"]), &v, 24).unwrap();
        let alone = concat_tokens(&doc(&[&long]), &v, 24).unwrap();
        assert_eq!(full, alone);
        let empty = concat_tokens(&doc(&["", ""]), &v, 10).unwrap();
        assert_eq!(empty.active(), &[1, 2]);
    }

    #[test]
    fn entity_count_validation() {
        assert!(doc(&[]).validate(4).is_err());
        assert!(doc(&["a"; 5]).validate(4).is_err());
        assert!(doc(&["a"; 4]).validate(4).is_ok());
    }

    #[test]
    fn attention_weight_cases() {
        let m = model();
        let v = Vocab::bytes_only();
        let q = encode_text(&m, Side::Query, &encode("q", &v, 8, true).unwrap()).unwrap();
        let e = embed_entities(&m, &v, &doc(&["one"])).unwrap();
        assert_eq!(attention_weights(&m.params, &q, &e).unwrap(), vec![1.0]);
        assert_eq!(pool_entities(&m.params, &q, &e).unwrap().as_slice(), e[0].as_slice());
        let same = embed_entities(&m, &v, &doc(&["dup", "dup", "dup"])).unwrap();
        for a in attention_weights(&m.params, &q, &same).unwrap() {
            assert!((a - 1.0 / 3.0).abs() < 1e-12);
        }
        let pooled = pool_entities(&m.params, &q, &same).unwrap();
        for (x, y) in pooled.as_slice().iter().zip(same[0].as_slice()) {
            assert!((x - y).abs() < 1e-6);
        }
        let bare = init_params(&m.config, 0).unwrap();
        assert!(matches!(attention_weights(&bare.params, &q, &e), Err(PoolingError::NoAttention)));
    }

    #[test]
    fn hand_set_scores_give_quarter_three_quarters() {
        // w1 = 0 except a unit path from the first entity coordinate; b1 = 0;
        // tanh saturation is avoided by choosing w2 so scores are 0 and ln 3.
        let mut ps = ParamSet::<f64>::new();
        let mut w1 = Tensor::zeros(&[4, 1]);
        w1.data_mut()[2] = 0.5;
        ps.insert(ATTN_W1, w1).unwrap();
        ps.insert(ATTN_B1, Tensor::zeros(&[1, 1])).unwrap();
        let target = 3f64.ln();
        ps.insert(ATTN_W2, Tensor::row(vec![target / 0.5f64.tanh()])).unwrap();
        let q = Embedding::from_raw(vec![1.0, 0.0]);
        let e = [Embedding::from_raw(vec![0.0, 1.0]), Embedding::from_raw(vec![1.0, 0.0])];
        let a = attention_weights(&ps, &q, &e).unwrap();
        assert!((a[0] - 0.25).abs() < 1e-12 && (a[1] - 0.75).abs() < 1e-12, "{a:?}");
    }

    #[test]
    fn mode_names() {
        assert_eq!("attention".parse::<PoolingMode>().unwrap(), PoolingMode::Attention);
        assert_eq!(PoolingMode::Concat.to_string(), "concat");
        assert!("max".parse::<PoolingMode>().is_err());
    }
}
