//! Precomputed document embeddings with exact top-k search.
//!
//! File layout (integers little-endian):
//!
//! ```text
//! magic    b"DIDX"
//! version  u32
//! dim      u32
//! count    u32
//! hash_len u32, hash (UTF-8)
//! count × (id_len u32, id)
//! count × dim × f32
//! ```

use std::cmp::Ordering;
use std::collections::{BinaryHeap, HashSet};
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::encoder::{dot_f32, Embedding, ModelParams};
use crate::eval::DocEntry;
use crate::pooling::{embed_document_concat, PoolingError};
use crate::tensor::checkpoint_hash;
use crate::tokenizer::Vocab;
use crate::util::par_map;

pub const INDEX_MAGIC: &[u8; 4] = b"DIDX";
pub const INDEX_VERSION: u32 = 1;

const MAX_STRING: u32 = 1 << 16;

#[derive(Debug, Error)]
pub enum IndexError {
    #[error("duplicate document id `{0}`")]
    DuplicateId(String),
    #[error("embedding has dimension {got}, index has {expected}")]
    Dim { got: usize, expected: usize },
    #[error("k must be at least 1")]
    ZeroK,
    #[error("corrupt index: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Pooling(#[from] PoolingError),
}

pub type Result<T> = std::result::Result<T, IndexError>;

#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingIndex {
    pub ids: Vec<String>,
    pub dim: usize,
    /// Row-major `count × dim`.
    pub matrix: Vec<f32>,
    /// Checkpoint hash of the encoder that produced the rows.
    pub checkpoint_hash: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit {
    pub id: String,
    pub score: f32,
}

impl EmbeddingIndex {
    pub fn new(dim: usize, checkpoint_hash: impl Into<String>) -> Self {
        Self {
            ids: Vec::new(),
            dim,
            matrix: Vec::new(),
            checkpoint_hash: checkpoint_hash.into(),
        }
    }

    /// Builds an index from explicit rows. Ids must be unique.
    pub fn from_rows(ids: Vec<String>, rows: &[Embedding], checkpoint_hash: impl Into<String>) -> Result<Self> {
        let dim = rows.first().map_or(0, Embedding::dim);
        let mut idx = Self::new(dim, checkpoint_hash);
        let mut seen = HashSet::new();
        for (id, row) in ids.into_iter().zip(rows) {
            if !seen.insert(id.clone()) {
                return Err(IndexError::DuplicateId(id));
            }
            if row.dim() != dim {
                return Err(IndexError::Dim {
                    got: row.dim(),
                    expected: dim,
                });
            }
            idx.ids.push(id);
            idx.matrix.extend_from_slice(row.as_slice());
        }
        Ok(idx)
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    /// Whether `hash` names the encoder that built this index. A mismatch is
    /// logged: scores would compare vectors from different spaces.
    pub fn check_hash(&self, hash: &str) -> bool {
        let ok = self.checkpoint_hash == hash;
        if !ok {
            log::warn!(
                "index built by checkpoint {} but queries come from {}",
                short(&self.checkpoint_hash),
                short(hash)
            );
        }
        ok
    }
}

fn short(h: &str) -> &str {
    &h[..h.len().min(12)]
}

/// One row per document, embedded by concatenating its entities.
pub fn build_index(model: &ModelParams<f32>, vocab: &Vocab, docs: &[DocEntry]) -> Result<EmbeddingIndex> {
    build_index_threads(model, vocab, docs, 1)
}

/// [`build_index`] spread over `threads` workers; the result is identical.
pub fn build_index_threads(
    model: &ModelParams<f32>,
    vocab: &Vocab,
    docs: &[DocEntry],
    threads: usize,
) -> Result<EmbeddingIndex> {
    let mut seen = HashSet::new();
    for d in docs {
        if !seen.insert(d.id.as_str()) {
            return Err(IndexError::DuplicateId(d.id.clone()));
        }
    }
    let rows = par_map(docs, threads, |d| embed_document_concat(model, vocab, &d.doc))?;
    let mut idx = EmbeddingIndex::new(model.config.output_dim, checkpoint_hash(&model.params));
    for (d, e) in docs.iter().zip(rows) {
        idx.ids.push(d.id.clone());
        idx.matrix.extend_from_slice(e.as_slice());
    }
    Ok(idx)
}

/// Heap entry ordered so that the worst kept hit is the maximum.
struct Worst<'a> {
    score: f32,
    id: &'a str,
    row: usize,
}

impl Ord for Worst<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.score.total_cmp(&self.score).then_with(|| self.id.cmp(other.id))
    }
}

impl PartialOrd for Worst<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl PartialEq for Worst<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Worst<'_> {}

/// The `k` highest dot products, descending, ties by id ascending. Returns
/// every document when `k` exceeds the index size.
pub fn top_k(index: &EmbeddingIndex, q: &Embedding, k: usize) -> Result<Vec<Hit>> {
    if k == 0 {
        return Err(IndexError::ZeroK);
    }
    if q.dim() != index.dim && !index.is_empty() {
        return Err(IndexError::Dim {
            got: q.dim(),
            expected: index.dim,
        });
    }
    let mut heap: BinaryHeap<Worst> = BinaryHeap::with_capacity(k + 1);
    for (i, id) in index.ids.iter().enumerate() {
        let cand = Worst {
            score: dot_f32(q.as_slice(), index.row(i)),
            id,
            row: i,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("k >= 1") {
            heap.pop();
            heap.push(cand);
        }
    }
    Ok(heap
        .into_sorted_vec()
        .into_iter()
        .map(|w| Hit {
            id: index.ids[w.row].clone(),
            score: w.score,
        })
        .collect())
}

pub fn save_index<W: Write>(index: &EmbeddingIndex, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + index.matrix.len() * 4);
    buf.extend_from_slice(INDEX_MAGIC);
    buf.extend_from_slice(&INDEX_VERSION.to_le_bytes());
    buf.extend_from_slice(&(index.dim as u32).to_le_bytes());
    buf.extend_from_slice(&(index.len() as u32).to_le_bytes());
    for s in std::iter::once(&index.checkpoint_hash).chain(&index.ids) {
        buf.extend_from_slice(&(s.len() as u32).to_le_bytes());
        buf.extend_from_slice(s.as_bytes());
    }
    for v in &index.matrix {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated)?;
    Ok(u32::from_le_bytes(b))
}

fn truncated(e: io::Error) -> IndexError {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        IndexError::Format("file is truncated".into())
    } else {
        IndexError::Io(e)
    }
}

fn read_string<R: Read>(r: &mut R) -> Result<String> {
    let n = read_u32(r)?;
    if n > MAX_STRING {
        return Err(IndexError::Format(format!("string length {n} too large")));
    }
    let mut b = vec![0u8; n as usize];
    r.read_exact(&mut b).map_err(truncated)?;
    String::from_utf8(b).map_err(|_| IndexError::Format("string is not UTF-8".into()))
}

pub fn load_index<R: Read>(mut r: R) -> Result<EmbeddingIndex> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(truncated)?;
    if &magic != INDEX_MAGIC {
        return Err(IndexError::Format(format!("bad magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != INDEX_VERSION {
        return Err(IndexError::Format(format!("unsupported version {version}")));
    }
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let checkpoint_hash = read_string(&mut r)?;
    let mut ids = Vec::new();
    let mut seen = HashSet::new();
    for _ in 0..count {
        let id = read_string(&mut r)?;
        if !seen.insert(id.clone()) {
            return Err(IndexError::DuplicateId(id));
        }
        ids.push(id);
    }
    let mut raw = Vec::new();
    r.read_to_end(&mut raw)?;
    if raw.len() != count * dim * 4 {
        return Err(IndexError::Format(format!(
            "expected {} matrix bytes, found {}",
            count * dim * 4,
            raw.len()
        )));
    }
    let matrix = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    Ok(EmbeddingIndex {
        ids,
        dim,
        matrix,
        checkpoint_hash,
    })
}
