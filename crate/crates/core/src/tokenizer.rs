//! Byte-level BPE tokenizer.
//!
//! Ids `0..3` are reserved (`pad`, `bos`, `eos`), ids `3..259` are the 256
//! raw bytes, and every learned merge adds one id after that. Because every
//! byte has a token, any UTF-8 string encodes without unknown tokens.
//!
//! Text is pre-split into chunks at each whitespace run that follows a
//! non-whitespace character, so `"a b  c"` becomes `["a", " b", "  c"]`.
//! Merges never cross chunk boundaries.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use thiserror::Error;

pub const PAD: u32 = 0;
pub const BOS: u32 = 1;
pub const EOS: u32 = 2;
/// Entity separator inside concatenated documents; shares the `eos` id.
pub const SEP: u32 = EOS;
pub const NUM_RESERVED: usize = 3;
pub const BYTE_VOCAB: usize = NUM_RESERVED + 256;

const FILE_HEADER: &str = "mtenc-bpe v1";

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("cannot train on an empty corpus")]
    EmptyCorpus,
    #[error("vocab size {0} is below the {BYTE_VOCAB} reserved+byte tokens")]
    VocabTooSmall(usize),
    #[error("max_len must be at least 1")]
    ZeroMaxLen,
    #[error("sequence of {len} tokens exceeds max_len {max_len}")]
    Overlength { len: usize, max_len: usize },
    #[error("unknown token id {0}")]
    UnknownId(u32),
    #[error("vocab file line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = TokenizerError> = std::result::Result<T, E>;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    /// Byte string of every id; reserved ids map to empty strings.
    tokens: Vec<Vec<u8>>,
    merges: Vec<(u32, u32)>,
    ranks: HashMap<(u32, u32), u32>,
    seed: u64,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<u32>,
    pub true_length: usize,
}

impl TokenSequence {
    /// The non-pad prefix.
    pub fn active(&self) -> &[u32] {
        &self.ids[..self.true_length]
    }

    /// Wraps already-built ids (including any bos/eos) and pads to `max_len`.
    pub fn from_ids(mut ids: Vec<u32>, max_len: usize) -> Result<Self> {
        if ids.len() > max_len {
            return Err(TokenizerError::Overlength {
                len: ids.len(),
                max_len,
            });
        }
        let true_length = ids.len();
        ids.resize(max_len, PAD);
        Ok(Self { ids, true_length })
    }
}

/// Splits text into BPE chunks; concatenating the chunks restores the input.
pub fn pre_split(text: &str) -> Vec<&str> {
    let mut chunks = Vec::new();
    let mut start = 0;
    let mut prev_ws = true;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if ws && !prev_ws && i > start {
            chunks.push(&text[start..i]);
            start = i;
        }
        prev_ws = ws;
    }
    if start < text.len() {
        chunks.push(&text[start..]);
    }
    chunks
}

fn byte_ids(chunk: &str) -> Vec<u32> {
    chunk.bytes().map(|b| b as u32 + NUM_RESERVED as u32).collect()
}

fn merge_pair(word: &mut Vec<u32>, pair: (u32, u32), new_id: u32) {
    let mut out = Vec::with_capacity(word.len());
    let mut i = 0;
    while i < word.len() {
        if i + 1 < word.len() && (word[i], word[i + 1]) == pair {
            out.push(new_id);
            i += 2;
        } else {
            out.push(word[i]);
            i += 1;
        }
    }
    *word = out;
}

impl Vocab {
    /// The 259-token vocabulary with no merges.
    pub fn bytes_only() -> Self {
        let mut tokens = vec![Vec::new(); NUM_RESERVED];
        tokens.extend((0..=255u8).map(|b| vec![b]));
        Self {
            tokens,
            merges: Vec::new(),
            ranks: HashMap::new(),
            seed: 0,
        }
    }

    pub fn size(&self) -> usize {
        self.tokens.len()
    }

    pub fn merges(&self) -> &[(u32, u32)] {
        &self.merges
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn token_bytes(&self, id: u32) -> Option<&[u8]> {
        self.tokens.get(id as usize).map(Vec::as_slice)
    }

    fn push_merge(&mut self, pair: (u32, u32)) -> u32 {
        let new_id = self.tokens.len() as u32;
        let mut bytes = self.tokens[pair.0 as usize].clone();
        bytes.extend_from_slice(&self.tokens[pair.1 as usize]);
        self.tokens.push(bytes);
        self.ranks.insert(pair, self.merges.len() as u32);
        self.merges.push(pair);
        new_id
    }

    /// Subword ids for `text`, without bos/eos.
    pub fn tokenize(&self, text: &str) -> Vec<u32> {
        let mut out = Vec::new();
        for chunk in pre_split(text) {
            out.extend(self.tokenize_chunk(chunk));
        }
        out
    }

    fn tokenize_chunk(&self, chunk: &str) -> Vec<u32> {
        let mut word = byte_ids(chunk);
        if self.merges.is_empty() {
            return word;
        }
        loop {
            let best = word
                .windows(2)
                .filter_map(|w| self.ranks.get(&(w[0], w[1])).map(|r| (*r, (w[0], w[1]))))
                .min();
            let Some((rank, pair)) = best else { break };
            merge_pair(&mut word, pair, BYTE_VOCAB as u32 + rank);
        }
        word
    }

    /// Writes the text vocab file: a header, then one merge per line as
    /// `left_id right_id merged_bytes_hex`.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "{FILE_HEADER}")?;
        writeln!(w, "vocab_size {}", self.size())?;
        writeln!(w, "seed {}", self.seed)?;
        for (i, (a, b)) in self.merges.iter().enumerate() {
            let id = BYTE_VOCAB + i;
            writeln!(w, "{a} {b} {}", hex::encode(&self.tokens[id]))?;
        }
        Ok(())
    }

    pub fn read_from<R: BufRead>(r: R) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((i, l)) => Ok((i + 1, l?)),
                None => Err(TokenizerError::Parse {
                    line: 0,
                    msg: format!("missing {what}"),
                }),
            }
        };
        let (ln, header) = next("header")?;
        if header.trim_end() != FILE_HEADER {
            return Err(TokenizerError::Parse {
                line: ln,
                msg: format!("expected `{FILE_HEADER}`"),
            });
        }
        let field = |(ln, l): (usize, String), key: &str| -> Result<u64> {
            l.strip_prefix(key)
                .and_then(|v| v.trim().parse().ok())
                .ok_or(TokenizerError::Parse {
                    line: ln,
                    msg: format!("expected `{key} <int>`"),
                })
        };
        let size = field(next("vocab_size")?, "vocab_size")? as usize;
        let seed = field(next("seed")?, "seed")?;
        if size < BYTE_VOCAB {
            return Err(TokenizerError::VocabTooSmall(size));
        }
        let mut vocab = Self::bytes_only();
        vocab.seed = seed;
        for (i, line) in lines {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let ln = i + 1;
            let err = |msg: &str| TokenizerError::Parse {
                line: ln,
                msg: msg.to_string(),
            };
            let mut parts = line.split_whitespace();
            let a: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad left id"))?;
            let b: u32 = parts.next().and_then(|s| s.parse().ok()).ok_or_else(|| err("bad right id"))?;
            let expect = parts.next().and_then(|s| hex::decode(s).ok()).ok_or_else(|| err("bad merged bytes"))?;
            let n = vocab.size() as u32;
            if a < NUM_RESERVED as u32 || b < NUM_RESERVED as u32 || a >= n || b >= n {
                return Err(err("merge refers to an unknown or reserved id"));
            }
            let id = vocab.push_merge((a, b));
            if vocab.tokens[id as usize] != expect {
                return Err(err("merged bytes do not match the merge pair"));
            }
        }
        if vocab.size() != size {
            return Err(TokenizerError::Parse {
                line: 2,
                msg: format!("header says {size} tokens, file defines {}", vocab.size()),
            });
        }
        Ok(vocab)
    }
}

/// Learns `vocab_size − 259` merges from `corpus`. Pair-frequency ties go to
/// the lexicographically smallest `(left bytes, right bytes)`. Training stops
/// early if the corpus runs out of adjacent pairs.
pub fn train_bpe<S: AsRef<str>>(corpus: &[S], vocab_size: usize, seed: u64) -> Result<Vocab> {
    if vocab_size < BYTE_VOCAB {
        return Err(TokenizerError::VocabTooSmall(vocab_size));
    }
    let mut counts: HashMap<&str, u64> = HashMap::new();
    for line in corpus {
        for chunk in pre_split(line.as_ref()) {
            *counts.entry(chunk).or_default() += 1;
        }
    }
    if counts.is_empty() {
        return Err(TokenizerError::EmptyCorpus);
    }
    let mut words: Vec<(Vec<u32>, u64)> = counts.into_iter().map(|(w, c)| (byte_ids(w), c)).collect();
    words.sort();

    let mut vocab = Vocab::bytes_only();
    vocab.seed = seed;
    while vocab.size() < vocab_size {
        let mut pairs: HashMap<(u32, u32), u64> = HashMap::new();
        for (w, c) in &words {
            for p in w.windows(2) {
                *pairs.entry((p[0], p[1])).or_default() += c;
            }
        }
        let best = pairs.into_iter().max_by(|(pa, ca), (pb, cb)| {
            ca.cmp(cb).then_with(|| {
                let ka = (&vocab.tokens[pa.0 as usize], &vocab.tokens[pa.1 as usize]);
                let kb = (&vocab.tokens[pb.0 as usize], &vocab.tokens[pb.1 as usize]);
                kb.cmp(&ka).then_with(|| pb.cmp(pa))
            })
        });
        let Some((pair, _)) = best else { break };
        let new_id = vocab.push_merge(pair);
        for (w, _) in &mut words {
            merge_pair(w, pair, new_id);
        }
    }
    Ok(vocab)
}

/// Encodes with `bos`/`eos` framing, padding to `max_len`. With
/// `truncate`, an over-long sequence keeps `bos` plus the longest prefix
/// that fits (dropping `eos`).
pub fn encode(text: &str, vocab: &Vocab, max_len: usize, truncate: bool) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(TokenizerError::ZeroMaxLen);
    }
    let body = vocab.tokenize(text);
    frame(body, max_len, truncate)
}

/// Frames raw subword ids with bos/eos under the same rules as [`encode`].
pub fn frame(body: Vec<u32>, max_len: usize, truncate: bool) -> Result<TokenSequence> {
    if max_len == 0 {
        return Err(TokenizerError::ZeroMaxLen);
    }
    let full = body.len() + 2;
    let mut ids = Vec::with_capacity(max_len);
    ids.push(BOS);
    if full <= max_len {
        ids.extend(body);
        ids.push(EOS);
    } else if truncate {
        ids.extend_from_slice(&body[..max_len - 1]);
    } else {
        return Err(TokenizerError::Overlength { len: full, max_len });
    }
    TokenSequence::from_ids(ids, max_len)
}

/// Inverse of [`encode`]: drops pad/bos/eos and decodes the bytes (invalid
/// UTF-8 from a truncated tail is replaced).
pub fn decode(ids: &[u32], vocab: &Vocab) -> Result<String> {
    let mut bytes = Vec::new();
    for &id in ids {
        if (id as usize) < NUM_RESERVED {
            continue;
        }
        let tok = vocab.token_bytes(id).ok_or(TokenizerError::UnknownId(id))?;
        bytes.extend_from_slice(tok);
    }
    Ok(String::from_utf8_lossy(&bytes).into_owned())
}
