//! Document chunking, hashed bigram embeddings and an exhaustive cosine
//! index. Deterministic stand-ins for a learned retriever.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::kvstore::ChunkId;
use crate::tokenizer::{encode, TokenId};

pub const DEFAULT_EMBED_DIM: usize = 256;
pub const MIN_CHUNK_LEN: usize = 8;
pub const INDEX_FILE: &str = "index.tkvi";

const INDEX_MAGIC: &[u8; 4] = b"TKVI";
const INDEX_VERSION: u32 = 1;

/// Split `text` into payloads of at most `target_len` bytes, cutting after
/// the last whitespace byte that fits (or hard at `target_len` when the
/// window has none). Payloads concatenate back to `text`.
pub fn chunk_document(text: &[u8], target_len: usize) -> Result<Vec<Vec<TokenId>>> {
    if target_len < MIN_CHUNK_LEN {
        return Err(Error::Domain(format!(
            "chunk length {target_len} is below the minimum of {MIN_CHUNK_LEN}"
        )));
    }
    let mut chunks = Vec::new();
    let mut start = 0;
    while start < text.len() {
        let end = if text.len() - start <= target_len {
            text.len()
        } else {
            let window = &text[start..start + target_len];
            match window.iter().rposition(u8::is_ascii_whitespace) {
                Some(ws) => start + ws + 1,
                None => start + target_len,
            }
        };
        chunks.push(encode(&text[start..end]));
        start = end;
    }
    Ok(chunks)
}

/// Feature-hashed bag of token bigrams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Embedder {
    pub dim: usize,
}

impl Default for Embedder {
    fn default() -> Self {
        Self {
            dim: DEFAULT_EMBED_DIM,
        }
    }
}

fn fnv1a(words: &[TokenId]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for w in words {
        for b in w.to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

impl Embedder {
    /// Bucket index of a bigram (or of a lone token for length-1 input).
    pub fn bucket(&self, feature: &[TokenId]) -> usize {
        (fnv1a(feature) % self.dim as u64) as usize
    }

    /// L2-normalized bigram counts. A single token contributes itself as a
    /// unigram feature.
    pub fn embed(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        if tokens.is_empty() {
            return Err(Error::Domain("cannot embed an empty token list".into()));
        }
        let mut v = vec![0.0; self.dim];
        if tokens.len() == 1 {
            v[self.bucket(tokens)] += 1.0;
        }
        for pair in tokens.windows(2) {
            v[self.bucket(pair)] += 1.0;
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChunkRecord {
    pub chunk_id: ChunkId,
    pub doc_id: String,
    /// Framed token ids, exactly what was prefilled.
    pub tokens: Vec<TokenId>,
    /// Unit-norm embedding of the chunk payload.
    pub embedding: Vec<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Hit {
    pub id: ChunkId,
    pub score: f64,
}

/// Exhaustive cosine index over chunk embeddings.
#[derive(Clone, Debug)]
pub struct EmbeddingIndex {
    dim: usize,
    records: Vec<ChunkRecord>,
    by_id: HashMap<ChunkId, usize>,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            records: Vec::new(),
            by_id: HashMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[ChunkRecord] {
        &self.records
    }

    pub fn get(&self, id: &ChunkId) -> Option<&ChunkRecord> {
        self.by_id.get(id).map(|&i| &self.records[i])
    }

    /// Insert unless the id is already indexed. Returns whether it was new.
    pub fn insert(&mut self, record: ChunkRecord) -> Result<bool> {
        if record.embedding.len() != self.dim {
            return Err(Error::Shape(format!(
                "{}-dim embedding in a {}-dim index",
                record.embedding.len(),
                self.dim
            )));
        }
        if self.by_id.contains_key(&record.chunk_id) {
            return Ok(false);
        }
        self.by_id.insert(record.chunk_id, self.records.len());
        self.records.push(record);
        Ok(true)
    }

    /// The `k` most similar chunks, best first; equal scores order by
    /// ascending chunk id.
    pub fn top_k(&self, query: &[f64], k: usize) -> Vec<Hit> {
        let mut hits: Vec<Hit> = self
            .records
            .iter()
            .map(|r| Hit {
                id: r.chunk_id,
                score: r.embedding.iter().zip(query).map(|(a, b)| a * b).sum(),
            })
            .collect();
        hits.sort_by(|a, b| b.score.total_cmp(&a.score).then_with(|| a.id.cmp(&b.id)));
        hits.truncate(k);
        hits
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(INDEX_MAGIC);
        out.extend_from_slice(&INDEX_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&r.chunk_id.0);
            out.extend_from_slice(&(r.doc_id.len() as u32).to_le_bytes());
            out.extend_from_slice(r.doc_id.as_bytes());
            out.extend_from_slice(&(r.tokens.len() as u32).to_le_bytes());
            for t in &r.tokens {
                out.extend_from_slice(&t.to_le_bytes());
            }
            for x in &r.embedding {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut pos = 0;
        let mut take = |n: usize| -> Result<&[u8]> {
            let end = pos + n;
            if end > bytes.len() {
                return Err(Error::Format(format!("index truncated at byte {pos}")));
            }
            let s = &bytes[pos..end];
            pos = end;
            Ok(s)
        };
        if take(4)? != INDEX_MAGIC {
            return Err(Error::Format("bad magic, not a TKVI index".into()));
        }
        let u32_at = |b: &[u8]| u32::from_le_bytes(b.try_into().unwrap()) as usize;
        let version = u32_at(take(4)?);
        if version != INDEX_VERSION as usize {
            return Err(Error::Format(format!(
                "unsupported index version {version}"
            )));
        }
        let dim = u32_at(take(4)?);
        let count = u32_at(take(4)?);
        let mut index = Self::new(dim);
        for _ in 0..count {
            let chunk_id = ChunkId(take(32)?.try_into().unwrap());
            let doc_len = u32_at(take(4)?);
            let doc_id = String::from_utf8(take(doc_len)?.to_vec())
                .map_err(|_| Error::Format("document id is not UTF-8".into()))?;
            let n = u32_at(take(4)?);
            let tokens = take(4 * n)?
                .chunks_exact(4)
                .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            let embedding = take(8 * dim)?
                .chunks_exact(8)
                .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
                .collect();
            index.insert(ChunkRecord {
                chunk_id,
                doc_id,
                tokens,
                embedding,
            })?;
        }
        if pos != bytes.len() {
            return Err(Error::Format("trailing bytes after index records".into()));
        }
        Ok(index)
    }

    /// Load the sidecar index in `root`, or an empty index if none exists.
    pub fn load_or_new(root: &Path, dim: usize) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        match fs::read(&path) {
            Ok(bytes) => {
                let index = Self::from_bytes(&bytes)?;
                if index.dim != dim {
                    return Err(Error::Config(format!(
                        "index at {} has dimension {}, expected {dim}",
                        path.display(),
                        index.dim
                    )));
                }
                Ok(index)
            }
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Self::new(dim)),
            Err(e) => Err(Error::io(path, e)),
        }
    }

    /// Atomically write the sidecar index into `root`.
    pub fn save(&self, root: &Path) -> Result<()> {
        let path = root.join(INDEX_FILE);
        let tmp = root.join(format!(".{INDEX_FILE}.{}.tmp", std::process::id()));
        fs::write(&tmp, self.to_bytes()).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))
    }
}
