//! Offline chunk prefill, online KV assembly, and the one-shot reference
//! path it must agree with.
//!
//! Offline, every framed chunk is prefilled alone with a causal mask at
//! positions `0..len` and its unrotated K/V are stored. Online, cached
//! chunks are concatenated without any forward pass, given position ids
//! (composite or reordered), and only the query is run through the model.
//! With reordered positions this reproduces a single forward pass over the
//! whole sequence under the independent mask, because rotary scores depend
//! only on position differences.

use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::attention::{build_mask, build_mask_rows, MaskMode, Segment, SegmentLayout};
use crate::costmodel::{self, FlopsReport};
use crate::error::{Error, Result};
use crate::kvstore::{CacheStore, ChunkId, ChunkKVCache};
use crate::model::{
    forward, greedy_decode, DecodeContext, Fingerprint, FlopTally, ForwardOutput, KvSequence,
    LogitRows, ModelConfig, ModelWeights,
};
use crate::numerics::Matrix;
use crate::retrieval::{chunk_document, ChunkRecord, Embedder, EmbeddingIndex, Hit};
use crate::rope::PositionIds;
use crate::tokenizer::{decode, encode, frame_chunk, unframe_chunk, TokenId, EOS};

/// Position ids given to concatenated chunk caches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PositionMode {
    /// Every chunk keeps its local ids `0..len`.
    Composite,
    /// Chunks are renumbered with running offsets, as if prefilled together.
    Reordered,
}

/// The four ways a request can be prefilled.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InferencePath {
    TurboReordered,
    TurboComposite,
    NaiveCausal,
    NaiveIndependent,
}

impl InferencePath {
    pub const ALL: [InferencePath; 4] = [
        InferencePath::TurboReordered,
        InferencePath::TurboComposite,
        InferencePath::NaiveCausal,
        InferencePath::NaiveIndependent,
    ];

    pub fn name(self) -> &'static str {
        match self {
            InferencePath::TurboReordered => "turbo-reordered",
            InferencePath::TurboComposite => "turbo-composite",
            InferencePath::NaiveCausal => "naive-causal",
            InferencePath::NaiveIndependent => "naive-independent",
        }
    }

    pub fn is_turbo(self) -> bool {
        matches!(
            self,
            InferencePath::TurboReordered | InferencePath::TurboComposite
        )
    }
}

impl std::str::FromStr for InferencePath {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        InferencePath::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Domain(format!("unknown inference path {s:?}")))
    }
}

impl std::fmt::Display for InferencePath {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Model weights bundled with their fingerprint and the retrieval embedder.
#[derive(Clone, Debug)]
pub struct Engine {
    weights: ModelWeights,
    fingerprint: Fingerprint,
    embedder: Embedder,
}

impl Engine {
    pub fn new(weights: ModelWeights) -> Self {
        let fingerprint = weights.fingerprint();
        Self {
            weights,
            fingerprint,
            embedder: Embedder::default(),
        }
    }

    pub fn seeded(config: &ModelConfig, seed: u64) -> Result<Self> {
        Ok(Self::new(ModelWeights::init_random(config, seed)?))
    }

    pub fn with_embedder(mut self, embedder: Embedder) -> Self {
        self.embedder = embedder;
        self
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        &self.weights.config
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    pub fn embedder(&self) -> &Embedder {
        &self.embedder
    }
}

/// KV state for one request: cached or prefilled chunks, then query and
/// answer tokens.
#[derive(Clone, Debug)]
pub struct AssembledContext {
    kv: KvSequence,
    chunks: Vec<Segment>,
    chunk_ids: Vec<ChunkId>,
    /// Query plus any decoded answer tokens.
    query_len: usize,
    mask_mode: MaskMode,
    position_mode: Option<PositionMode>,
    next_position: usize,
    fingerprint: Fingerprint,
    last_logits: Option<Vec<f64>>,
    online_flops: FlopTally,
    online_tokens: usize,
}

impl AssembledContext {
    fn empty(config: &ModelConfig, fingerprint: Fingerprint, mask_mode: MaskMode) -> Self {
        Self {
            kv: KvSequence::empty(config),
            chunks: Vec::new(),
            chunk_ids: Vec::new(),
            query_len: 0,
            mask_mode,
            position_mode: None,
            next_position: 0,
            fingerprint,
            last_logits: None,
            online_flops: FlopTally::default(),
            online_tokens: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.kv.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kv.is_empty()
    }

    pub fn positions(&self) -> &PositionIds {
        &self.kv.positions
    }

    pub fn kv_sequence(&self) -> &KvSequence {
        &self.kv
    }

    pub fn chunk_segments(&self) -> &[Segment] {
        &self.chunks
    }

    pub fn chunk_ids(&self) -> &[ChunkId] {
        &self.chunk_ids
    }

    pub fn chunk_token_count(&self) -> usize {
        self.chunks.iter().map(|s| s.token_count).sum()
    }

    pub fn query_len(&self) -> usize {
        self.query_len
    }

    pub fn mask_mode(&self) -> MaskMode {
        self.mask_mode
    }

    pub fn position_mode(&self) -> Option<PositionMode> {
        self.position_mode
    }

    pub fn fingerprint(&self) -> Fingerprint {
        self.fingerprint
    }

    /// Logits of the most recently processed token.
    pub fn logits(&self) -> Option<&[f64]> {
        self.last_logits.as_deref()
    }

    /// FLOPs of every forward pass run against this context after assembly.
    pub fn online_flops(&self) -> FlopTally {
        self.online_flops
    }

    /// Tokens forwarded through the model after assembly.
    pub fn online_tokens(&self) -> usize {
        self.online_tokens
    }

    /// Segment layout including the query segment, once one exists.
    pub fn layout(&self) -> Option<SegmentLayout> {
        self.layout_with_query(self.query_len).ok()
    }

    fn layout_with_query(&self, query_len: usize) -> Result<SegmentLayout> {
        let mut segments = self.chunks.clone();
        segments.push(Segment::query(self.chunks.len(), query_len));
        SegmentLayout::new(segments)
    }

    fn record(&mut self, tokens: usize, out: &ForwardOutput) {
        self.online_flops += out.flops;
        self.online_tokens += tokens;
        self.last_logits = Some(out.last_logits().to_vec());
    }
}

impl DecodeContext for AssembledContext {
    fn kv(&self) -> &KvSequence {
        &self.kv
    }

    fn next_position(&self) -> usize {
        self.next_position
    }

    fn last_logits(&self) -> Option<&[f64]> {
        self.last_logits.as_deref()
    }

    fn push_token(&mut self, _token: TokenId, output: ForwardOutput) -> Result<()> {
        self.kv
            .append(&output.new_kv, &PositionIds::new(vec![self.next_position]))?;
        self.next_position += 1;
        self.query_len += 1;
        self.record(1, &output);
        Ok(())
    }
}

/// Offline prefill of one framed chunk: causal mask, positions `0..len`.
pub fn prefill_chunk(engine: &Engine, tokens: &[TokenId]) -> Result<ChunkKVCache> {
    let n = tokens.len();
    let layout = SegmentLayout::from_lengths(&[], n)?;
    let out = forward(
        engine.weights(),
        tokens,
        &PositionIds::sequential(0, n),
        None,
        &build_mask(&layout, MaskMode::Causal),
        LogitRows::Last,
    )?;
    ChunkKVCache::new(
        engine.config(),
        engine.fingerprint(),
        tokens.to_vec(),
        out.new_kv,
    )
}

/// Concatenate cached chunks in the given order. No forward pass runs.
pub fn assemble_from(
    engine: &Engine,
    caches: &[ChunkKVCache],
    mode: PositionMode,
) -> Result<AssembledContext> {
    let mut ctx =
        AssembledContext::empty(engine.config(), engine.fingerprint(), MaskMode::Independent);
    ctx.position_mode = Some(mode);
    let mut offset = 0;
    for (i, cache) in caches.iter().enumerate() {
        if cache.fingerprint != engine.fingerprint() {
            return Err(Error::StaleCache {
                chunk: cache.chunk_id.to_hex(),
                expected: engine.fingerprint().to_hex(),
                found: cache.fingerprint.to_hex(),
            });
        }
        let n = cache.token_count();
        let positions = match mode {
            PositionMode::Composite => PositionIds::sequential(0, n),
            PositionMode::Reordered => PositionIds::sequential(offset, n),
        };
        ctx.kv.append(&cache.layers, &positions)?;
        ctx.chunks.push(Segment::chunk(i, n));
        ctx.chunk_ids.push(cache.chunk_id);
        offset += n;
    }
    ctx.next_position = match mode {
        PositionMode::Reordered => offset,
        // Query starts right after the longest local range.
        PositionMode::Composite => caches.iter().map(|c| c.token_count()).max().unwrap_or(0),
    };
    Ok(ctx)
}

/// Load chunks from the store.
pub fn load_chunks(
    engine: &Engine,
    chunk_ids: &[ChunkId],
    store: &CacheStore,
) -> Result<Vec<ChunkKVCache>> {
    chunk_ids
        .iter()
        .map(|id| store.load(id, &engine.fingerprint()))
        .collect()
}

/// Load and concatenate stored chunks.
pub fn assemble(
    engine: &Engine,
    chunk_ids: &[ChunkId],
    store: &CacheStore,
    mode: PositionMode,
) -> Result<AssembledContext> {
    assemble_from(engine, &load_chunks(engine, chunk_ids, store)?, mode)
}

/// Run the query against an assembled context; returns the logits of the
/// last query token.
pub fn prefill_query(
    ctx: &mut AssembledContext,
    engine: &Engine,
    query: &[TokenId],
) -> Result<Vec<f64>> {
    if query.is_empty() {
        return Err(Error::Domain("query has no tokens".into()));
    }
    if ctx.query_len > 0 {
        return Err(Error::Domain("context already holds a query".into()));
    }
    if ctx.fingerprint != engine.fingerprint() {
        return Err(Error::StaleCache {
            chunk: "assembled context".into(),
            expected: engine.fingerprint().to_hex(),
            found: ctx.fingerprint.to_hex(),
        });
    }
    let past = ctx.len();
    let layout = ctx.layout_with_query(query.len())?;
    let mask = build_mask_rows(&layout, ctx.mask_mode, past..layout.total());
    let positions = PositionIds::sequential(ctx.next_position, query.len());
    let out = forward(
        engine.weights(),
        query,
        &positions,
        Some(&ctx.kv),
        &mask,
        LogitRows::Last,
    )?;
    ctx.kv.append(&out.new_kv, &positions)?;
    ctx.next_position += query.len();
    ctx.query_len = query.len();
    ctx.record(query.len(), &out);
    Ok(out.last_logits().to_vec())
}

/// One forward pass over every chunk token and the query, sequential
/// positions `0..N`, under `mask_mode`.
pub fn naive_prefill(
    engine: &Engine,
    chunks: &[Vec<TokenId>],
    query: &[TokenId],
    mask_mode: MaskMode,
) -> Result<AssembledContext> {
    let lengths: Vec<usize> = chunks.iter().map(Vec::len).collect();
    let layout = SegmentLayout::from_lengths(&lengths, query.len())
        .map_err(|_| Error::Domain("query and every chunk must be non-empty".into()))?;
    let mask = build_mask(&layout, mask_mode);
    naive_prefill_masked(engine, chunks, query, mask_mode, &mask)
}

/// [`naive_prefill`] with a caller-supplied mask. `mask_mode` only labels
/// the resulting context.
pub fn naive_prefill_masked(
    engine: &Engine,
    chunks: &[Vec<TokenId>],
    query: &[TokenId],
    mask_mode: MaskMode,
    mask: &Matrix,
) -> Result<AssembledContext> {
    if query.is_empty() {
        return Err(Error::Domain("query has no tokens".into()));
    }
    let tokens: Vec<TokenId> = chunks.iter().flatten().chain(query).copied().collect();
    let n = tokens.len();
    let positions = PositionIds::sequential(0, n);
    let out = forward(
        engine.weights(),
        &tokens,
        &positions,
        None,
        mask,
        LogitRows::Last,
    )?;

    let mut ctx = AssembledContext::empty(engine.config(), engine.fingerprint(), mask_mode);
    ctx.kv.append(&out.new_kv, &positions)?;
    ctx.chunks = chunks
        .iter()
        .enumerate()
        .map(|(i, c)| Segment::chunk(i, c.len()))
        .collect();
    ctx.query_len = query.len();
    ctx.next_position = n;
    ctx.record(n, &out);
    Ok(ctx)
}

/// Greedy continuation of a prefilled context, stopping at the EOS id.
pub fn decode_answer(
    engine: &Engine,
    ctx: &mut AssembledContext,
    max_new: usize,
) -> Result<Vec<TokenId>> {
    greedy_decode(engine.weights(), ctx, max_new, EOS)
}

#[derive(Clone, Debug)]
pub struct Document {
    pub id: String,
    pub text: Vec<u8>,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
pub struct IngestReport {
    pub documents: usize,
    pub chunks: usize,
    /// Chunks that were prefilled and written by this call.
    pub new_chunks: usize,
    pub bytes_written: u64,
}

/// Chunk, embed, prefill and persist a corpus. Chunks already present in
/// both the store and the index are skipped without recomputation.
pub fn ingest(
    engine: &Engine,
    corpus: &[Document],
    chunk_len: usize,
    store: &CacheStore,
    index: &mut EmbeddingIndex,
) -> Result<IngestReport> {
    let mut report = IngestReport {
        documents: corpus.len(),
        ..IngestReport::default()
    };
    for doc in corpus {
        let payloads = chunk_document(&doc.text, chunk_len)?;
        for (i, payload) in payloads.iter().enumerate() {
            let wrap = |source: Error| Error::Chunk {
                document: doc.id.clone(),
                index: i,
                source: Box::new(source),
            };
            let framed = frame_chunk(payload);
            let id = ChunkId::compute(&engine.fingerprint(), &framed);
            report.chunks += 1;
            if !store.contains(&id) {
                let cache = prefill_chunk(engine, &framed).map_err(wrap)?;
                let stored = store.put(&cache).map_err(wrap)?;
                report.bytes_written += stored.bytes_written;
                report.new_chunks += usize::from(stored.bytes_written > 0);
            }
            if index.get(&id).is_none() {
                let embedding = engine.embedder().embed(payload).map_err(wrap)?;
                index
                    .insert(ChunkRecord {
                        chunk_id: id,
                        doc_id: doc.id.clone(),
                        tokens: framed,
                        embedding,
                    })
                    .map_err(wrap)?;
            }
        }
    }
    index.save(store.root())?;
    Ok(report)
}

/// Online prompt wrapped around the user's question. Placed after the
/// cached chunks so that cached positions never shift.
pub fn query_prompt(question: &str) -> Vec<TokenId> {
    encode(format!("Question: {question}\nAnswer: ").as_bytes())
}

#[derive(Clone, Debug)]
pub struct AnswerRequest {
    pub question: String,
    pub k: usize,
    pub path: InferencePath,
    pub max_new: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct Timings {
    pub retrieval: Duration,
    /// Reading cached chunks from disk (zero for naive paths).
    pub cache_load: Duration,
    /// Assembly plus prefill, up to first-token logits.
    pub ttft: Duration,
    pub decode: Duration,
}

#[derive(Clone, Debug)]
pub struct Answer {
    pub path: InferencePath,
    pub text: String,
    pub tokens: Vec<TokenId>,
    pub retrieved: Vec<Hit>,
    /// More chunks were requested than the index holds.
    pub k_clamped: bool,
    pub chunk_tokens: usize,
    pub query_tokens: usize,
    /// Tokens run through the model during prefill.
    pub prefill_tokens: usize,
    pub prefill_flops: FlopTally,
    pub modeled_flops: FlopsReport,
    pub decode_flops: FlopTally,
    pub timings: Timings,
}

/// Retrieve, assemble or prefill, and greedily decode.
pub fn answer(
    engine: &Engine,
    store: &CacheStore,
    index: &EmbeddingIndex,
    request: &AnswerRequest,
) -> Result<Answer> {
    if index.is_empty() {
        return Err(Error::NoContext);
    }
    if request.k == 0 {
        return Err(Error::Domain("k must be at least 1".into()));
    }
    let started = Instant::now();
    let question = encode(request.question.as_bytes());
    let query_embedding =
        engine
            .embedder()
            .embed(if question.is_empty() { &[0] } else { &question })?;
    let retrieved = index.top_k(&query_embedding, request.k);
    let ids: Vec<ChunkId> = retrieved.iter().map(|h| h.id).collect();
    let query = query_prompt(&request.question);
    let retrieval = started.elapsed();

    let mut timings = Timings {
        retrieval,
        ..Timings::default()
    };
    let mut ctx = if request.path.is_turbo() {
        let load_start = Instant::now();
        let caches = load_chunks(engine, &ids, store)?;
        timings.cache_load = load_start.elapsed();

        let mode = match request.path {
            InferencePath::TurboReordered => PositionMode::Reordered,
            _ => PositionMode::Composite,
        };
        let ttft_start = Instant::now();
        let mut ctx = assemble_from(engine, &caches, mode)?;
        prefill_query(&mut ctx, engine, &query)?;
        timings.ttft = ttft_start.elapsed();
        ctx
    } else {
        let chunks = ids
            .iter()
            .map(|id| {
                index
                    .get(id)
                    .map(|r| r.tokens.clone())
                    .ok_or_else(|| Error::NotFound(id.to_hex()))
            })
            .collect::<Result<Vec<_>>>()?;
        let mask_mode = match request.path {
            InferencePath::NaiveCausal => MaskMode::Causal,
            _ => MaskMode::Independent,
        };
        let ttft_start = Instant::now();
        let ctx = naive_prefill(engine, &chunks, &query, mask_mode)?;
        timings.ttft = ttft_start.elapsed();
        ctx
    };

    let prefill_flops = ctx.online_flops();
    let prefill_tokens = ctx.online_tokens();
    let chunk_tokens = ctx.chunk_token_count();
    let comparison =
        costmodel::compare(engine.config(), chunk_tokens as u64, query.len() as u64, 1)?;
    let modeled_flops = if request.path.is_turbo() {
        comparison.turbo
    } else {
        comparison.naive
    };

    let decode_start = Instant::now();
    let tokens = decode_answer(engine, &mut ctx, request.max_new)?;
    timings.decode = decode_start.elapsed();
    let decode_flops = FlopTally {
        qkv: ctx.online_flops().qkv - prefill_flops.qkv,
        attn: ctx.online_flops().attn - prefill_flops.attn,
        o: ctx.online_flops().o - prefill_flops.o,
        mlp: ctx.online_flops().mlp - prefill_flops.mlp,
        lm_head: ctx.online_flops().lm_head - prefill_flops.lm_head,
    };

    Ok(Answer {
        path: request.path,
        text: String::from_utf8_lossy(&decode(&tokens)).into_owned(),
        tokens,
        k_clamped: request.k > index.len(),
        retrieved,
        chunk_tokens,
        query_tokens: query.len(),
        prefill_tokens,
        prefill_flops,
        modeled_flops,
        decode_flops,
        timings,
    })
}

/// Payload bytes of a framed chunk, for display.
pub fn chunk_text(tokens: &[TokenId]) -> String {
    String::from_utf8_lossy(&decode(unframe_chunk(tokens))).into_owned()
}
