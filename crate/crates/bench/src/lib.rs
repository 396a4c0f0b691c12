//! Fixtures shared by the benchmarks.

use kvrag_core::kvstore::ChunkKVCache;
use kvrag_core::model::ModelConfig;
use kvrag_core::pipeline::{prefill_chunk, Engine};
use kvrag_core::tokenizer::TokenId;
use kvrag_core::ttft::{synthetic_chunks, synthetic_query};

pub const SEED: u64 = 42;

pub struct Fixture {
    pub engine: Engine,
    pub chunks: Vec<Vec<TokenId>>,
    pub caches: Vec<ChunkKVCache>,
    pub query: Vec<TokenId>,
}

/// Toy-model document of `doc_tokens` framed tokens in 256-token chunks,
/// with its caches already prefilled.
pub fn fixture(doc_tokens: usize, query_tokens: usize) -> Fixture {
    let engine = Engine::seeded(&ModelConfig::toy(), SEED).expect("toy config is valid");
    let chunks = synthetic_chunks(doc_tokens, 256, SEED).expect("document fits in chunks");
    let caches = chunks
        .iter()
        .map(|c| prefill_chunk(&engine, c).expect("chunk prefill"))
        .collect();
    Fixture {
        engine,
        chunks,
        caches,
        query: synthetic_query(query_tokens, SEED),
    }
}
