//! Transformer inference with precomputed per-chunk KV caches.

pub mod attention;
pub mod costmodel;
pub mod error;
pub mod kvstore;
pub mod model;
pub mod numerics;
pub mod pipeline;
pub mod retrieval;
pub mod rng;
pub mod rope;
pub mod tokenizer;
pub mod ttft;

pub use attention::{MaskMode, Segment, SegmentKind, SegmentLayout};
pub use error::{Error, Result};
pub use kvstore::{CacheStore, ChunkId, ChunkKVCache, StorageDtype};
pub use model::{Fingerprint, FlopTally, ModelConfig, ModelWeights};
pub use numerics::Matrix;
pub use pipeline::{AssembledContext, Engine, InferencePath, PositionMode};
pub use rope::PositionIds;
pub use tokenizer::TokenId;
