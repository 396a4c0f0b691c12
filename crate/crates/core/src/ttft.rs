//! Time-to-first-token harness over synthetic documents.
//!
//! Chunk caches are built before timing starts. A turbo sample times
//! assembly plus query prefill; a naive sample times the one-shot prefill.
//! Each (document size, path) pair gets one discarded warm-up run.

use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attention::MaskMode;
use crate::error::{Error, Result};
use crate::kvstore::{CacheStore, ChunkKVCache};
use crate::pipeline::{
    assemble_from, naive_prefill, prefill_chunk, prefill_query, AssembledContext, Engine,
    InferencePath, PositionMode,
};
use crate::rng::SplitMix64;
use crate::tokenizer::{frame_chunk, TokenId};

pub const DEFAULT_DOC_GRID: [usize; 4] = [512, 1024, 2048, 4096];
pub const DEFAULT_QUERY_TOKENS: usize = 64;
pub const DEFAULT_CHUNK_LEN: usize = 256;
pub const DEFAULT_REPETITIONS: usize = 5;

#[derive(Clone, Debug)]
pub struct BenchSpec {
    /// Total framed chunk tokens per document.
    pub doc_grid: Vec<usize>,
    pub query_tokens: usize,
    pub repetitions: usize,
    /// Framed length of each synthetic chunk; the last one may be shorter.
    pub chunk_len: usize,
    pub seed: u64,
    pub paths: Vec<InferencePath>,
}

impl Default for BenchSpec {
    fn default() -> Self {
        Self {
            doc_grid: DEFAULT_DOC_GRID.to_vec(),
            query_tokens: DEFAULT_QUERY_TOKENS,
            repetitions: DEFAULT_REPETITIONS,
            chunk_len: DEFAULT_CHUNK_LEN,
            seed: 0,
            paths: vec![InferencePath::TurboReordered, InferencePath::NaiveCausal],
        }
    }
}

impl BenchSpec {
    pub fn validate(&self) -> Result<()> {
        if self.repetitions == 0 {
            return Err(Error::Domain("repetitions must be at least 1".into()));
        }
        if self.query_tokens == 0 {
            return Err(Error::Domain("query must have at least one token".into()));
        }
        if self.chunk_len < 3 {
            return Err(Error::Domain(
                "chunk length must leave room for framing".into(),
            ));
        }
        if self.paths.is_empty() {
            return Err(Error::Domain("no paths to measure".into()));
        }
        if let Some(&d) = self.doc_grid.iter().find(|&&d| d < 3) {
            return Err(Error::Domain(format!(
                "document of {d} tokens cannot hold a chunk"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TtftSample {
    pub doc_tokens: usize,
    pub query_tokens: usize,
    pub path: InferencePath,
    pub repetition: usize,
    pub ttft: Duration,
    pub measured_flops: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct TtftSummary {
    pub doc_tokens: usize,
    pub path: InferencePath,
    pub median: Duration,
    pub measured_flops: u64,
}

/// Framed chunks of random byte payloads whose lengths sum to `doc_tokens`.
pub fn synthetic_chunks(
    doc_tokens: usize,
    chunk_len: usize,
    seed: u64,
) -> Result<Vec<Vec<TokenId>>> {
    if chunk_len < 3 || doc_tokens < 3 {
        return Err(Error::Domain(format!(
            "cannot frame {doc_tokens} tokens into chunks of {chunk_len}"
        )));
    }
    let mut lengths = vec![chunk_len; doc_tokens / chunk_len];
    match doc_tokens % chunk_len {
        0 => {}
        r if r >= 3 => lengths.push(r),
        r => match lengths.last_mut() {
            Some(last) => *last += r,
            None => lengths.push(r),
        },
    }
    let mut rng = SplitMix64::new(seed);
    Ok(lengths
        .into_iter()
        .map(|len| {
            let payload: Vec<TokenId> = (0..len - 2)
                .map(|_| rng.next_range(0, 255) as TokenId)
                .collect();
            frame_chunk(&payload)
        })
        .collect())
}

pub fn synthetic_query(query_tokens: usize, seed: u64) -> Vec<TokenId> {
    let mut rng = SplitMix64::new(seed ^ 0x5155_4552_5900_0000);
    (0..query_tokens)
        .map(|_| rng.next_range(0, 255) as TokenId)
        .collect()
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(durations: &[Duration]) -> Option<Duration> {
    let mut sorted = durations.to_vec();
    sorted.sort_unstable();
    let n = sorted.len();
    match n {
        0 => None,
        _ if n % 2 == 1 => Some(sorted[n / 2]),
        _ => Some((sorted[n / 2 - 1] + sorted[n / 2]) / 2),
    }
}

struct Prepared {
    chunks: Vec<Vec<TokenId>>,
    caches: Vec<ChunkKVCache>,
    query: Vec<TokenId>,
}

fn run_once(engine: &Engine, prepared: &Prepared, path: InferencePath) -> Result<(Duration, u64)> {
    let start = Instant::now();
    let ctx: AssembledContext = match path {
        InferencePath::TurboReordered | InferencePath::TurboComposite => {
            let mode = if path == InferencePath::TurboReordered {
                PositionMode::Reordered
            } else {
                PositionMode::Composite
            };
            let mut ctx = assemble_from(engine, &prepared.caches, mode)?;
            prefill_query(&mut ctx, engine, &prepared.query)?;
            ctx
        }
        InferencePath::NaiveCausal => {
            naive_prefill(engine, &prepared.chunks, &prepared.query, MaskMode::Causal)?
        }
        InferencePath::NaiveIndependent => naive_prefill(
            engine,
            &prepared.chunks,
            &prepared.query,
            MaskMode::Independent,
        )?,
    };
    let elapsed = start.elapsed();
    Ok((elapsed, ctx.online_flops().model_total()))
}

/// Run every (document size, path, repetition) cell. When `store` is given,
/// caches are written to it and read back before timing.
pub fn run(
    engine: &Engine,
    spec: &BenchSpec,
    store: Option<&CacheStore>,
) -> Result<Vec<TtftSample>> {
    spec.validate()?;
    let mut samples = Vec::new();
    for (i, &doc_tokens) in spec.doc_grid.iter().enumerate() {
        let seed = spec.seed.wrapping_add(i as u64);
        let chunks = synthetic_chunks(doc_tokens, spec.chunk_len, seed)?;
        let mut caches = chunks
            .iter()
            .map(|c| prefill_chunk(engine, c))
            .collect::<Result<Vec<_>>>()?;
        if let Some(store) = store {
            caches = caches
                .iter()
                .map(|c| {
                    let id = store.store(c)?;
                    store.load(&id, &engine.fingerprint())
                })
                .collect::<Result<Vec<_>>>()?;
        }
        let prepared = Prepared {
            chunks,
            caches,
            query: synthetic_query(spec.query_tokens, seed),
        };
        for &path in &spec.paths {
            run_once(engine, &prepared, path)?;
        }
        // Paths alternate within a repetition so slow drift hits both alike.
        for repetition in 0..spec.repetitions {
            for &path in &spec.paths {
                let (ttft, measured_flops) = run_once(engine, &prepared, path)?;
                samples.push(TtftSample {
                    doc_tokens,
                    query_tokens: spec.query_tokens,
                    path,
                    repetition,
                    ttft,
                    measured_flops,
                });
            }
        }
    }
    Ok(samples)
}

/// Median per (document size, path), in first-seen order.
pub fn summarize(samples: &[TtftSample]) -> Vec<TtftSummary> {
    let mut keys: Vec<(usize, InferencePath)> = Vec::new();
    for s in samples {
        if !keys.contains(&(s.doc_tokens, s.path)) {
            keys.push((s.doc_tokens, s.path));
        }
    }
    keys.into_iter()
        .filter_map(|(doc_tokens, path)| {
            let cell: Vec<&TtftSample> = samples
                .iter()
                .filter(|s| s.doc_tokens == doc_tokens && s.path == path)
                .collect();
            let times: Vec<Duration> = cell.iter().map(|s| s.ttft).collect();
            Some(TtftSummary {
                doc_tokens,
                path,
                median: median(&times)?,
                measured_flops: cell.first()?.measured_flops,
            })
        })
        .collect()
}

/// `baseline / candidate` median ratio for every document size that has both.
pub fn speedups(
    summaries: &[TtftSummary],
    candidate: InferencePath,
    baseline: InferencePath,
) -> Vec<(usize, f64)> {
    let find = |doc: usize, path: InferencePath| {
        summaries
            .iter()
            .find(|s| s.doc_tokens == doc && s.path == path)
            .map(|s| s.median.as_secs_f64())
    };
    let mut docs: Vec<usize> = summaries.iter().map(|s| s.doc_tokens).collect();
    docs.dedup();
    docs.into_iter()
        .filter_map(|d| Some((d, find(d, baseline)? / find(d, candidate)?)))
        .collect()
}
