//! Machine-readable outputs. Field names and `schema_version` are part of
//! the documented interface; bump the version on any incompatible change.

use std::io::Write;
use std::time::Duration;

use kvrag_core::costmodel::FlopsReport;
use kvrag_core::model::{FlopTally, ModelConfig};
use kvrag_core::pipeline::{Answer, IngestReport};
use kvrag_core::ttft::TtftSample;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

pub fn millis(d: Duration) -> f64 {
    d.as_secs_f64() * 1e3
}

pub fn serialize_millis<S: serde::Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_f64(millis(*d))
}

#[derive(Clone, Debug, Serialize)]
pub struct IngestRun {
    pub schema_version: u32,
    pub command: &'static str,
    pub store: String,
    pub fingerprint: String,
    pub config: ModelConfig,
    pub documents: usize,
    pub chunks: usize,
    pub new_chunks: usize,
    pub bytes_written: u64,
    pub index_size: usize,
}

impl IngestRun {
    pub fn new(
        store: String,
        fingerprint: String,
        config: ModelConfig,
        report: IngestReport,
        index_size: usize,
    ) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            command: "ingest",
            store,
            fingerprint,
            config,
            documents: report.documents,
            chunks: report.chunks,
            new_chunks: report.new_chunks,
            bytes_written: report.bytes_written,
            index_size,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize)]
pub struct FlopCounts {
    pub qkv: u64,
    pub attn: u64,
    pub o: u64,
    pub mlp: u64,
    /// Sum of the four buckets above; the output head is not included.
    pub total: u64,
}

impl From<FlopTally> for FlopCounts {
    fn from(t: FlopTally) -> Self {
        Self {
            qkv: t.qkv,
            attn: t.attn,
            o: t.o,
            mlp: t.mlp,
            total: t.model_total(),
        }
    }
}

impl From<&FlopsReport> for FlopCounts {
    fn from(r: &FlopsReport) -> Self {
        r.breakdown().into()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct Timings {
    pub retrieval_ms: f64,
    pub cache_load_ms: f64,
    pub prefill_ms: f64,
    pub decode_ms: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct Retrieved {
    pub id: String,
    pub score: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AskRun {
    pub schema_version: u32,
    pub command: &'static str,
    pub path: String,
    pub fingerprint: String,
    pub config: ModelConfig,
    pub question: String,
    pub k: usize,
    pub k_clamped: bool,
    pub refused: bool,
    pub retrieved: Vec<Retrieved>,
    pub chunk_tokens: usize,
    pub query_tokens: usize,
    pub prefill_tokens: usize,
    pub ttft_ms: f64,
    pub timings: Timings,
    pub measured_flops: FlopCounts,
    pub modeled_flops: FlopCounts,
    pub flops_match: bool,
    pub decode_flops: FlopCounts,
    pub text: String,
    pub tokens: Vec<u32>,
}

impl AskRun {
    pub fn new(
        answer: &Answer,
        question: &str,
        k: usize,
        fingerprint: String,
        config: ModelConfig,
    ) -> Self {
        let measured = FlopCounts::from(answer.prefill_flops);
        let modeled = FlopCounts::from(&answer.modeled_flops);
        Self {
            schema_version: SCHEMA_VERSION,
            command: "ask",
            path: answer.path.name().to_string(),
            fingerprint,
            config,
            question: question.to_string(),
            k,
            k_clamped: answer.k_clamped,
            refused: false,
            retrieved: answer
                .retrieved
                .iter()
                .map(|h| Retrieved {
                    id: h.id.to_hex(),
                    score: h.score,
                })
                .collect(),
            chunk_tokens: answer.chunk_tokens,
            query_tokens: answer.query_tokens,
            prefill_tokens: answer.prefill_tokens,
            ttft_ms: millis(answer.timings.ttft),
            timings: Timings {
                retrieval_ms: millis(answer.timings.retrieval),
                cache_load_ms: millis(answer.timings.cache_load),
                prefill_ms: millis(answer.timings.ttft),
                decode_ms: millis(answer.timings.decode),
            },
            flops_match: measured.total == modeled.total,
            measured_flops: measured,
            modeled_flops: modeled,
            decode_flops: answer.decode_flops.into(),
            text: answer.text.clone(),
            tokens: answer.tokens.clone(),
        }
    }
}

/// Reply for a store with nothing in it.
#[derive(Clone, Debug, Serialize)]
pub struct Refusal {
    pub schema_version: u32,
    pub command: &'static str,
    pub refused: bool,
    pub reason: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopsRow {
    pub batch: u64,
    pub naive_flops: u64,
    pub turbo_flops: u64,
    pub naive_tflops: f64,
    pub turbo_tflops: f64,
    pub reduction_percent: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct FlopsRun {
    pub schema_version: u32,
    pub command: &'static str,
    pub config: ModelConfig,
    pub chunk_tokens: u64,
    pub query_tokens: u64,
    pub rows: Vec<FlopsRow>,
}

/// One CSV line of `kvrag bench`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub schema_version: u32,
    pub doc_tokens: usize,
    pub query_tokens: usize,
    pub path: String,
    pub repetition: usize,
    pub ttft_ms: f64,
    pub measured_flops: u64,
}

impl From<&TtftSample> for BenchRow {
    fn from(s: &TtftSample) -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            doc_tokens: s.doc_tokens,
            query_tokens: s.query_tokens,
            path: s.path.name().to_string(),
            repetition: s.repetition,
            ttft_ms: millis(s.ttft),
            measured_flops: s.measured_flops,
        }
    }
}

pub fn write_bench_csv(out: impl Write, samples: &[TtftSample]) -> anyhow::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for s in samples {
        w.serialize(BenchRow::from(s))?;
    }
    w.flush()?;
    Ok(())
}
