use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use kvrag_core::costmodel;
use kvrag_core::kvstore::{load_weights, save_weights, CacheStore};
use kvrag_core::model::{ModelConfig, ModelWeights};
use kvrag_core::pipeline::{self, AnswerRequest, Document, Engine, InferencePath};
use kvrag_core::retrieval::{EmbeddingIndex, DEFAULT_EMBED_DIM, INDEX_FILE};
use kvrag_core::Error;

use crate::report::{AskRun, FlopsRow, FlopsRun, IngestRun, Refusal, SCHEMA_VERSION};

pub const WEIGHTS_FILE: &str = "model.tkvc";
pub const REFUSAL: &str =
    "No documents have been ingested into this store, so there is no context to answer from.";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Preset {
    Toy,
    Qwen2_7bLike,
}

impl Preset {
    pub fn config(self) -> ModelConfig {
        match self {
            Preset::Toy => ModelConfig::toy(),
            Preset::Qwen2_7bLike => ModelConfig::qwen2_7b_like(),
        }
    }
}

/// Files under `path` (or `path` itself), sorted, as documents named by
/// their path relative to `path`.
pub fn read_corpus(path: &Path) -> anyhow::Result<Vec<Document>> {
    let meta =
        fs::metadata(path).with_context(|| format!("cannot read corpus {}", path.display()))?;
    let mut files = Vec::new();
    if meta.is_dir() {
        collect_files(path, &mut files)?;
        files.sort();
    } else {
        files.push(path.to_path_buf());
    }
    files
        .into_iter()
        .map(|f| {
            let text = fs::read(&f).with_context(|| format!("cannot read {}", f.display()))?;
            let id = f
                .strip_prefix(path)
                .ok()
                .filter(|p| !p.as_os_str().is_empty())
                .unwrap_or(&f)
                .to_string_lossy()
                .into_owned();
            Ok(Document { id, text })
        })
        .collect()
}

fn collect_files(dir: &Path, out: &mut Vec<PathBuf>) -> anyhow::Result<()> {
    for entry in fs::read_dir(dir).with_context(|| format!("cannot list {}", dir.display()))? {
        let path = entry?.path();
        if path.is_dir() {
            collect_files(&path, out)?;
        } else if path.is_file() {
            out.push(path);
        }
    }
    Ok(())
}

/// Engine whose weights live in the store. They are created from
/// `(preset, seed)` on first use; later runs must agree with them.
pub fn engine_for_ingest(store: &CacheStore, preset: Preset, seed: u64) -> anyhow::Result<Engine> {
    let path = store.root().join(WEIGHTS_FILE);
    let weights = if path.exists() {
        let stored = load_weights(&path)?;
        let wanted = ModelWeights::init_random(&preset.config(), seed)?;
        if stored.fingerprint() != wanted.fingerprint() {
            bail!(
                "store {} was built with model {}, not the requested preset and seed ({})",
                store.root().display(),
                stored.fingerprint(),
                wanted.fingerprint()
            );
        }
        stored
    } else {
        let weights = ModelWeights::init_random(&preset.config(), seed)?;
        save_weights(&weights, &path)?;
        weights
    };
    Ok(Engine::new(weights))
}

/// Engine for an existing store, or `None` when nothing was ingested.
pub fn engine_for_store(store: &CacheStore) -> anyhow::Result<Option<Engine>> {
    let path = store.root().join(WEIGHTS_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(Engine::new(load_weights(&path)?)))
}

pub fn ingest(
    corpus: &Path,
    store_root: &Path,
    preset: Preset,
    seed: u64,
    chunk_len: usize,
) -> anyhow::Result<IngestRun> {
    let docs = read_corpus(corpus)?;
    let store = CacheStore::open(store_root)?;
    let engine = engine_for_ingest(&store, preset, seed)?;
    let mut index = EmbeddingIndex::load_or_new(store.root(), DEFAULT_EMBED_DIM)?;
    let report = pipeline::ingest(&engine, &docs, chunk_len, &store, &mut index)?;
    Ok(IngestRun::new(
        store.root().display().to_string(),
        engine.fingerprint().to_hex(),
        engine.config().clone(),
        report,
        index.len(),
    ))
}

pub enum AskOutcome {
    Answered(Box<AskRun>),
    Refused(Refusal),
}

pub fn ask(
    store_root: &Path,
    question: &str,
    k: usize,
    path: InferencePath,
    max_new: usize,
) -> anyhow::Result<AskOutcome> {
    let refusal = || {
        AskOutcome::Refused(Refusal {
            schema_version: SCHEMA_VERSION,
            command: "ask",
            refused: true,
            reason: REFUSAL.to_string(),
        })
    };
    if !store_root.join(INDEX_FILE).exists() {
        return Ok(refusal());
    }
    let store = CacheStore::open(store_root)?;
    let Some(engine) = engine_for_store(&store)? else {
        return Ok(refusal());
    };
    let index = EmbeddingIndex::load_or_new(store.root(), DEFAULT_EMBED_DIM)?;
    let request = AnswerRequest {
        question: question.to_string(),
        k,
        path,
        max_new,
    };
    match pipeline::answer(&engine, &store, &index, &request) {
        Ok(answer) => Ok(AskOutcome::Answered(Box::new(AskRun::new(
            &answer,
            question,
            k,
            engine.fingerprint().to_hex(),
            engine.config().clone(),
        )))),
        Err(Error::NoContext) => Ok(refusal()),
        Err(e) => Err(e.into()),
    }
}

pub fn flops_table(
    config: &ModelConfig,
    chunk_tokens: u64,
    query_tokens: u64,
    batches: &[u64],
) -> anyhow::Result<FlopsRun> {
    if chunk_tokens == 0 {
        bail!("chunk-tokens must be at least 1");
    }
    if query_tokens == 0 {
        bail!("query-tokens must be at least 1");
    }
    if batches.is_empty() {
        bail!("at least one batch size is required");
    }
    let rows = batches
        .iter()
        .map(|&batch| {
            let cmp = costmodel::compare(config, chunk_tokens, query_tokens, batch)?;
            Ok(FlopsRow {
                batch,
                naive_flops: cmp.naive.total,
                turbo_flops: cmp.turbo.total,
                naive_tflops: cmp.naive.tflops(),
                turbo_tflops: cmp.turbo.tflops(),
                reduction_percent: cmp.reduction_percent,
            })
        })
        .collect::<anyhow::Result<Vec<_>>>()?;
    Ok(FlopsRun {
        schema_version: SCHEMA_VERSION,
        command: "flops",
        config: config.clone(),
        chunk_tokens,
        query_tokens,
        rows,
    })
}

pub fn render_flops_table(run: &FlopsRun) -> String {
    let mut out = format!(
        "chunk tokens {}, query tokens {}\n{:>5}  {:>14}  {:>14}  {:>9}\n",
        run.chunk_tokens, run.query_tokens, "batch", "naive TFLOPs", "turbo TFLOPs", "reduction"
    );
    for r in &run.rows {
        out.push_str(&format!(
            "{:>5}  {:>14.2}  {:>14.2}  {:>8.2}%\n",
            r.batch, r.naive_tflops, r.turbo_tflops, r.reduction_percent
        ));
    }
    out
}
