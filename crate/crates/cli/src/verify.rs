//! Randomized invariant matrix shared by `kvrag verify` and the acceptance
//! suite. Every case is reproducible from `(seed, index)`.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;
use std::time::{Duration, Instant};

use kvrag_core::attention::{build_mask, MaskMode, SegmentLayout};
use kvrag_core::costmodel;
use kvrag_core::kvstore::ChunkKVCache;
use kvrag_core::model::ModelConfig;
use kvrag_core::pipeline::{
    assemble_from, decode_answer, naive_prefill, naive_prefill_masked, prefill_chunk,
    prefill_query, Engine, PositionMode,
};
use kvrag_core::rng::SplitMix64;
use kvrag_core::rope::{relative_score, RopeParams};
use kvrag_core::tokenizer::TokenId;
use kvrag_core::Error;
use serde::Serialize;

pub const EQUIVALENCE_TOL: f64 = 1e-10;
pub const ROPE_TOL: f64 = 1e-9;
pub const WITNESS_THRESHOLD: f64 = 1e-3;
pub const MAX_ROPE_POSITION: usize = 4096;

#[derive(Clone, Debug)]
pub struct VerifyOptions {
    pub config: ModelConfig,
    pub seeds: Range<u64>,
    pub cases_per_seed: usize,
    pub max_chunks: usize,
    pub max_chunk_len: usize,
    pub max_query_len: usize,
    pub max_new: usize,
    pub rope_cases: usize,
    /// Hide one visible key from the last query row of the naive oracle.
    pub inject_fault: bool,
    /// Run only this case.
    pub only: Option<CaseRef>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self {
            config: ModelConfig::toy(),
            seeds: 0..5,
            cases_per_seed: 40,
            max_chunks: 8,
            max_chunk_len: 64,
            max_query_len: 32,
            max_new: 32,
            rope_cases: 1000,
            inject_fault: false,
            only: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
pub struct CaseRef {
    pub seed: u64,
    pub index: usize,
}

impl fmt::Display for CaseRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.seed, self.index)
    }
}

impl FromStr for CaseRef {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (seed, index) = s
            .split_once(':')
            .ok_or_else(|| format!("expected SEED:INDEX, got {s:?}"))?;
        Ok(Self {
            seed: seed
                .parse()
                .map_err(|e| format!("bad seed {seed:?}: {e}"))?,
            index: index
                .parse()
                .map_err(|e| format!("bad index {index:?}: {e}"))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Case {
    pub at: CaseRef,
    pub chunks: Vec<Vec<TokenId>>,
    pub query: Vec<TokenId>,
}

impl Case {
    pub fn generate(at: CaseRef, opts: &VerifyOptions) -> Self {
        let mut rng = SplitMix64::new(
            at.seed
                .wrapping_mul(0xD1B5_4A32_D192_ED03)
                .wrapping_add(at.index as u64),
        );
        let vocab = opts.config.vocab_size - 1;
        let mut draw = |len: usize| -> Vec<TokenId> {
            (0..len)
                .map(|_| rng.next_range(0, vocab) as TokenId)
                .collect()
        };
        let mut lens = SplitMix64::new(at.seed ^ (at.index as u64).rotate_left(32));
        let n_chunks = lens.next_range(1, opts.max_chunks);
        let chunk_lens: Vec<usize> = (0..n_chunks)
            .map(|_| lens.next_range(1, opts.max_chunk_len))
            .collect();
        let query_len = lens.next_range(1, opts.max_query_len);
        let chunks = chunk_lens.into_iter().map(&mut draw).collect();
        Self {
            at,
            chunks,
            query: draw(query_len),
        }
    }

    pub fn chunk_lengths(&self) -> Vec<usize> {
        self.chunks.iter().map(Vec::len).collect()
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CaseOutcome {
    pub at: CaseRef,
    pub chunk_lengths: Vec<usize>,
    pub query_len: usize,
    pub reordered_diff: f64,
    pub composite_diff: f64,
    pub turbo_tokens: Vec<TokenId>,
    pub naive_tokens: Vec<TokenId>,
    pub turbo_flops: u64,
    pub modeled_turbo_flops: u64,
    pub naive_flops: u64,
    pub modeled_naive_flops: u64,
    pub round_trip: bool,
}

/// False for NaN, so a poisoned comparison counts as a failure.
fn within(x: f64, tol: f64) -> bool {
    x <= tol
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

fn round_trips(engine: &Engine, caches: &[ChunkKVCache]) -> kvrag_core::Result<bool> {
    for cache in caches {
        let bytes = cache.to_bytes()?;
        if ChunkKVCache::from_bytes(&bytes, &engine.fingerprint())? != *cache {
            return Ok(false);
        }
        let cut = ChunkKVCache::from_bytes(&bytes[..bytes.len() - 1], &engine.fingerprint());
        if !matches!(cut, Err(Error::Format(_))) {
            return Ok(false);
        }
    }
    Ok(true)
}

pub fn run_case(
    engine: &Engine,
    case: &Case,
    opts: &VerifyOptions,
) -> kvrag_core::Result<CaseOutcome> {
    let caches = case
        .chunks
        .iter()
        .map(|c| prefill_chunk(engine, c))
        .collect::<kvrag_core::Result<Vec<_>>>()?;

    let mut turbo = assemble_from(engine, &caches, PositionMode::Reordered)?;
    let turbo_logits = prefill_query(&mut turbo, engine, &case.query)?;
    let turbo_flops = turbo.online_flops().model_total();

    let mut composite = assemble_from(engine, &caches, PositionMode::Composite)?;
    let composite_logits = prefill_query(&mut composite, engine, &case.query)?;

    let mut naive = if opts.inject_fault {
        let layout = SegmentLayout::from_lengths(&case.chunk_lengths(), case.query.len())?;
        let mut mask = build_mask(&layout, MaskMode::Independent);
        let last = mask.rows() - 1;
        mask.set(last, 0, f64::NEG_INFINITY);
        naive_prefill_masked(
            engine,
            &case.chunks,
            &case.query,
            MaskMode::Independent,
            &mask,
        )?
    } else {
        naive_prefill(engine, &case.chunks, &case.query, MaskMode::Independent)?
    };
    let naive_logits = naive.logits().unwrap_or_default().to_vec();
    let naive_flops = naive.online_flops().model_total();

    let chunk_tokens: usize = case.chunks.iter().map(Vec::len).sum();
    let cmp = costmodel::compare(
        engine.config(),
        chunk_tokens as u64,
        case.query.len() as u64,
        1,
    )?;

    Ok(CaseOutcome {
        at: case.at,
        chunk_lengths: case.chunk_lengths(),
        query_len: case.query.len(),
        reordered_diff: max_diff(&turbo_logits, &naive_logits),
        composite_diff: max_diff(&composite_logits, &naive_logits),
        turbo_tokens: decode_answer(engine, &mut turbo, opts.max_new)?,
        naive_tokens: decode_answer(engine, &mut naive, opts.max_new)?,
        turbo_flops,
        modeled_turbo_flops: cmp.turbo.total,
        naive_flops,
        modeled_naive_flops: cmp.naive.total,
        round_trip: round_trips(engine, &caches)?,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct Failure {
    pub property: &'static str,
    pub case: Option<CaseRef>,
    pub detail: String,
}

#[derive(Clone, Debug, Default, Serialize)]
pub struct VerifyReport {
    pub schema_version: u32,
    pub command: &'static str,
    pub cases: usize,
    pub max_reordered_diff: f64,
    pub max_composite_diff: f64,
    pub witness: Option<CaseRef>,
    pub decodes_identical: usize,
    pub flops_exact: usize,
    pub rope_cases: usize,
    pub rope_max_diff: f64,
    pub failures: Vec<Failure>,
    #[serde(
        rename = "elapsed_ms",
        serialize_with = "crate::report::serialize_millis"
    )]
    pub elapsed: Duration,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

impl VerifyOptions {
    /// Command line that re-runs a single case under the same options.
    pub fn repro_line(&self, at: CaseRef) -> String {
        let mut line = format!(
            "kvrag verify --case {at} --max-chunks {} --max-chunk-len {} --max-query-len {} --max-new {}",
            self.max_chunks, self.max_chunk_len, self.max_query_len, self.max_new
        );
        if self.inject_fault {
            line.push_str(" --inject-fault");
        }
        line
    }

    pub fn validate(&self) -> kvrag_core::Result<()> {
        if self.max_chunks == 0 || self.max_chunk_len == 0 || self.max_query_len == 0 {
            return Err(Error::Domain("size grid bounds must be at least 1".into()));
        }
        if self.seeds.is_empty() && self.only.is_none() {
            return Err(Error::Domain("empty seed range".into()));
        }
        self.config.validate()
    }
}

pub fn rope_check(cases: usize, seed: u64, head_size: usize) -> kvrag_core::Result<f64> {
    let params = RopeParams::new(head_size, kvrag_core::rope::DEFAULT_ROPE_BASE)?;
    let mut rng = SplitMix64::new(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let q: Vec<f64> = (0..head_size).map(|_| rng.next_signed_unit()).collect();
        let k: Vec<f64> = (0..head_size).map(|_| rng.next_signed_unit()).collect();
        let a = rng.next_range(0, MAX_ROPE_POSITION);
        let b = rng.next_range(0, MAX_ROPE_POSITION);
        let room = MAX_ROPE_POSITION - a.max(b);
        let s = rng.next_range(0, room);
        let base = relative_score(&q, &k, a, b, &params)?;
        let shifted = relative_score(&q, &k, a + s, b + s, &params)?;
        worst = worst.max((base - shifted).abs());
    }
    Ok(worst)
}

/// Run the full matrix. `on_case` sees each outcome as it completes.
pub fn run(
    opts: &VerifyOptions,
    mut on_case: impl FnMut(&CaseOutcome),
) -> kvrag_core::Result<VerifyReport> {
    opts.validate()?;
    let started = Instant::now();
    let mut report = VerifyReport {
        schema_version: crate::report::SCHEMA_VERSION,
        command: "verify",
        ..VerifyReport::default()
    };

    let refs: Vec<CaseRef> = match opts.only {
        Some(at) => vec![at],
        None => opts
            .seeds
            .clone()
            .flat_map(|seed| (0..opts.cases_per_seed).map(move |index| CaseRef { seed, index }))
            .collect(),
    };

    let mut engine: Option<(u64, Engine)> = None;
    for at in refs {
        if engine.as_ref().map(|(s, _)| *s) != Some(at.seed) {
            engine = Some((at.seed, Engine::seeded(&opts.config, at.seed)?));
        }
        let (_, e) = engine.as_ref().expect("engine set above");
        let case = Case::generate(at, opts);
        let out = run_case(e, &case, opts)?;
        on_case(&out);
        report.cases += 1;
        report.max_reordered_diff = report.max_reordered_diff.max(out.reordered_diff);
        report.max_composite_diff = report.max_composite_diff.max(out.composite_diff);
        if report.witness.is_none() && out.composite_diff > WITNESS_THRESHOLD {
            report.witness = Some(at);
        }
        let mut fail = |property, detail: String| {
            report.failures.push(Failure {
                property,
                case: Some(at),
                detail,
            })
        };
        if !within(out.reordered_diff, EQUIVALENCE_TOL) {
            fail(
                "equivalence",
                format!(
                    "max |turbo - naive| = {:e} (chunks {:?}, query {})",
                    out.reordered_diff, out.chunk_lengths, out.query_len
                ),
            );
        }
        if out.turbo_tokens != out.naive_tokens {
            fail(
                "decode",
                format!(
                    "turbo {:?} vs naive {:?}",
                    out.turbo_tokens, out.naive_tokens
                ),
            );
        }
        if out.turbo_flops != out.modeled_turbo_flops || out.naive_flops != out.modeled_naive_flops
        {
            fail(
                "flops",
                format!(
                    "turbo {} vs model {}, naive {} vs model {}",
                    out.turbo_flops,
                    out.modeled_turbo_flops,
                    out.naive_flops,
                    out.modeled_naive_flops
                ),
            );
        }
        if !out.round_trip {
            fail(
                "round-trip",
                "chunk cache did not survive encode/decode".into(),
            );
        }
        report.decodes_identical += usize::from(out.turbo_tokens == out.naive_tokens);
        report.flops_exact += usize::from(
            out.turbo_flops == out.modeled_turbo_flops
                && out.naive_flops == out.modeled_naive_flops,
        );
    }

    if opts.only.is_none() {
        if report.witness.is_none() {
            report.failures.push(Failure {
                property: "composite-witness",
                case: None,
                detail: format!(
                    "no case moved composite logits by more than {WITNESS_THRESHOLD:e} (max {:e})",
                    report.max_composite_diff
                ),
            });
        }
        report.rope_cases = opts.rope_cases;
        report.rope_max_diff =
            rope_check(opts.rope_cases, opts.seeds.start, opts.config.head_size)?;
        if !within(report.rope_max_diff, ROPE_TOL) {
            report.failures.push(Failure {
                property: "rope-shift",
                case: None,
                detail: format!("max score drift {:e}", report.rope_max_diff),
            });
        }
    }
    report.elapsed = started.elapsed();
    Ok(report)
}
