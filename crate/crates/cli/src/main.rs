use std::fs::File;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use kvrag_cli::commands::{self, AskOutcome, Preset};
use kvrag_cli::report::{millis, write_bench_csv};
use kvrag_cli::verify::{self, CaseRef, VerifyOptions};
use kvrag_core::kvstore::{CacheStore, STORE_ENV};
use kvrag_core::pipeline::{Engine, InferencePath};
use kvrag_core::ttft::{self, BenchSpec};

const EXIT_PROPERTY: u8 = 1;
const EXIT_USAGE: u8 = 2;

#[derive(Parser)]
#[command(
    name = "kvrag",
    version,
    about = "Prefill over precomputed per-chunk KV caches"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct StoreArg {
    /// Cache store directory.
    #[arg(long, env = STORE_ENV, default_value = "kvrag-store")]
    store: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum PresetArg {
    Toy,
    #[value(name = "qwen2-7b-like")]
    Qwen2_7bLike,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Toy => Preset::Toy,
            PresetArg::Qwen2_7bLike => Preset::Qwen2_7bLike,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum PathArg {
    TurboReordered,
    TurboComposite,
    NaiveCausal,
    NaiveIndependent,
}

impl From<PathArg> for InferencePath {
    fn from(p: PathArg) -> Self {
        match p {
            PathArg::TurboReordered => InferencePath::TurboReordered,
            PathArg::TurboComposite => InferencePath::TurboComposite,
            PathArg::NaiveCausal => InferencePath::NaiveCausal,
            PathArg::NaiveIndependent => InferencePath::NaiveIndependent,
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Chunk a corpus, prefill every chunk and persist the caches.
    Ingest {
        /// File or directory of text documents.
        corpus: PathBuf,
        #[command(flatten)]
        store: StoreArg,
        #[arg(long, value_enum, default_value = "toy")]
        preset: PresetArg,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        /// Target chunk payload size in bytes.
        #[arg(long, default_value_t = 128)]
        chunk_len: usize,
        #[arg(long)]
        json: bool,
    },
    /// Retrieve chunks for a question and decode an answer.
    Ask {
        question: String,
        #[command(flatten)]
        store: StoreArg,
        #[arg(short, long, default_value_t = 3)]
        k: usize,
        #[arg(long, value_enum, default_value = "turbo-reordered")]
        mode: PathArg,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long)]
        json: bool,
    },
    /// Check the equivalence and serialization invariants on random cases.
    Verify {
        /// First seed (inclusive).
        #[arg(long, default_value_t = 0)]
        seed_start: u64,
        /// Last seed (exclusive).
        #[arg(long, default_value_t = 5)]
        seed_end: u64,
        #[arg(long, default_value_t = 40)]
        cases_per_seed: usize,
        #[arg(long, default_value_t = 8)]
        max_chunks: usize,
        #[arg(long, default_value_t = 64)]
        max_chunk_len: usize,
        #[arg(long, default_value_t = 32)]
        max_query_len: usize,
        #[arg(long, default_value_t = 32)]
        max_new: usize,
        #[arg(long, default_value_t = 1000)]
        rope_cases: usize,
        /// Run a single case given as SEED:INDEX.
        #[arg(long)]
        case: Option<CaseRef>,
        /// Hide one visible key from the reference path (harness self-test).
        #[arg(long)]
        inject_fault: bool,
        #[arg(long)]
        json: bool,
    },
    /// Print analytic prefill FLOPs for naive and cached prefill.
    Flops {
        #[arg(long, value_enum, default_value = "qwen2-7b-like")]
        preset: PresetArg,
        #[arg(long, default_value_t = 8192)]
        chunk_tokens: u64,
        #[arg(long, default_value_t = 128)]
        query_tokens: u64,
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,6,8")]
        batches: Vec<u64>,
        #[arg(long)]
        json: bool,
    },
    /// Measure time to first token on synthetic documents; writes CSV.
    Bench {
        /// Write caches through this store before timing. Defaults to memory.
        #[arg(long, env = STORE_ENV)]
        store: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "512,1024,2048,4096")]
        doc_tokens: Vec<usize>,
        #[arg(long, default_value_t = 64)]
        query_tokens: usize,
        #[arg(long, default_value_t = 5)]
        repetitions: usize,
        #[arg(long, default_value_t = 256)]
        chunk_len: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(
            long,
            value_enum,
            value_delimiter = ',',
            default_value = "turbo-reordered,naive-causal"
        )]
        paths: Vec<PathArg>,
        /// CSV destination; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn print_json(value: &impl serde::Serialize) -> anyhow::Result<()> {
    let mut stdout = io::stdout().lock();
    serde_json::to_writer_pretty(&mut stdout, value)?;
    writeln!(stdout)?;
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Ingest {
            corpus,
            store,
            preset,
            seed,
            chunk_len,
            json,
        } => {
            let run = commands::ingest(&corpus, &store.store, preset.into(), seed, chunk_len)?;
            if json {
                print_json(&run)?;
            } else {
                println!(
                    "ingested {} documents into {} chunks ({} new, {} bytes written) at {}",
                    run.documents, run.chunks, run.new_chunks, run.bytes_written, run.store
                );
            }
        }
        Command::Ask {
            question,
            store,
            k,
            mode,
            max_new,
            json,
        } => match commands::ask(&store.store, &question, k, mode.into(), max_new)? {
            AskOutcome::Refused(r) => {
                if json {
                    print_json(&r)?;
                } else {
                    println!("{}", r.reason);
                }
            }
            AskOutcome::Answered(run) => {
                if run.k_clamped {
                    eprintln!(
                        "warning: k={} exceeds the {} indexed chunks; using all of them",
                        k,
                        run.retrieved.len()
                    );
                }
                if json {
                    print_json(&run)?;
                } else {
                    println!("{}", run.text);
                    println!("tokens: {:?}", run.tokens);
                    println!(
                        "path {}  ttft {:.3} ms  (retrieval {:.3} ms, cache load {:.3} ms, decode {:.3} ms)",
                        run.path,
                        run.ttft_ms,
                        run.timings.retrieval_ms,
                        run.timings.cache_load_ms,
                        run.timings.decode_ms
                    );
                    println!(
                        "prefill tokens {}  measured FLOPs {}  modeled FLOPs {}",
                        run.prefill_tokens, run.measured_flops.total, run.modeled_flops.total
                    );
                }
            }
        },
        Command::Verify {
            seed_start,
            seed_end,
            cases_per_seed,
            max_chunks,
            max_chunk_len,
            max_query_len,
            max_new,
            rope_cases,
            case,
            inject_fault,
            json,
        } => {
            let opts = VerifyOptions {
                seeds: seed_start..seed_end,
                cases_per_seed,
                max_chunks,
                max_chunk_len,
                max_query_len,
                max_new,
                rope_cases,
                inject_fault,
                only: case,
                ..VerifyOptions::default()
            };
            let report = verify::run(&opts, |_| {})?;
            for f in &report.failures {
                match f.case {
                    Some(at) => eprintln!(
                        "FAIL {} case {at}: {}\n  reproduce: {}",
                        f.property,
                        f.detail,
                        opts.repro_line(at)
                    ),
                    None => eprintln!("FAIL {}: {}", f.property, f.detail),
                }
            }
            if json {
                print_json(&report)?;
            } else {
                println!(
                    "{} cases, max reordered diff {:e}, max composite diff {:e}, rope drift {:e} over {} cases, {:.1} s",
                    report.cases,
                    report.max_reordered_diff,
                    report.max_composite_diff,
                    report.rope_max_diff,
                    report.rope_cases,
                    report.elapsed.as_secs_f64()
                );
                println!("{}", if report.passed() { "ok" } else { "FAILED" });
            }
            if !report.passed() {
                return Ok(ExitCode::from(EXIT_PROPERTY));
            }
        }
        Command::Flops {
            preset,
            chunk_tokens,
            query_tokens,
            batches,
            json,
        } => {
            let run = commands::flops_table(
                &Preset::from(preset).config(),
                chunk_tokens,
                query_tokens,
                &batches,
            )?;
            if json {
                print_json(&run)?;
            } else {
                print!("{}", commands::render_flops_table(&run));
            }
        }
        Command::Bench {
            store,
            doc_tokens,
            query_tokens,
            repetitions,
            chunk_len,
            seed,
            paths,
            out,
        } => {
            if repetitions < 1 {
                bail!("repetitions must be at least 1");
            }
            let spec = BenchSpec {
                doc_grid: doc_tokens,
                query_tokens,
                repetitions,
                chunk_len,
                seed,
                paths: paths.into_iter().map(Into::into).collect(),
            };
            let engine = Engine::seeded(&Preset::Toy.config(), seed)?;
            let store = store.map(CacheStore::open).transpose()?;
            let samples = ttft::run(&engine, &spec, store.as_ref())?;
            match out {
                Some(path) => {
                    let file = File::create(&path)
                        .with_context(|| format!("cannot create {}", path.display()))?;
                    write_bench_csv(file, &samples)?;
                }
                None => write_bench_csv(io::stdout().lock(), &samples)?,
            }
            let summaries = ttft::summarize(&samples);
            for s in &summaries {
                eprintln!(
                    "doc {:>6}  {:<18} median ttft {:>10.3} ms  flops {}",
                    s.doc_tokens,
                    s.path.name(),
                    millis(s.median),
                    s.measured_flops
                );
            }
            if let (Some(&candidate), Some(&baseline)) = (spec.paths.first(), spec.paths.get(1)) {
                for (doc, x) in ttft::speedups(&summaries, candidate, baseline) {
                    eprintln!(
                        "doc {doc:>6}  speedup {x:.2}x ({} vs {})",
                        candidate.name(),
                        baseline.name()
                    );
                }
            }
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(EXIT_USAGE)
        }
    }
}
