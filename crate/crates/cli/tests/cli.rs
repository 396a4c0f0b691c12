use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use kvrag_cli::report::BenchRow;
use serde_json::Value;

fn kvrag(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kvrag"))
        .args(args)
        .env_remove("KVRAG_STORE")
        .output()
        .expect("kvrag runs")
}

fn corpus() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("data/sample_corpus")
}

fn json(out: &Output) -> Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!(
            "bad JSON ({e}): {}\nstderr: {}",
            String::from_utf8_lossy(&out.stdout),
            String::from_utf8_lossy(&out.stderr)
        )
    })
}

fn ingest(store: &Path) -> Value {
    let out = kvrag(&[
        "ingest",
        corpus().to_str().unwrap(),
        "--store",
        store.to_str().unwrap(),
        "--json",
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    json(&out)
}

fn ask(store: &Path, mode: &str, k: &str) -> Output {
    kvrag(&[
        "ask",
        "When was the lighthouse automated?",
        "--store",
        store.to_str().unwrap(),
        "--mode",
        mode,
        "-k",
        k,
        "--max-new",
        "12",
        "--json",
    ])
}

#[test]
fn ingest_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let first = ingest(dir.path());
    assert_eq!(first["schema_version"], 1);
    assert_eq!(first["documents"], 3);
    let chunks = first["chunks"].as_u64().unwrap();
    assert!(chunks > 0);
    assert_eq!(first["new_chunks"], chunks);
    assert!(first["bytes_written"].as_u64().unwrap() > 0);

    let second = ingest(dir.path());
    assert_eq!(second["chunks"], chunks);
    assert_eq!(second["new_chunks"], 0);
    assert_eq!(second["bytes_written"], 0);
    assert_eq!(second["index_size"], chunks);
}

#[test]
fn missing_corpus_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = kvrag(&[
        "ingest",
        "/definitely/not/here",
        "--store",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("cannot read corpus"));
}

#[test]
fn turbo_and_naive_independent_answer_alike() {
    let dir = tempfile::tempdir().unwrap();
    ingest(dir.path());
    let turbo = json(&ask(dir.path(), "turbo-reordered", "3"));
    let naive = json(&ask(dir.path(), "naive-independent", "3"));
    assert_eq!(turbo["tokens"], naive["tokens"]);
    assert_eq!(turbo["text"], naive["text"]);
    assert_eq!(turbo["retrieved"], naive["retrieved"]);

    assert_eq!(turbo["prefill_tokens"], turbo["query_tokens"]);
    assert_eq!(
        naive["prefill_tokens"].as_u64(),
        Some(naive["query_tokens"].as_u64().unwrap() + naive["chunk_tokens"].as_u64().unwrap())
    );
    for run in [&turbo, &naive] {
        assert!(run["ttft_ms"].as_f64().unwrap() > 0.0);
        assert!(run["timings"]["retrieval_ms"].as_f64().unwrap() >= 0.0);
        assert!(run["timings"]["decode_ms"].as_f64().unwrap() >= 0.0);
        assert_eq!(run["flops_match"], true);
        assert_eq!(
            run["measured_flops"]["total"],
            run["modeled_flops"]["total"]
        );
    }
}

#[test]
fn oversized_k_uses_everything_and_warns() {
    let dir = tempfile::tempdir().unwrap();
    let chunks = ingest(dir.path())["chunks"].as_u64().unwrap();
    let out = ask(dir.path(), "turbo-composite", "1000");
    assert!(out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("warning"));
    let run = json(&out);
    assert_eq!(run["k_clamped"], true);
    assert_eq!(run["retrieved"].as_array().unwrap().len() as u64, chunks);
}

#[test]
fn empty_store_refuses() {
    let dir = tempfile::tempdir().unwrap();
    let out = ask(dir.path(), "naive-causal", "3");
    assert_eq!(out.status.code(), Some(0));
    let run = json(&out);
    assert_eq!(run["refused"], true);

    let plain = kvrag(&["ask", "anything", "--store", dir.path().to_str().unwrap()]);
    assert_eq!(plain.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&plain.stdout).contains("No documents"));
}

const SMALL_GRID: [&str; 12] = [
    "--seed-end",
    "2",
    "--cases-per-seed",
    "3",
    "--max-chunks",
    "3",
    "--max-chunk-len",
    "16",
    "--max-query-len",
    "8",
    "--max-new",
    "4",
];

#[test]
fn verify_passes_on_small_grid() {
    let mut args = vec!["verify"];
    args.extend(SMALL_GRID);
    let out = kvrag(&args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    assert!(String::from_utf8_lossy(&out.stdout).contains("ok"));
}

#[test]
fn injected_fault_fails_with_reproduction() {
    let mut args = vec!["verify", "--inject-fault"];
    args.extend(SMALL_GRID);
    let out = kvrag(&args);
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr).into_owned();
    let line = stderr
        .lines()
        .find_map(|l| l.trim().strip_prefix("reproduce: kvrag "))
        .expect("reproduction line");
    let first_failure = stderr.lines().next().unwrap().to_string();

    let again = kvrag(&line.split_whitespace().collect::<Vec<_>>());
    assert_eq!(again.status.code(), Some(1));
    let again_stderr = String::from_utf8_lossy(&again.stderr);
    assert_eq!(again_stderr.lines().next().unwrap(), first_failure);
}

#[test]
fn flops_defaults_and_validation() {
    let out = kvrag(&["flops", "--json"]);
    assert!(out.status.success());
    let run = json(&out);
    let rows = run["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 5);
    let base = rows[0]["naive_flops"].as_u64().unwrap();
    for r in rows {
        assert!((r["reduction_percent"].as_f64().unwrap() - 98.46).abs() <= 0.5);
        assert_eq!(
            r["naive_flops"].as_u64().unwrap(),
            r["batch"].as_u64().unwrap() * base
        );
    }

    let table = kvrag(&["flops"]);
    let text = String::from_utf8_lossy(&table.stdout);
    assert!(text.contains("122.47"));
    assert!(text.contains("98.46%"));

    assert_eq!(
        kvrag(&["flops", "--chunk-tokens", "0"]).status.code(),
        Some(2)
    );
    assert_eq!(kvrag(&["flops", "--batches", "x"]).status.code(), Some(2));
}

#[test]
fn bench_writes_one_row_per_sample() {
    let dir = tempfile::tempdir().unwrap();
    let csv_path = dir.path().join("ttft.csv");
    let store = dir.path().join("store");
    let out = kvrag(&[
        "bench",
        "--doc-tokens",
        "64,128",
        "--query-tokens",
        "8",
        "--repetitions",
        "2",
        "--chunk-len",
        "32",
        "--paths",
        "turbo-reordered,naive-causal,naive-independent",
        "--store",
        store.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let mut reader = csv::Reader::from_path(&csv_path).unwrap();
    let headers = reader.headers().unwrap().clone();
    assert_eq!(
        headers.iter().collect::<Vec<_>>(),
        [
            "schema_version",
            "doc_tokens",
            "query_tokens",
            "path",
            "repetition",
            "ttft_ms",
            "measured_flops"
        ]
    );
    let rows: Vec<BenchRow> = reader.deserialize().map(Result::unwrap).collect();
    assert_eq!(rows.len(), 2 * 2 * 3);
    // Turbo work depends on the cached length only through attention.
    let turbo: Vec<&BenchRow> = rows
        .iter()
        .filter(|r| r.path == "turbo-reordered")
        .collect();
    let naive: Vec<&BenchRow> = rows.iter().filter(|r| r.path == "naive-causal").collect();
    let turbo_growth = turbo.last().unwrap().measured_flops - turbo[0].measured_flops;
    let naive_growth = naive.last().unwrap().measured_flops - naive[0].measured_flops;
    assert!(turbo_growth < naive_growth / 10);
    assert!(store.join("chunks").read_dir().unwrap().count() > 0);
}

#[test]
fn bench_rejects_zero_repetitions() {
    let out = kvrag(&["bench", "--repetitions", "0", "--doc-tokens", "64"]);
    assert_eq!(out.status.code(), Some(2));
}

fn assert_conforms(schema: &str, value: &Value) {
    let path = Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/schemas")
        .join(format!("{schema}.schema.json"));
    let schema: Value = serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap();
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator
        .iter_errors(value)
        .map(|e| e.to_string())
        .collect();
    assert!(errors.is_empty(), "{}: {errors:?}", path.display());
}

#[test]
fn reports_match_shipped_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let empty = tempfile::tempdir().unwrap();
    assert_conforms("ask", &json(&ask(empty.path(), "turbo-reordered", "2")));
    assert_conforms("ingest", &ingest(dir.path()));
    for mode in [
        "turbo-reordered",
        "turbo-composite",
        "naive-causal",
        "naive-independent",
    ] {
        assert_conforms("ask", &json(&ask(dir.path(), mode, "2")));
    }
    assert_conforms("flops", &json(&kvrag(&["flops", "--json"])));

    let schema: Value = serde_json::from_str(
        &std::fs::read_to_string(
            Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/schemas/ask.schema.json"),
        )
        .unwrap(),
    )
    .unwrap();
    let mut broken = json(&ask(dir.path(), "naive-causal", "2"));
    broken.as_object_mut().unwrap().remove("ttft_ms");
    assert!(!jsonschema::validator_for(&schema)
        .unwrap()
        .is_valid(&broken));
    let mut args = vec!["verify", "--json"];
    args.extend(SMALL_GRID);
    assert_conforms("verify", &json(&kvrag(&args)));
    args.push("--inject-fault");
    assert_conforms("verify", &json(&kvrag(&args)));
}
