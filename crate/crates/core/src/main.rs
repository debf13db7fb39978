//! Command-line entry point: data preparation, training, neighbor-matrix
//! construction, evaluation, ablation grids, serving, and benchmarking.
//!
//! Exit codes: 0 success, 1 usage, 2 data error, 3 runtime error.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::exit;
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use grainrec::dataio::{
    build_vocabulary, parse_sessions, prepare_pairs, read_manifest, read_pairs, write_manifest,
    write_pairs, SessionRecord, DEFAULT_MIN_FREQUENCY,
};
use grainrec::error::{Error, Result};
use grainrec::eval::{
    ablate, evaluate, popularity_baseline, write_ablation_csv, EvalReport, ScoringMode, DEFAULT_K,
};
use grainrec::knn::{build_matrix, load_matrix, save_matrix, NearestNeighborMatrix, Similarity};
use grainrec::model::{init_params, ModelConfig};
use grainrec::serving::{
    http_recommend, start, InferenceRequest, Protocol, ServingState,
};
use grainrec::synthetic::planted_markov_sessions;
use grainrec::training::{
    load_checkpoint, save_checkpoint, train, write_log_csv, Precision, TrainConfig,
};

#[derive(Parser)]
#[command(name = "grainrec", version, about = "Session-based recommender toolkit")]
struct Cli {
    /// Seed for every random choice (init, shuffling, synthetic data)
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// key=value overrides, one per line; see README for keys
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Output directory for artifacts
    #[arg(long, global = true, value_name = "DIR", default_value = ".")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Parse session logs into a vocabulary and binary training pairs
    Prepare {
        /// JSON-lines session log
        #[arg(long, conflicts_with = "synthetic")]
        sessions: Option<PathBuf>,
        /// Generate a planted-Markov corpus instead: ITEMS,SESSIONS
        #[arg(long, value_name = "ITEMS,SESSIONS")]
        synthetic: Option<String>,
        #[arg(long, default_value_t = DEFAULT_MIN_FREQUENCY)]
        min_frequency: usize,
    },
    /// Train a model and write a checkpoint directory
    Train {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
    },
    /// Build the nearest-neighbor matrix from checkpoint embeddings
    BuildNn {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 100)]
        k: usize,
        #[arg(long, default_value = "cosine")]
        similarity: String,
    },
    /// Score held-out pairs and report hit/mrr/ndcg@K
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long, default_value_t = DEFAULT_K)]
        k_metric: usize,
        /// full | restricted | both
        #[arg(long, default_value = "both")]
        mode: String,
    },
    /// Sweep one configuration axis and emit the grid as CSV
    Ablate {
        #[arg(long)]
        pairs: PathBuf,
        #[arg(long)]
        vocab: PathBuf,
        /// layer_pattern | nn_size | embedding_dim
        #[arg(long)]
        axis: String,
        /// Comma-separated override of the default grid
        #[arg(long)]
        values: Option<String>,
        #[arg(long, default_value_t = 100)]
        nn_k: usize,
    },
    /// Serve recommendations over HTTP or raw framing
    Serve {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "127.0.0.1:7878")]
        bind: String,
        #[arg(long, default_value_t = 1)]
        workers: usize,
        /// http | raw
        #[arg(long, default_value = "http")]
        protocol: String,
    },
    /// Measure end-to-end serving latency
    Bench {
        /// Use a real checkpoint; otherwise a synthetic state is built
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 10_000)]
        items: usize,
        #[arg(long, default_value_t = 100)]
        neighbors: usize,
        #[arg(long, default_value_t = 1000)]
        requests: usize,
        #[arg(long, default_value_t = 1)]
        workers: usize,
    },
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // clap help/version output is a success, anything else is usage
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            exit(code);
        }
    };
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        exit(exit_code(&e));
    }
}

fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::Input(_) | Error::Corpus(_) | Error::Json(_) | Error::Compatibility(_) => 2,
        _ => 3,
    }
}

/// key=value overrides for model and training settings.
fn load_overrides(path: Option<&Path>) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    let Some(path) = path else { return Ok(map) };
    for line in std::fs::read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("expected key=value, got {line:?}")))?;
        map.insert(key.trim().to_owned(), value.trim().to_owned());
    }
    Ok(map)
}

fn apply_overrides(
    model: &mut ModelConfig,
    train_config: &mut TrainConfig,
    map: &HashMap<String, String>,
) -> Result<()> {
    let bad = |k: &str, v: &str| Error::Config(format!("bad value {v:?} for {k}"));
    for (key, value) in map {
        match key.as_str() {
            "embedding_dim" => {
                model.embedding_dim = value.parse().map_err(|_| bad(key, value))?
            }
            "layer_pattern" => model.layer_pattern = value.clone(),
            "dropout" => model.dropout = value.parse().map_err(|_| bad(key, value))?,
            "printed_readout" => {
                model.printed_readout = value.parse().map_err(|_| bad(key, value))?
            }
            "learning_rate" => {
                train_config.learning_rate = value.parse().map_err(|_| bad(key, value))?
            }
            "batch_size" => {
                train_config.batch_size = value.parse().map_err(|_| bad(key, value))?
            }
            "weight_decay" => {
                train_config.weight_decay = value.parse().map_err(|_| bad(key, value))?
            }
            "epochs" => train_config.epochs = value.parse().map_err(|_| bad(key, value))?,
            "precision" => {
                train_config.precision = match value.as_str() {
                    "f32" => Precision::F32,
                    "f64" => Precision::F64,
                    _ => return Err(bad(key, value)),
                }
            }
            other => return Err(Error::Config(format!("unknown config key {other:?}"))),
        }
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let overrides = load_overrides(cli.config.as_deref())?;
    std::fs::create_dir_all(&cli.out)?;
    match cli.command {
        Command::Prepare {
            sessions,
            synthetic,
            min_frequency,
        } => cmd_prepare(&cli.out, sessions, synthetic, min_frequency, cli.seed),
        Command::Train { pairs, vocab } => {
            cmd_train(&cli.out, &pairs, &vocab, cli.seed, &overrides)
        }
        Command::BuildNn {
            checkpoint,
            k,
            similarity,
        } => cmd_build_nn(&checkpoint, k, &similarity),
        Command::Eval {
            checkpoint,
            pairs,
            k_metric,
            mode,
        } => cmd_eval(&cli.out, &checkpoint, &pairs, k_metric, &mode),
        Command::Ablate {
            pairs,
            vocab,
            axis,
            values,
            nn_k,
        } => cmd_ablate(&cli.out, &pairs, &vocab, &axis, values, nn_k, cli.seed, &overrides),
        Command::Serve {
            checkpoint,
            bind,
            workers,
            protocol,
        } => cmd_serve(&checkpoint, &bind, workers, &protocol),
        Command::Bench {
            checkpoint,
            items,
            neighbors,
            requests,
            workers,
        } => cmd_bench(checkpoint, items, neighbors, requests, workers, cli.seed, &overrides),
    }
}

fn cmd_prepare(
    out: &Path,
    sessions: Option<PathBuf>,
    synthetic: Option<String>,
    min_frequency: usize,
    seed: u64,
) -> Result<()> {
    let (records, skipped) = match (sessions, synthetic) {
        (Some(path), None) => {
            let report = parse_sessions(&path)?;
            (report.records, report.skipped)
        }
        (None, Some(spec)) => {
            let (items, count) = spec
                .split_once(',')
                .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
                .ok_or_else(|| {
                    Error::Config(format!("expected ITEMS,SESSIONS, got {spec:?}"))
                })?;
            (planted_markov_sessions(items, count, 3, 8, seed), 0)
        }
        _ => {
            return Err(Error::Config(
                "exactly one of --sessions and --synthetic is required".into(),
            ))
        }
    };
    let vocab = build_vocabulary(&records, min_frequency)?;
    let (pairs, too_short) = prepare_pairs(&records, &vocab);
    write_pairs(&out.join("pairs.bin"), &pairs)?;
    write_manifest(&out.join("vocab.json"), &vocab)?;
    println!(
        "sessions {} (skipped {}), items {}, pairs {} (short sessions dropped {})",
        records.len(),
        skipped,
        vocab.len(),
        pairs.len(),
        too_short
    );
    Ok(())
}

fn cmd_train(
    out: &Path,
    pairs_path: &Path,
    vocab_path: &Path,
    seed: u64,
    overrides: &HashMap<String, String>,
) -> Result<()> {
    let pairs = read_pairs(pairs_path)?;
    let vocab = read_manifest(vocab_path)?;
    let mut model_config = ModelConfig::new(vocab.len());
    let mut train_config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    apply_overrides(&mut model_config, &mut train_config, overrides)?;
    let started = Instant::now();
    let outcome = train(&pairs, &model_config, &train_config)?;
    for e in &outcome.log {
        println!(
            "epoch {} loss {:.4} val-hit@10 {:.4} ({:.1}s)",
            e.epoch, e.mean_loss, e.validation_hit_at_10, e.wall_seconds
        );
    }
    save_checkpoint(out, &outcome.params, &model_config, &vocab.hash())?;
    write_manifest(&out.join("vocab.json"), &vocab)?;
    write_log_csv(&out.join("train_log.csv"), &outcome.log)?;
    println!(
        "checkpoint written to {} ({:.1}s total)",
        out.display(),
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn cmd_build_nn(checkpoint: &Path, k: usize, similarity: &str) -> Result<()> {
    let similarity = match similarity {
        "cosine" => Similarity::Cosine,
        "dot" => Similarity::Dot,
        other => return Err(Error::Config(format!("unknown similarity {other:?}"))),
    };
    let ckpt = load_checkpoint(checkpoint)?;
    let started = Instant::now();
    let matrix = build_matrix(ckpt.params.value("item_embeddings")?, k, similarity)?;
    save_matrix(&checkpoint.join("nn_matrix.bin"), &matrix)?;
    println!(
        "nn matrix {} x {} written ({:.1}s)",
        matrix.no_items,
        matrix.no_neighbors,
        started.elapsed().as_secs_f64()
    );
    Ok(())
}

fn print_report(label: &str, r: &EvalReport) {
    println!(
        "{label:<12} k={} cases={} hit={:.4} mrr={:.4} ndcg={:.4}",
        r.k, r.case_count, r.hit, r.mrr, r.ndcg
    );
}

fn cmd_eval(
    out: &Path,
    checkpoint: &Path,
    pairs_path: &Path,
    k_metric: usize,
    mode: &str,
) -> Result<()> {
    let ckpt = load_checkpoint(checkpoint)?;
    let pairs = read_pairs(pairs_path)?;
    let batch = 64;
    let mut rows: Vec<(String, EvalReport)> = Vec::new();
    if mode == "full" || mode == "both" {
        let r = evaluate(
            &ckpt.params,
            &ckpt.model_config,
            None,
            &pairs,
            k_metric,
            ScoringMode::FullCatalog,
            batch,
        )?;
        rows.push(("full".into(), r));
    }
    if mode == "restricted" || mode == "both" {
        let matrix = load_matrix(&checkpoint.join("nn_matrix.bin"))?;
        let r = evaluate(
            &ckpt.params,
            &ckpt.model_config,
            Some(&matrix),
            &pairs,
            k_metric,
            ScoringMode::NeighborRestricted,
            batch,
        )?;
        rows.push(("restricted".into(), r));
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("unknown eval mode {mode:?}")));
    }
    let vocab = read_manifest(&checkpoint.join("vocab.json"))?;
    let baseline = popularity_baseline(vocab.popularity(), &pairs, k_metric)?;
    rows.push(("popularity".into(), baseline));
    for (label, r) in &rows {
        print_report(label, r);
    }
    let mut csv = String::from("mode,k,cases,hit,mrr,ndcg\n");
    for (label, r) in &rows {
        csv.push_str(&format!(
            "{label},{},{},{},{},{}\n",
            r.k, r.case_count, r.hit, r.mrr, r.ndcg
        ));
    }
    std::fs::write(out.join("eval.csv"), csv)?;
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_ablate(
    out: &Path,
    pairs_path: &Path,
    vocab_path: &Path,
    axis: &str,
    values: Option<String>,
    nn_k: usize,
    seed: u64,
    overrides: &HashMap<String, String>,
) -> Result<()> {
    let pairs = read_pairs(pairs_path)?;
    let vocab = read_manifest(vocab_path)?;
    let mut model_config = ModelConfig::new(vocab.len());
    let mut train_config = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    apply_overrides(&mut model_config, &mut train_config, overrides)?;
    let cut = pairs.len() * 9 / 10;
    if cut == 0 || cut == pairs.len() {
        return Err(Error::Input("too few pairs to split for ablation".into()));
    }
    let values: Option<Vec<String>> =
        values.map(|v| v.split(',').map(|s| s.trim().to_owned()).collect());
    let cells = ablate(
        axis,
        values.as_deref(),
        &pairs[..cut],
        &pairs[cut..],
        &model_config,
        &train_config,
        nn_k,
        200,
    )?;
    for c in &cells {
        println!(
            "{axis}={:<8} ndcg={:.4} hit={:.4} mrr={:.4} train={:.1}s p95={}us",
            c.axis_value, c.ndcg, c.hit, c.mrr, c.train_seconds, c.p95_inference_us
        );
    }
    let path = out.join(format!("ablation_{axis}.csv"));
    write_ablation_csv(&path, &cells)?;
    println!("grid written to {}", path.display());
    Ok(())
}

fn cmd_serve(checkpoint: &Path, bind: &str, workers: usize, protocol: &str) -> Result<()> {
    let protocol: Protocol = protocol.parse()?;
    let state = Arc::new(ServingState::load(checkpoint)?);
    let server = start(state.clone(), bind, workers, protocol)?;
    println!(
        "serving {} items on {} ({} workers, vocab {})",
        state.config.catalog_size,
        server.addr,
        workers.max(1),
        &state.vocab.hash()[..12]
    );
    loop {
        std::thread::sleep(std::time::Duration::from_secs(3600));
    }
}

/// Random-parameter state with a ring-shaped neighbor matrix: exercises the
/// full serving path without an expensive training or matrix-build step.
fn synthetic_serving_state(
    items: usize,
    neighbors: usize,
    seed: u64,
    overrides: &HashMap<String, String>,
) -> Result<ServingState> {
    if neighbors >= items {
        return Err(Error::Config(format!(
            "neighbors {neighbors} must be below items {items}"
        )));
    }
    let records: Vec<SessionRecord> = (0..items as u64)
        .map(|i| SessionRecord {
            session_id: format!("b{i}"),
            items: vec![i + 1],
            categories: None,
            timestamps: None,
        })
        .collect();
    let vocab = build_vocabulary(&records, 1)?;
    let mut config = ModelConfig::new(vocab.len());
    let mut unused_train = TrainConfig::default();
    apply_overrides(&mut config, &mut unused_train, overrides)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = init_params(&config, &mut rng)?;
    let mut ids = Vec::with_capacity(items * neighbors);
    for i in 0..items as u32 {
        for j in 1..=neighbors as u32 {
            ids.push((i + j) % items as u32);
        }
    }
    let matrix = NearestNeighborMatrix::from_rows(items, neighbors, ids)?;
    ServingState::new(params, config, matrix, vocab)
}

fn cmd_bench(
    checkpoint: Option<PathBuf>,
    items: usize,
    neighbors: usize,
    requests: usize,
    workers: usize,
    seed: u64,
    overrides: &HashMap<String, String>,
) -> Result<()> {
    let state = Arc::new(match checkpoint {
        Some(dir) => ServingState::load(&dir)?,
        None => synthetic_serving_state(items, neighbors, seed, overrides)?,
    });
    let m = state.config.catalog_size;
    let server = start(state, "127.0.0.1:0", workers, Protocol::Http)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(99));
    let mut latencies = Vec::with_capacity(requests);
    for _ in 0..requests {
        let len = rng.random_range(1..=3usize);
        let items: Vec<u64> = (0..len)
            .map(|_| rng.random_range(0..m as u64) + 1)
            .collect();
        let begin = Instant::now();
        http_recommend(
            server.addr,
            &InferenceRequest {
                items,
                cats: None,
                n: 10,
            },
        )?;
        latencies.push(begin.elapsed().as_micros() as u64);
    }
    latencies.sort_unstable();
    let pct = |p: f64| latencies[((latencies.len() as f64 * p).ceil() as usize).max(1) - 1];
    println!(
        "{} requests: p50 {}us p95 {}us p99 {}us",
        latencies.len(),
        pct(0.50),
        pct(0.95),
        pct(0.99)
    );
    Ok(())
}
