//! Offline evaluation: deterministic rank computation, hit/mrr/ndcg@K,
//! the popularity baseline, and the ablation grid runner.

use std::io::Write as _;
use std::path::Path;
use std::time::Instant;

use crate::dataio::TrainingSequence;
use crate::error::{Error, Result};
use crate::knn::{self, NearestNeighborMatrix, Similarity};
use crate::model::{run_model_eval, ModelConfig};
use crate::numerics::ParamStore;
use crate::sessiongraph::{build_graph, build_graph_for_pairs, GraphMode};
use crate::training::{train, TrainConfig};

pub const DEFAULT_K: usize = 10;

/// 1-based rank of `target` within a scored candidate list; `None` when the
/// target is not a candidate. Ties resolve by ascending id: equal-score items
/// with a smaller id rank ahead of the target.
pub fn rank_of_target(scores: &[f64], ids: &[u32], target: u32) -> Option<usize> {
    let pos = ids.iter().position(|&i| i == target)?;
    let t_score = scores[pos];
    let mut rank = 1;
    for (i, &s) in scores.iter().enumerate() {
        if s > t_score || (s == t_score && ids[i] < target) {
            rank += 1;
        }
    }
    Some(rank)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub k: usize,
    pub case_count: usize,
    pub hit: f64,
    pub mrr: f64,
    pub ndcg: f64,
}

/// Aggregate hit/mrr/ndcg@K over per-case ranks (`None` = miss). The
/// single-relevant-item ndcg has ideal DCG 1, so the gain is 1/log2(rank+1).
pub fn metrics_from_ranks(ranks: &[Option<usize>], k: usize) -> Result<EvalReport> {
    if ranks.is_empty() {
        return Err(Error::Evaluation("no evaluation cases".into()));
    }
    let n = ranks.len() as f64;
    let (mut hit, mut mrr, mut ndcg) = (0.0, 0.0, 0.0);
    for r in ranks {
        if let Some(rank) = r {
            if *rank <= k {
                hit += 1.0;
                mrr += 1.0 / *rank as f64;
                ndcg += 1.0 / ((*rank as f64) + 1.0).log2();
            }
        }
    }
    Ok(EvalReport {
        k,
        case_count: ranks.len(),
        hit: hit / n,
        mrr: mrr / n,
        ndcg: ndcg / n,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScoringMode {
    /// Rank the target against the whole catalog minus the session's items.
    FullCatalog,
    /// Rank only within the session's nearest-neighbor candidate union,
    /// mirroring the serving path.
    NeighborRestricted,
}

/// Score every test pair in eval mode and aggregate the ranking metrics.
/// Session items are never candidates, in either mode, matching serving.
pub fn evaluate(
    store: &ParamStore,
    config: &ModelConfig,
    matrix: Option<&NearestNeighborMatrix>,
    test: &[TrainingSequence],
    k: usize,
    mode: ScoringMode,
    batch_size: usize,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    if mode == ScoringMode::NeighborRestricted && matrix.is_none() {
        return Err(Error::Config("neighbor-restricted mode needs a matrix".into()));
    }
    let m = config.catalog_size as u32;
    let mut ranks = Vec::with_capacity(test.len());
    for batch in test.chunks(batch_size.max(1)) {
        let graph = build_graph_for_pairs(batch, GraphMode::Disjoint)?;
        let fwd = run_model_eval(store, config, &graph, None, None)?;
        let logits = fwd.tape.value(fwd.logits.expect("logits always produced"));
        for (row, pair) in batch.iter().enumerate() {
            let ids: Vec<u32> = match mode {
                ScoringMode::FullCatalog => {
                    (0..m).filter(|d| !pair.inputs.contains(d)).collect()
                }
                ScoringMode::NeighborRestricted => {
                    let (c, _) = knn::candidates(matrix.unwrap(), &pair.inputs);
                    c
                }
            };
            let scores: Vec<f64> = ids
                .iter()
                .map(|&d| logits.get(row, d as usize))
                .collect();
            ranks.push(rank_of_target(&scores, &ids, pair.target));
        }
    }
    metrics_from_ranks(&ranks, k)
}

/// Rank every target against the global frequency ordering, excluding the
/// session's own items like the model paths do.
pub fn popularity_baseline(counts: &[u64], test: &[TrainingSequence], k: usize) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Evaluation("empty test set".into()));
    }
    let mut ranks = Vec::with_capacity(test.len());
    for pair in test {
        let ids: Vec<u32> = (0..counts.len() as u32)
            .filter(|d| !pair.inputs.contains(d))
            .collect();
        let scores: Vec<f64> = ids.iter().map(|&d| counts[d as usize] as f64).collect();
        ranks.push(rank_of_target(&scores, &ids, pair.target));
    }
    metrics_from_ranks(&ranks, k)
}

// --- ablation grid -----------------------------------------------------

pub const LAYER_PATTERN_GRID: [&str; 5] = ["GGGG", "AAAA", "GGAA", "AAGG", "GAGA"];
pub const NN_SIZE_GRID: [usize; 6] = [25, 50, 75, 100, 125, 150];
pub const EMBEDDING_DIM_GRID: [usize; 3] = [16, 32, 64];

#[derive(Debug, Clone)]
pub struct AblationCell {
    pub axis_value: String,
    pub ndcg: f64,
    pub hit: f64,
    pub mrr: f64,
    pub train_seconds: f64,
    pub p95_inference_us: u64,
}

/// p95 of single-request neighbor-restricted inference over the first
/// `cap` test pairs, in microseconds.
pub fn p95_inference_us(
    store: &ParamStore,
    config: &ModelConfig,
    matrix: &NearestNeighborMatrix,
    test: &[TrainingSequence],
    cap: usize,
) -> Result<u64> {
    let mut latencies = Vec::new();
    for pair in test.iter().take(cap.max(1)) {
        let start = Instant::now();
        let (cands, _) = knn::candidates(matrix, &pair.inputs);
        if cands.is_empty() {
            continue;
        }
        let graph = build_graph(&[&pair.inputs], GraphMode::Disjoint)?;
        let fwd = run_model_eval(store, config, &graph, None, Some(&cands))?;
        let _ = fwd.tape.value(fwd.logits.expect("logits always produced"));
        latencies.push(start.elapsed().as_micros() as u64);
    }
    if latencies.is_empty() {
        return Err(Error::Evaluation("no measurable inference cases".into()));
    }
    latencies.sort_unstable();
    let idx = ((latencies.len() as f64 * 0.95).ceil() as usize).min(latencies.len()) - 1;
    Ok(latencies[idx])
}

fn matrix_for(store: &ParamStore, catalog: usize, k: usize) -> Result<NearestNeighborMatrix> {
    let k = k.min(catalog - 1).max(1);
    knn::build_matrix(store.value("item_embeddings")?, k, Similarity::Cosine)
}

/// One train/eval cycle per axis value. The nn_size axis trains once and
/// sweeps only the neighbor matrix. Metrics come from the
/// neighbor-restricted path so all three axes are comparable.
pub fn ablate(
    axis: &str,
    values: Option<&[String]>,
    train_pairs: &[TrainingSequence],
    test_pairs: &[TrainingSequence],
    base_model: &ModelConfig,
    base_train: &TrainConfig,
    nn_k: usize,
    latency_cap: usize,
) -> Result<Vec<AblationCell>> {
    let owned: Vec<String>;
    let values: Vec<String> = match values {
        Some(v) => v.to_vec(),
        None => {
            owned = match axis {
                "layer_pattern" => LAYER_PATTERN_GRID.iter().map(|s| s.to_string()).collect(),
                "nn_size" => NN_SIZE_GRID.iter().map(|v| v.to_string()).collect(),
                "embedding_dim" => EMBEDDING_DIM_GRID.iter().map(|v| v.to_string()).collect(),
                other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
            };
            owned
        }
    };
    let mut cells = Vec::new();
    match axis {
        "layer_pattern" | "embedding_dim" => {
            for value in &values {
                let mut config = base_model.clone();
                match axis {
                    "layer_pattern" => config.layer_pattern = value.clone(),
                    _ => {
                        config.embedding_dim = value
                            .parse()
                            .map_err(|_| Error::Config(format!("bad embedding dim {value:?}")))?
                    }
                }
                let start = Instant::now();
                let outcome = train(train_pairs, &config, base_train)?;
                let train_seconds = start.elapsed().as_secs_f64();
                let matrix = matrix_for(&outcome.params, config.catalog_size, nn_k)?;
                let report = evaluate(
                    &outcome.params,
                    &config,
                    Some(&matrix),
                    test_pairs,
                    DEFAULT_K,
                    ScoringMode::NeighborRestricted,
                    base_train.batch_size,
                )?;
                let p95 = p95_inference_us(
                    &outcome.params,
                    &config,
                    &matrix,
                    test_pairs,
                    latency_cap,
                )?;
                cells.push(AblationCell {
                    axis_value: value.clone(),
                    ndcg: report.ndcg,
                    hit: report.hit,
                    mrr: report.mrr,
                    train_seconds,
                    p95_inference_us: p95,
                });
            }
        }
        "nn_size" => {
            let start = Instant::now();
            let outcome = train(train_pairs, base_model, base_train)?;
            let train_seconds = start.elapsed().as_secs_f64();
            for value in &values {
                let k: usize = value
                    .parse()
                    .map_err(|_| Error::Config(format!("bad neighbor count {value:?}")))?;
                let matrix = matrix_for(&outcome.params, base_model.catalog_size, k)?;
                let report = evaluate(
                    &outcome.params,
                    base_model,
                    Some(&matrix),
                    test_pairs,
                    DEFAULT_K,
                    ScoringMode::NeighborRestricted,
                    base_train.batch_size,
                )?;
                let p95 = p95_inference_us(
                    &outcome.params,
                    base_model,
                    &matrix,
                    test_pairs,
                    latency_cap,
                )?;
                cells.push(AblationCell {
                    axis_value: value.clone(),
                    ndcg: report.ndcg,
                    hit: report.hit,
                    mrr: report.mrr,
                    train_seconds,
                    p95_inference_us: p95,
                });
            }
        }
        other => return Err(Error::Config(format!("unknown ablation axis {other:?}"))),
    }
    Ok(cells)
}

pub fn write_ablation_csv(path: &Path, cells: &[AblationCell]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "value,ndcg@10,hit@10,mrr@10,train_seconds,p95_inference_us")?;
    for c in cells {
        writeln!(
            w,
            "{},{},{},{},{:.3},{}",
            c.axis_value, c.ndcg, c.hit, c.mrr, c.train_seconds, c.p95_inference_us
        )?;
    }
    Ok(())
}

pub fn write_report_csv(path: &Path, label: &str, report: &EvalReport) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "mode,k,cases,hit,mrr,ndcg")?;
    writeln!(
        w,
        "{label},{},{},{},{},{}",
        report.k, report.case_count, report.hit, report.mrr, report.ndcg
    )?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_params;
    use crate::synthetic::planted_markov_sessions;
    use crate::dataio::{build_vocabulary, prepare_pairs};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn unique_maximum_ranks_first() {
        let r = rank_of_target(&[0.1, 0.9, 0.3], &[5, 7, 9], 7);
        assert_eq!(r, Some(1));
    }

    #[test]
    fn tie_with_smaller_id_ranks_second() {
        let r = rank_of_target(&[0.5, 0.5, 0.1], &[3, 8, 9], 8);
        assert_eq!(r, Some(2));
        // same scores but the target has the smaller id
        let r = rank_of_target(&[0.5, 0.5, 0.1], &[3, 8, 9], 3);
        assert_eq!(r, Some(1));
    }

    #[test]
    fn absent_target_is_a_miss() {
        assert_eq!(rank_of_target(&[1.0], &[2], 3), None);
    }

    #[test]
    fn closed_form_metric_values() {
        let all_first = metrics_from_ranks(&[Some(1), Some(1)], 10).unwrap();
        assert_eq!((all_first.hit, all_first.mrr, all_first.ndcg), (1.0, 1.0, 1.0));

        let rank4 = metrics_from_ranks(&[Some(4)], 10).unwrap();
        assert_eq!(rank4.hit, 1.0);
        assert_eq!(rank4.mrr, 0.25);
        assert!((rank4.ndcg - 1.0 / 5.0f64.log2()).abs() < 1e-15);

        let rank11 = metrics_from_ranks(&[Some(11)], 10).unwrap();
        assert_eq!((rank11.hit, rank11.mrr, rank11.ndcg), (0.0, 0.0, 0.0));

        assert!(metrics_from_ranks(&[], 10).is_err());
    }

    // direct-definition oracle, written independently of metrics_from_ranks
    fn oracle(ranks: &[Option<usize>], k: usize) -> (f64, f64, f64) {
        let hits: Vec<usize> = ranks
            .iter()
            .filter_map(|r| r.filter(|&x| x <= k))
            .collect();
        let n = ranks.len() as f64;
        let hit = hits.len() as f64 / n;
        let mrr = hits.iter().map(|&r| (r as f64).recip()).sum::<f64>() / n;
        let ndcg = hits
            .iter()
            .map(|&r| std::f64::consts::LN_2 / ((r + 1) as f64).ln())
            .sum::<f64>()
            / n;
        (hit, mrr, ndcg)
    }

    #[test]
    fn metrics_match_direct_definition_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..10_000 {
            let len = rng.random_range(1..20usize);
            let ranks: Vec<Option<usize>> = (0..len)
                .map(|_| {
                    if rng.random::<f64>() < 0.1 {
                        None
                    } else {
                        Some(rng.random_range(1..30usize))
                    }
                })
                .collect();
            let got = metrics_from_ranks(&ranks, 10).unwrap();
            let (hit, mrr, ndcg) = oracle(&ranks, 10);
            assert!((got.hit - hit).abs() < 1e-12);
            assert!((got.mrr - mrr).abs() < 1e-12);
            assert!((got.ndcg - ndcg).abs() < 1e-12);
            assert!(got.ndcg <= got.hit + 1e-12);
            assert!(got.mrr <= got.hit + 1e-12);
        }
    }

    #[test]
    fn memorizing_model_hits_at_ten() {
        let mut config = ModelConfig::new(30);
        config.embedding_dim = 8;
        let train_config = TrainConfig {
            learning_rate: 0.05,
            epochs: 60,
            batch_size: 4,
            ..TrainConfig::default()
        };
        let pair = TrainingSequence {
            inputs: vec![0, 2],
            target: 1,
        };
        let outcome = train(std::slice::from_ref(&pair), &config, &train_config).unwrap();
        let report = evaluate(
            &outcome.params,
            &config,
            None,
            &[pair],
            10,
            ScoringMode::FullCatalog,
            4,
        )
        .unwrap();
        assert_eq!(report.hit, 1.0);
    }

    #[test]
    fn random_model_scores_at_chance_level() {
        let sessions = planted_markov_sessions(200, 300, 3, 5, 21);
        let vocab = build_vocabulary(&sessions, 1).unwrap();
        let (pairs, _) = prepare_pairs(&sessions, &vocab);
        let mut config = ModelConfig::new(vocab.len());
        config.embedding_dim = 8;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = init_params(&config, &mut rng).unwrap();
        let test = &pairs[..400.min(pairs.len())];
        let report = evaluate(&store, &config, None, test, 10, ScoringMode::FullCatalog, 64)
            .unwrap();
        let chance = 10.0 / vocab.len() as f64;
        assert!(
            (report.hit - chance).abs() < 0.02,
            "hit {} vs chance {chance}",
            report.hit
        );
    }

    #[test]
    fn full_neighborhood_parity_with_full_catalog() {
        let m = 40usize;
        let mut config = ModelConfig::new(m);
        config.embedding_dim = 6;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let store = init_params(&config, &mut rng).unwrap();
        let matrix = matrix_for(&store, m, m - 1).unwrap();
        let mut test = Vec::new();
        for _ in 0..100 {
            let len = rng.random_range(1..4usize);
            let inputs: Vec<u32> = (0..len).map(|_| rng.random_range(0..m as u32)).collect();
            let target = rng.random_range(0..m as u32);
            test.push(TrainingSequence { inputs, target });
        }
        let full = evaluate(&store, &config, None, &test, 10, ScoringMode::FullCatalog, 16)
            .unwrap();
        let restricted = evaluate(
            &store,
            &config,
            Some(&matrix),
            &test,
            10,
            ScoringMode::NeighborRestricted,
            16,
        )
        .unwrap();
        assert_eq!(full, restricted);
    }

    #[test]
    fn popularity_baseline_perfect_when_target_dominates() {
        // item 0 is every target and by far the most frequent
        let counts = vec![1000u64, 5, 4, 3];
        let test: Vec<TrainingSequence> = (1..4u32)
            .map(|i| TrainingSequence {
                inputs: vec![i],
                target: 0,
            })
            .collect();
        let a = popularity_baseline(&counts, &test, 10).unwrap();
        assert_eq!(a.hit, 1.0);
        assert_eq!(a.mrr, 1.0);
        let b = popularity_baseline(&counts, &test, 10).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ablation_grid_shape_and_unknown_axis() {
        let sessions = planted_markov_sessions(20, 60, 3, 4, 8);
        let vocab = build_vocabulary(&sessions, 1).unwrap();
        let (pairs, _) = prepare_pairs(&sessions, &vocab);
        let cut = pairs.len() * 8 / 10;
        let mut config = ModelConfig::new(vocab.len());
        config.embedding_dim = 4;
        let train_config = TrainConfig {
            epochs: 1,
            batch_size: 32,
            ..TrainConfig::default()
        };
        let values = vec!["G".to_string(), "A".to_string()];
        let cells = ablate(
            "layer_pattern",
            Some(&values),
            &pairs[..cut],
            &pairs[cut..],
            &config,
            &train_config,
            5,
            20,
        )
        .unwrap();
        assert_eq!(cells.len(), 2);
        assert_eq!(cells[0].axis_value, "G");

        let err = ablate(
            "nonsense",
            None,
            &pairs[..cut],
            &pairs[cut..],
            &config,
            &train_config,
            5,
            20,
        );
        assert!(err.is_err());
    }
}
