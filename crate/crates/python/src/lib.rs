//! Python bindings: corpus preparation, training, evaluation, and
//! recommendation over the same engine the CLI uses.

use std::path::PathBuf;
use std::sync::Arc;

use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use grainrec::dataio::{build_vocabulary, prepare_pairs, SessionRecord, TrainingSequence};
use grainrec::eval::{evaluate, popularity_baseline, EvalReport, ScoringMode};
use grainrec::knn::{build_matrix, save_matrix, Similarity};
use grainrec::model::ModelConfig;
use grainrec::serving::{InferenceRequest, ServingState};
use grainrec::synthetic::planted_markov_sessions;
use grainrec::training::{save_checkpoint, train, TrainConfig};

fn err(e: grainrec::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// A prepared corpus: vocabulary plus (prefix, next-item) training pairs.
#[pyclass]
struct Dataset {
    vocab: grainrec::dataio::Vocabulary,
    pairs: Vec<TrainingSequence>,
}

#[pymethods]
impl Dataset {
    /// Build from raw sessions (lists of raw item ids).
    #[staticmethod]
    #[pyo3(signature = (sessions, min_frequency=1))]
    fn from_sessions(sessions: Vec<Vec<u64>>, min_frequency: usize) -> PyResult<Self> {
        let records: Vec<SessionRecord> = sessions
            .into_iter()
            .enumerate()
            .map(|(i, items)| SessionRecord {
                session_id: format!("py{i}"),
                items,
                categories: None,
                timestamps: None,
            })
            .collect();
        let vocab = build_vocabulary(&records, min_frequency).map_err(err)?;
        let (pairs, _) = prepare_pairs(&records, &vocab);
        Ok(Dataset { vocab, pairs })
    }

    /// Seeded planted-Markov corpus, the same generator the CLI uses.
    #[staticmethod]
    #[pyo3(signature = (items, sessions, seed=0))]
    fn synthetic(items: usize, sessions: usize, seed: u64) -> PyResult<Self> {
        let records = planted_markov_sessions(items, sessions, 3, 8, seed);
        let vocab = build_vocabulary(&records, 1).map_err(err)?;
        let (pairs, _) = prepare_pairs(&records, &vocab);
        Ok(Dataset { vocab, pairs })
    }

    #[getter]
    fn no_items(&self) -> usize {
        self.vocab.len()
    }

    #[getter]
    fn no_pairs(&self) -> usize {
        self.pairs.len()
    }

    /// hit/mrr/ndcg of ranking by global popularity, the sanity yardstick.
    #[pyo3(signature = (k=10))]
    fn popularity_metrics(&self, k: usize) -> PyResult<(f64, f64, f64)> {
        let r = popularity_baseline(self.vocab.popularity(), &self.pairs, k).map_err(err)?;
        Ok((r.hit, r.mrr, r.ndcg))
    }
}

fn report_tuple(r: EvalReport) -> (f64, f64, f64) {
    (r.hit, r.mrr, r.ndcg)
}

/// A trained model plus its nearest-neighbor matrix and vocabulary.
#[pyclass]
struct Recommender {
    state: Arc<ServingState>,
}

#[pymethods]
impl Recommender {
    /// Train on a dataset and precompute the k-nearest-neighbor matrix.
    #[staticmethod]
    #[pyo3(signature = (dataset, embedding_dim=32, layer_pattern="GA", epochs=5,
                        learning_rate=0.00045, batch_size=64, seed=0, nn_k=100))]
    #[allow(clippy::too_many_arguments)]
    fn train(
        py: Python<'_>,
        dataset: &Dataset,
        embedding_dim: usize,
        layer_pattern: &str,
        epochs: usize,
        learning_rate: f64,
        batch_size: usize,
        seed: u64,
        nn_k: usize,
    ) -> PyResult<Self> {
        let mut config = ModelConfig::new(dataset.vocab.len());
        config.embedding_dim = embedding_dim;
        config.layer_pattern = layer_pattern.to_owned();
        let train_config = TrainConfig {
            learning_rate,
            batch_size,
            epochs,
            seed,
            ..TrainConfig::default()
        };
        let (params, matrix) = py
            .detach(|| {
                let outcome = train(&dataset.pairs, &config, &train_config)?;
                let k = nn_k.min(dataset.vocab.len() - 1).max(1);
                let matrix =
                    build_matrix(outcome.params.value("item_embeddings")?, k, Similarity::Cosine)?;
                Ok::<_, grainrec::Error>((outcome.params, matrix))
            })
            .map_err(err)?;
        let state =
            ServingState::new(params, config, matrix, dataset.vocab.clone()).map_err(err)?;
        Ok(Recommender {
            state: Arc::new(state),
        })
    }

    /// Load a checkpoint directory written by `save` or the CLI.
    #[staticmethod]
    fn load(dir: PathBuf) -> PyResult<Self> {
        Ok(Recommender {
            state: Arc::new(ServingState::load(&dir).map_err(err)?),
        })
    }

    fn save(&self, dir: PathBuf) -> PyResult<()> {
        let s = &self.state;
        save_checkpoint(&dir, &s.params, &s.config, &s.vocab.hash()).map_err(err)?;
        grainrec::dataio::write_manifest(&dir.join("vocab.json"), &s.vocab).map_err(err)?;
        save_matrix(&dir.join("nn_matrix.bin"), &s.matrix).map_err(err)
    }

    /// Top-n next-item recommendations for a live session of raw item ids.
    /// Returns (recs, scores, fallback_used).
    #[pyo3(signature = (items, n=10))]
    fn recommend(&self, items: Vec<u64>, n: usize) -> PyResult<(Vec<u64>, Vec<f64>, bool)> {
        let out = self
            .state
            .infer(&InferenceRequest {
                items,
                cats: None,
                n,
            })
            .map_err(err)?;
        Ok((out.recs, out.scores, out.fallback_used))
    }

    /// The precomputed nearest neighbors of a raw item id.
    fn neighbors(&self, item: u64) -> PyResult<Vec<u64>> {
        let dense = self
            .state
            .vocab
            .dense(item)
            .ok_or_else(|| PyValueError::new_err(format!("unknown item {item}")))?;
        Ok(self
            .state
            .matrix
            .neighbors(dense)
            .unwrap_or(&[])
            .iter()
            .map(|&d| self.state.vocab.raw(d).expect("dense id in range"))
            .collect())
    }

    /// (hit, mrr, ndcg) at k over the dataset's pairs. `restricted` scores
    /// only the neighbor candidate set, mirroring serving.
    #[pyo3(signature = (dataset, k=10, restricted=false))]
    fn metrics(
        &self,
        py: Python<'_>,
        dataset: &Dataset,
        k: usize,
        restricted: bool,
    ) -> PyResult<(f64, f64, f64)> {
        let s = &self.state;
        let (mode, matrix) = if restricted {
            (ScoringMode::NeighborRestricted, Some(&s.matrix))
        } else {
            (ScoringMode::FullCatalog, None)
        };
        py.detach(|| evaluate(&s.params, &s.config, matrix, &dataset.pairs, k, mode, 64))
            .map(report_tuple)
            .map_err(err)
    }

    #[getter]
    fn vocab_hash(&self) -> String {
        self.state.vocab.hash()
    }

    #[getter]
    fn no_items(&self) -> usize {
        self.state.config.catalog_size
    }
}

#[pymodule]
fn grainrec_rs(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Dataset>()?;
    m.add_class::<Recommender>()?;
    Ok(())
}
