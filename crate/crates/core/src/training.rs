//! Mini-batch training loop, optimizer, seeding, and portable checkpoints.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::TrainingSequence;
use crate::error::{Error, Result};
use crate::model::{init_params, run_model, Mode, ModelConfig};
use crate::numerics::ParamStore;
use crate::sessiongraph::{build_graph_for_pairs, GraphMode};

pub const CHECKPOINT_VERSION: u32 = 1;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
pub const GRAD_CLIP_NORM: f64 = 5.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.00045,
            batch_size: 64,
            weight_decay: 0.0001,
            epochs: 5,
            seed: 0,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub validation_hit_at_10: f64,
    pub wall_seconds: f64,
}

pub struct TrainOutcome {
    pub params: ParamStore,
    pub log: Vec<EpochLog>,
}

/// Adam with decoupled weight decay over all trainable parameters.
/// `step` is 1-based for bias correction.
pub fn optimizer_step(store: &mut ParamStore, config: &TrainConfig, step: usize) {
    let lr = config.learning_rate;
    let t = step as i32;
    let bc1 = 1.0 - ADAM_BETA1.powi(t);
    let bc2 = 1.0 - ADAM_BETA2.powi(t);
    store.for_each_mut(|_, p| {
        if !p.trainable {
            return;
        }
        let n = p.value.data().len();
        for i in 0..n {
            let g = p.grad.data()[i];
            let m = ADAM_BETA1 * p.moment1.data()[i] + (1.0 - ADAM_BETA1) * g;
            let v = ADAM_BETA2 * p.moment2.data()[i] + (1.0 - ADAM_BETA2) * g * g;
            p.moment1.data_mut()[i] = m;
            p.moment2.data_mut()[i] = v;
            let update = lr * (m / bc1) / ((v / bc2).sqrt() + ADAM_EPS);
            let decay = lr * config.weight_decay * p.value.data()[i];
            p.value.data_mut()[i] -= update + decay;
        }
    });
    if config.precision == Precision::F32 {
        store.round_values_to_f32();
    }
}

fn clip_gradients(store: &mut ParamStore, max_norm: f64) {
    let norm = store.grad_norm();
    if norm > max_norm {
        let scale = max_norm / norm;
        store.for_each_mut(|_, p| {
            if p.trainable {
                p.grad.scale_assign(scale);
            }
        });
    }
}

/// Fraction of validation pairs whose target ranks in the top 10 of a
/// full-catalog scoring pass. Ties broken by ascending item id.
pub fn validation_hit_at_10(
    store: &ParamStore,
    model_config: &ModelConfig,
    pairs: &[TrainingSequence],
    batch_size: usize,
) -> Result<f64> {
    if pairs.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in pairs.chunks(batch_size) {
        let graph = build_graph_for_pairs(batch, GraphMode::Disjoint)?;
        let mut store = store.clone();
        let fwd = run_model(
            &mut store,
            model_config,
            &graph,
            None,
            None,
            Mode::Eval,
            &mut rng,
        )?;
        let logits = fwd.tape.value(fwd.logits.expect("logits requested"));
        for (row, pair) in batch.iter().enumerate() {
            let target = pair.target as usize;
            let ts = logits.get(row, target);
            let mut rank = 1usize;
            for c in 0..logits.cols() {
                let s = logits.get(row, c);
                if s > ts || (s == ts && c < target) {
                    rank += 1;
                }
            }
            if rank <= 10 {
                hits += 1;
            }
        }
    }
    Ok(hits as f64 / pairs.len() as f64)
}

/// Split off the last 10% of pairs (by corpus position) for validation.
pub fn split_validation(pairs: &[TrainingSequence]) -> (&[TrainingSequence], &[TrainingSequence]) {
    let val = pairs.len() / 10;
    let cut = pairs.len() - val;
    (&pairs[..cut], &pairs[cut..])
}

/// Train from a fresh initialization; returns parameters and the epoch log.
pub fn train(
    pairs: &[TrainingSequence],
    model_config: &ModelConfig,
    train_config: &TrainConfig,
) -> Result<TrainOutcome> {
    model_config.validate()?;
    train_config.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("empty training set".into()));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(train_config.seed);
    let mut store = init_params(model_config, &mut init_rng)?;
    if train_config.precision == Precision::F32 {
        store.round_values_to_f32();
    }
    let (train_pairs, val_pairs) = split_validation(pairs);
    let train_pairs = if train_pairs.is_empty() { pairs } else { train_pairs };
    let mut log = Vec::new();
    let mut step = 0usize;
    for epoch in 0..train_config.epochs {
        let start = Instant::now();
        let mut epoch_rng =
            ChaCha8Rng::seed_from_u64(train_config.seed.wrapping_add(1 + epoch as u64));
        let mut order: Vec<usize> = (0..train_pairs.len()).collect();
        order.shuffle(&mut epoch_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(train_config.batch_size) {
            let batch: Vec<TrainingSequence> =
                chunk.iter().map(|&i| train_pairs[i].clone()).collect();
            let graph = build_graph_for_pairs(&batch, GraphMode::Disjoint)?;
            let targets: Vec<usize> = batch.iter().map(|p| p.target as usize).collect();
            store.zero_grads();
            let fwd = run_model(
                &mut store,
                model_config,
                &graph,
                Some(&targets),
                None,
                Mode::Train,
                &mut epoch_rng,
            )?;
            let loss_id = fwd.loss.expect("loss requested");
            let loss = fwd.tape.value(loss_id).get(0, 0);
            if !loss.is_finite() {
                let norms: Vec<String> = store
                    .iter()
                    .map(|(n, p)| format!("{n}={:.3e}", p.value.frobenius_norm()))
                    .collect();
                return Err(Error::Diverged(format!(
                    "non-finite loss at epoch {epoch} batch {batches}; parameter norms: {}",
                    norms.join(", ")
                )));
            }
            let grads = fwd.tape.backward(loss_id)?;
            for (name, id) in &fwd.leaves {
                if let Some(g) = grads.get(*id) {
                    store.accumulate_grad(name, g)?;
                }
            }
            clip_gradients(&mut store, GRAD_CLIP_NORM);
            step += 1;
            optimizer_step(&mut store, train_config, step);
            loss_sum += loss;
            batches += 1;
        }
        let hit = validation_hit_at_10(&store, model_config, val_pairs, train_config.batch_size)?;
        log.push(EpochLog {
            epoch,
            mean_loss: loss_sum / batches.max(1) as f64,
            validation_hit_at_10: hit,
            wall_seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(TrainOutcome { params: store, log })
}

pub fn write_log_csv(path: &Path, log: &[EpochLog]) -> Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "epoch,loss,hit@10,wall_seconds")?;
    for e in log {
        writeln!(
            w,
            "{},{},{},{:.3}",
            e.epoch, e.mean_loss, e.validation_hit_at_10, e.wall_seconds
        )?;
    }
    Ok(())
}

// --- checkpoint format -------------------------------------------------
//
// <dir>/manifest.txt : human-readable header + parameter table
// <dir>/params.bin   : little-endian f32, row-major, in manifest order

pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    model_config: &ModelConfig,
    vocab_hash: &str,
) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let mut manifest = std::io::BufWriter::new(std::fs::File::create(dir.join("manifest.txt"))?);
    writeln!(manifest, "version {CHECKPOINT_VERSION}")?;
    writeln!(manifest, "embedding_dim {}", model_config.embedding_dim)?;
    writeln!(manifest, "layer_pattern {}", model_config.layer_pattern)?;
    writeln!(manifest, "dropout {}", model_config.dropout)?;
    writeln!(manifest, "catalog_size {}", model_config.catalog_size)?;
    writeln!(manifest, "printed_readout {}", model_config.printed_readout)?;
    writeln!(manifest, "vocab_hash {vocab_hash}")?;
    let mut payload = std::io::BufWriter::new(std::fs::File::create(dir.join("params.bin"))?);
    for (name, p) in store.iter() {
        let (r, c) = p.value.shape();
        writeln!(manifest, "param {name} {r} {c}")?;
        for &v in p.value.data() {
            payload.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    manifest.flush()?;
    payload.flush()?;
    Ok(())
}

#[derive(Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub model_config: ModelConfig,
    pub vocab_hash: String,
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest = std::fs::File::open(dir.join("manifest.txt"))?;
    let mut lines = BufReader::new(manifest).lines();
    let mut field = |name: &str| -> Result<String> {
        let line = lines
            .next()
            .ok_or_else(|| Error::Compatibility(format!("manifest missing field {name}")))??;
        let (key, value) = line
            .split_once(' ')
            .ok_or_else(|| Error::Compatibility(format!("malformed manifest line {line:?}")))?;
        if key != name {
            return Err(Error::Compatibility(format!(
                "manifest field {key:?} where {name:?} expected"
            )));
        }
        Ok(value.to_string())
    };
    let version: u32 = field("version")?
        .parse()
        .map_err(|_| Error::Compatibility("field version is not an integer".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Compatibility(format!(
            "checkpoint version {version}, expected {CHECKPOINT_VERSION}"
        )));
    }
    let parse_err = |f: &str| Error::Compatibility(format!("field {f} malformed"));
    let model_config = ModelConfig {
        embedding_dim: field("embedding_dim")?
            .parse()
            .map_err(|_| parse_err("embedding_dim"))?,
        layer_pattern: field("layer_pattern")?,
        dropout: field("dropout")?.parse().map_err(|_| parse_err("dropout"))?,
        catalog_size: field("catalog_size")?
            .parse()
            .map_err(|_| parse_err("catalog_size"))?,
        printed_readout: field("printed_readout")?
            .parse()
            .map_err(|_| parse_err("printed_readout"))?,
    };
    let vocab_hash = field("vocab_hash")?;

    // rebuild the store skeleton to recover shapes and trainable flags
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut store = init_params(&model_config, &mut rng)?;

    let mut table = Vec::new();
    for line in lines {
        let line = line?;
        let mut parts = line.split(' ');
        let (tag, name, r, c) = (parts.next(), parts.next(), parts.next(), parts.next());
        match (tag, name, r, c) {
            (Some("param"), Some(name), Some(r), Some(c)) => {
                let rows: usize = r.parse().map_err(|_| parse_err(name))?;
                let cols: usize = c.parse().map_err(|_| parse_err(name))?;
                table.push((name.to_string(), rows, cols));
            }
            _ => return Err(Error::Compatibility(format!("malformed param line {line:?}"))),
        }
    }
    let expected: Vec<String> = store.names().to_vec();
    let listed: Vec<String> = table.iter().map(|(n, _, _)| n.clone()).collect();
    if expected != listed {
        let missing = expected.iter().find(|n| !listed.contains(n));
        let extra = listed.iter().find(|n| !expected.contains(n));
        return Err(Error::Compatibility(format!(
            "parameter table mismatch (missing: {missing:?}, unexpected: {extra:?})"
        )));
    }
    let mut payload = Vec::new();
    std::fs::File::open(dir.join("params.bin"))?.read_to_end(&mut payload)?;
    let mut offset = 0usize;
    for (name, rows, cols) in &table {
        let p = store.get_mut(name)?;
        if p.value.shape() != (*rows, *cols) {
            return Err(Error::Compatibility(format!(
                "parameter {name} has shape {rows}x{cols}, expected {:?}",
                p.value.shape()
            )));
        }
        let n = rows * cols;
        if offset + 4 * n > payload.len() {
            return Err(Error::Compatibility(format!(
                "payload truncated at parameter {name}"
            )));
        }
        for i in 0..n {
            let bytes: [u8; 4] = payload[offset + 4 * i..offset + 4 * i + 4]
                .try_into()
                .expect("bounds checked");
            p.value.data_mut()[i] = f32::from_le_bytes(bytes) as f64;
        }
        offset += 4 * n;
    }
    if offset != payload.len() {
        return Err(Error::Compatibility(format!(
            "{} trailing bytes in payload",
            payload.len() - offset
        )));
    }
    Ok(Checkpoint {
        params: store,
        model_config,
        vocab_hash,
    })
}
