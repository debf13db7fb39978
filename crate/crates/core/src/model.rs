//! The recommendation network: embedding lookup, alternating GRU-GNN and
//! attention layers driven by a pattern string, attention readout into
//! session embeddings, and catalog scoring with cross-entropy loss.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gru::GRU_WEIGHT_NAMES;
use crate::numerics::{gru_cell, BatchNormState, GruWeights, ParamStore, Tape, Tensor2D, ValueId};
use crate::sessiongraph::BatchedSessionGraph;

pub const DEFAULT_EMBEDDING_DIM: usize = 32;
pub const DEFAULT_DROPOUT: f64 = 0.146;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub embedding_dim: usize,
    pub layer_pattern: String,
    pub dropout: f64,
    pub catalog_size: usize,
    /// Use the printed readout aggregate sum(alpha_i) * x_n instead of the
    /// attentive sum over item occurrences. Off by default.
    #[serde(default)]
    pub printed_readout: bool,
}

impl ModelConfig {
    pub fn new(catalog_size: usize) -> Self {
        ModelConfig {
            embedding_dim: DEFAULT_EMBEDDING_DIM,
            layer_pattern: "GA".into(),
            dropout: DEFAULT_DROPOUT,
            catalog_size,
            printed_readout: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_pattern.is_empty() {
            return Err(Error::Config("layer pattern is empty".into()));
        }
        if let Some(c) = self.layer_pattern.chars().find(|c| !matches!(c, 'G' | 'A')) {
            return Err(Error::Config(format!(
                "layer pattern character {c:?} (expected G or A)"
            )));
        }
        if self.embedding_dim < 2 {
            return Err(Error::Config(format!(
                "embedding dim {} too small",
                self.embedding_dim
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0,1)", self.dropout)));
        }
        if self.catalog_size == 0 {
            return Err(Error::Config("empty catalog".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Initialize every learnable tensor (and batch-norm running state) for the
/// configured stack. Uniform(-1/sqrt(d), 1/sqrt(d)) throughout.
pub fn init_params(config: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<ParamStore> {
    config.validate()?;
    let d = config.embedding_dim;
    let mut store = ParamStore::new();
    store.insert_uniform("item_embeddings", config.catalog_size, d, d, rng)?;
    for (i, ch) in config.layer_pattern.chars().enumerate() {
        match ch {
            'G' => {
                for name in GRU_WEIGHT_NAMES {
                    let rows = if name.starts_with('b') { 1 } else { d };
                    store.insert_uniform(&format!("layer{i}.gnn.{name}"), rows, d, d, rng)?;
                }
                store.insert_uniform(&format!("layer{i}.gnn.w_self"), d, d, d, rng)?;
                store.insert_uniform(&format!("layer{i}.gnn.w_neigh"), d, d, d, rng)?;
            }
            'A' => {
                for name in ["w_query", "w_key", "w_value"] {
                    store.insert_uniform(&format!("layer{i}.attn.{name}"), d, d, d, rng)?;
                }
                store.insert_uniform(&format!("layer{i}.attn.w_edge"), d, 1, d, rng)?;
                let mut gamma = Tensor2D::zeros(1, d);
                gamma.fill(1.0);
                store.insert(&format!("layer{i}.attn.bn.gamma"), gamma)?;
                store.insert(&format!("layer{i}.attn.bn.beta"), Tensor2D::zeros(1, d))?;
                store.insert_state(
                    &format!("layer{i}.attn.bn.running_mean"),
                    Tensor2D::zeros(1, d),
                )?;
                let mut var = Tensor2D::zeros(1, d);
                var.fill(1.0);
                store.insert_state(&format!("layer{i}.attn.bn.running_var"), var)?;
            }
            _ => unreachable!("validated pattern"),
        }
    }
    store.insert_uniform("readout.w1", d, d, d, rng)?;
    store.insert_uniform("readout.w2", d, d, d, rng)?;
    store.insert_uniform("readout.bias", 1, d, d, rng)?;
    store.insert_uniform("readout.q", d, 1, d, rng)?;
    store.insert_uniform("readout.w3", 2 * d, d, d, rng)?;
    Ok(store)
}

struct GnnIds {
    gru: GruWeights,
    w_self: ValueId,
    w_neigh: ValueId,
}

struct AttnIds {
    w_query: ValueId,
    w_key: ValueId,
    w_value: ValueId,
    w_edge: ValueId,
    gamma: ValueId,
    beta: ValueId,
    bn_index: usize,
}

enum LayerIds {
    Gnn(GnnIds),
    Attn(AttnIds),
}

struct ReadoutIds {
    w1: ValueId,
    w2: ValueId,
    bias: ValueId,
    q: ValueId,
    w3: ValueId,
}

/// Everything produced by one forward pass. Leaves are listed in parameter
/// registration order for gradient accumulation.
pub struct ModelForward {
    pub tape: Tape,
    pub leaves: Vec<(String, ValueId)>,
    /// final node features, node_count x d
    pub node_states: ValueId,
    /// one row per session, batch x d
    pub session_embeddings: ValueId,
    pub logits: Option<ValueId>,
    pub loss: Option<ValueId>,
}

struct Registered {
    item_emb: ValueId,
    layers: Vec<LayerIds>,
    readout: ReadoutIds,
    leaves: Vec<(String, ValueId)>,
    bn_states: Vec<(String, String, BatchNormState)>,
}

fn register(tape: &mut Tape, store: &ParamStore, config: &ModelConfig) -> Result<Registered> {
    let mut leaves = Vec::new();
    let mut leaf = |tape: &mut Tape, name: String| -> Result<ValueId> {
        let id = tape.leaf(store.value(&name)?.clone());
        leaves.push((name, id));
        Ok(id)
    };
    let item_emb = leaf(tape, "item_embeddings".into())?;
    let mut layers = Vec::new();
    let mut bn_states = Vec::new();
    for (i, ch) in config.layer_pattern.chars().enumerate() {
        match ch {
            'G' => {
                let mut ids = [0usize; 9];
                for (k, name) in GRU_WEIGHT_NAMES.iter().enumerate() {
                    ids[k] = leaf(tape, format!("layer{i}.gnn.{name}"))?;
                }
                layers.push(LayerIds::Gnn(GnnIds {
                    gru: GruWeights {
                        w_update: ids[0],
                        u_update: ids[1],
                        b_update: ids[2],
                        w_reset: ids[3],
                        u_reset: ids[4],
                        b_reset: ids[5],
                        w_cand: ids[6],
                        u_cand: ids[7],
                        b_cand: ids[8],
                    },
                    w_self: leaf(tape, format!("layer{i}.gnn.w_self"))?,
                    w_neigh: leaf(tape, format!("layer{i}.gnn.w_neigh"))?,
                }));
            }
            'A' => {
                let w_query = leaf(tape, format!("layer{i}.attn.w_query"))?;
                let w_key = leaf(tape, format!("layer{i}.attn.w_key"))?;
                let w_value = leaf(tape, format!("layer{i}.attn.w_value"))?;
                let w_edge = leaf(tape, format!("layer{i}.attn.w_edge"))?;
                let gamma = leaf(tape, format!("layer{i}.attn.bn.gamma"))?;
                let beta = leaf(tape, format!("layer{i}.attn.bn.beta"))?;
                let mean_name = format!("layer{i}.attn.bn.running_mean");
                let var_name = format!("layer{i}.attn.bn.running_var");
                let state = BatchNormState {
                    running_mean: store.value(&mean_name)?.data().to_vec(),
                    running_var: store.value(&var_name)?.data().to_vec(),
                };
                let bn_index = bn_states.len();
                bn_states.push((mean_name, var_name, state));
                layers.push(LayerIds::Attn(AttnIds {
                    w_query,
                    w_key,
                    w_value,
                    w_edge,
                    gamma,
                    beta,
                    bn_index,
                }));
            }
            _ => unreachable!("validated pattern"),
        }
    }
    let readout = ReadoutIds {
        w1: leaf(tape, "readout.w1".into())?,
        w2: leaf(tape, "readout.w2".into())?,
        bias: leaf(tape, "readout.bias".into())?,
        q: leaf(tape, "readout.q".into())?,
        w3: leaf(tape, "readout.w3".into())?,
    };
    Ok(Registered {
        item_emb,
        layers,
        readout,
        leaves,
        bn_states,
    })
}

fn gnn_layer(
    tape: &mut Tape,
    graph: &BatchedSessionGraph,
    h: ValueId,
    ids: &GnnIds,
) -> Result<ValueId> {
    let d = tape.value(h).cols();
    let zero = tape.leaf(Tensor2D::zeros(1, d));
    let mut aggregated = Vec::with_capacity(graph.node_count);
    for node in 0..graph.node_count {
        let incoming = graph.edge_order(node);
        if incoming.is_empty() {
            aggregated.push(zero);
            continue;
        }
        let mut state = zero;
        for edge in incoming {
            let msg = tape.gather_rows(h, &[edge.src])?;
            state = gru_cell(tape, state, msg, &ids.gru)?;
        }
        aggregated.push(state);
    }
    let neigh = tape.stack_rows(&aggregated)?;
    let own = tape.matmul(h, ids.w_self)?;
    let agg = tape.matmul(neigh, ids.w_neigh)?;
    tape.add(own, agg)
}

fn attention_layer(
    tape: &mut Tape,
    graph: &BatchedSessionGraph,
    h: ValueId,
    ids: &AttnIds,
    bn_state: &mut BatchNormState,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ValueId> {
    if graph.shortcut_edges.is_empty() && graph.successor_edges.is_empty() && graph.node_count > 1 {
        // shortcut view never built for a multi-node graph
        return Err(Error::State("shortcut edges missing".into()));
    }
    let train = mode == Mode::Train;
    let mut x = tape.batchnorm(h, ids.gamma, ids.beta, bn_state, train)?;
    if train && config.dropout > 0.0 {
        x = tape.dropout(x, config.dropout, rng)?;
    }
    let q = tape.matmul(x, ids.w_query)?;
    let k = tape.matmul(x, ids.w_key)?;
    let v = tape.matmul(x, ids.w_value)?;

    let n = graph.node_count;
    let mut has_in = vec![false; n];
    let (mut srcs, mut dsts) = (Vec::new(), Vec::new());
    for e in &graph.shortcut_edges {
        srcs.push(e.src);
        dsts.push(e.dst);
        has_in[e.dst] = true;
    }
    // rows of nodes without in-neighbors pass through unchanged
    let mask = Tensor2D::from_vec(
        n,
        1,
        has_in.iter().map(|&b| if b { 0.0 } else { 1.0 }).collect(),
    )?;
    let mask = tape.leaf(mask);
    let passthrough = tape.scale_rows(h, mask)?;
    if srcs.is_empty() {
        return Ok(passthrough);
    }
    let q_dst = tape.gather_rows(q, &dsts)?;
    let k_src = tape.gather_rows(k, &srcs)?;
    let qk = tape.add(q_dst, k_src)?;
    let sig = tape.sigmoid(qk);
    let e = tape.matmul(sig, ids.w_edge)?;
    let alpha = tape.segment_softmax(e, &dsts)?;
    let v_src = tape.gather_rows(v, &srcs)?;
    let weighted = tape.scale_rows(v_src, alpha)?;
    let attended = tape.segment_sum_rows(weighted, &dsts, n)?;
    tape.add(attended, passthrough)
}

/// Apply the configured layer stack to initial node embeddings.
#[allow(clippy::too_many_arguments)]
fn run_stack(
    tape: &mut Tape,
    graph: &BatchedSessionGraph,
    reg: &mut Registered,
    config: &ModelConfig,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ValueId> {
    let node_items: Vec<usize> = graph.node_item.iter().map(|&i| i as usize).collect();
    for &item in &node_items {
        if item >= config.catalog_size {
            return Err(Error::Index(format!(
                "item index {item} outside catalog of {}",
                config.catalog_size
            )));
        }
    }
    let mut h = tape.gather_rows(reg.item_emb, &node_items)?;
    for li in 0..reg.layers.len() {
        h = match &reg.layers[li] {
            LayerIds::Gnn(ids) => gnn_layer(tape, graph, h, ids)?,
            LayerIds::Attn(ids) => {
                let bn_index = ids.bn_index;
                // split borrow: layer ids are read-only, bn state is mutable
                let ids_copy = AttnIds {
                    w_query: ids.w_query,
                    w_key: ids.w_key,
                    w_value: ids.w_value,
                    w_edge: ids.w_edge,
                    gamma: ids.gamma,
                    beta: ids.beta,
                    bn_index,
                };
                let state = &mut reg.bn_states[bn_index].2;
                attention_layer(tape, graph, h, &ids_copy, state, config, mode, rng)?
            }
        };
    }
    Ok(h)
}

fn readout(
    tape: &mut Tape,
    graph: &BatchedSessionGraph,
    h_final: ValueId,
    session: usize,
    ids: &ReadoutIds,
    printed_form: bool,
) -> Result<ValueId> {
    let occ = graph
        .session_nodes
        .get(session)
        .ok_or_else(|| Error::Key(format!("unknown session {session}")))?;
    if occ.is_empty() {
        return Err(Error::Key(format!("session {session} has no occurrences")));
    }
    let last = graph.session_last[session];
    let s_local = tape.gather_rows(h_final, &[last])?;
    let x_occ = tape.gather_rows(h_final, occ)?;
    let last_proj = tape.matmul(s_local, ids.w2)?;
    let last_proj = tape.add(last_proj, ids.bias)?;
    let occ_proj = tape.matmul(x_occ, ids.w1)?;
    let pre = tape.add_row_bias(occ_proj, last_proj)?;
    let sig = tape.sigmoid(pre);
    let alpha = tape.matmul(sig, ids.q)?;
    let s_global = if printed_form {
        // Eq. as printed: sum(alpha_i) * x_n
        let zeros = vec![0usize; occ.len()];
        let alpha_sum = tape.segment_sum_rows(alpha, &zeros, 1)?;
        tape.scale_rows(s_local, alpha_sum)?
    } else {
        let weighted = tape.scale_rows(x_occ, alpha)?;
        let zeros = vec![0usize; occ.len()];
        tape.segment_sum_rows(weighted, &zeros, 1)?
    };
    let cat = tape.concat_cols(s_local, s_global)?;
    tape.matmul(cat, ids.w3)
}

/// Restrict scoring to these dense item ids; `None` scores the full catalog.
pub type CandidateSet<'a> = Option<&'a [u32]>;

/// One full forward pass over a batched graph.
///
/// Targets, when given, must be positions into the scored set: dense item
/// ids for full-catalog scoring, candidate-list offsets when restricted.
/// Train mode writes updated batch-norm running statistics back to `store`.
pub fn run_model(
    store: &mut ParamStore,
    config: &ModelConfig,
    graph: &BatchedSessionGraph,
    targets: Option<&[usize]>,
    candidates: CandidateSet,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<ModelForward> {
    let (fwd, bn_states) = forward(store, config, graph, targets, candidates, mode, rng)?;
    if mode == Mode::Train {
        for (mean_name, var_name, state) in &bn_states {
            store
                .get_mut(mean_name)?
                .value
                .data_mut()
                .copy_from_slice(&state.running_mean);
            store
                .get_mut(var_name)?
                .value
                .data_mut()
                .copy_from_slice(&state.running_var);
        }
    }
    Ok(fwd)
}

/// Eval-mode forward over a shared read-only parameter store. Running
/// batch-norm statistics are consumed but never written back, so concurrent
/// callers need no synchronization.
pub fn run_model_eval(
    store: &ParamStore,
    config: &ModelConfig,
    graph: &BatchedSessionGraph,
    targets: Option<&[usize]>,
    candidates: CandidateSet,
) -> Result<ModelForward> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    forward(store, config, graph, targets, candidates, Mode::Eval, &mut rng).map(|(f, _)| f)
}

type BnWriteback = Vec<(String, String, BatchNormState)>;

fn forward(
    store: &ParamStore,
    config: &ModelConfig,
    graph: &BatchedSessionGraph,
    targets: Option<&[usize]>,
    candidates: CandidateSet,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(ModelForward, BnWriteback)> {
    config.validate()?;
    let mut tape = Tape::new();
    let mut reg = register(&mut tape, store, config)?;
    let h_final = run_stack(&mut tape, graph, &mut reg, config, mode, rng)?;

    let n_sessions = graph.session_nodes.len();
    let mut rows = Vec::with_capacity(n_sessions);
    for sid in 0..n_sessions {
        rows.push(readout(
            &mut tape,
            graph,
            h_final,
            sid,
            &reg.readout,
            config.printed_readout,
        )?);
    }
    let sessions = tape.stack_rows(&rows)?;

    let score_target = match candidates {
        None => reg.item_emb,
        Some(ids) => {
            let idx: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
            for &i in &idx {
                if i >= config.catalog_size {
                    return Err(Error::Index(format!(
                        "candidate {i} outside catalog of {}",
                        config.catalog_size
                    )));
                }
            }
            tape.gather_rows(reg.item_emb, &idx)?
        }
    };
    let logits = tape.matmul_transpose_b(sessions, score_target)?;
    let loss = match targets {
        Some(t) => Some(tape.softmax_cross_entropy(logits, t)?),
        None => None,
    };

    if !tape.value(h_final).is_finite() || !tape.value(logits).is_finite() {
        return Err(Error::Diverged("non-finite forward output".into()));
    }

    Ok((
        ModelForward {
            tape,
            leaves: reg.leaves,
            node_states: h_final,
            session_embeddings: sessions,
            logits: Some(logits),
            loss,
        },
        reg.bn_states,
    ))
}

/// Attention weights of the last attention layer, one (src, dst, weight) per
/// shortcut edge. Exposed for normalization checks and inspection.
pub fn attention_weights(
    store: &ParamStore,
    config: &ModelConfig,
    graph: &BatchedSessionGraph,
    layer_index: usize,
) -> Result<Vec<(usize, usize, f64)>> {
    config.validate()?;
    let mut tape = Tape::new();
    let mut reg = register(&mut tape, store, config)?;
    let pattern: Vec<char> = config.layer_pattern.chars().collect();
    if pattern.get(layer_index) != Some(&'A') {
        return Err(Error::Config(format!(
            "layer {layer_index} is not an attention layer"
        )));
    }
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    // run the stack up to and including the requested layer, then recompute
    // its alpha directly
    let node_items: Vec<usize> = graph.node_item.iter().map(|&i| i as usize).collect();
    let mut h = tape.gather_rows(reg.item_emb, &node_items)?;
    for li in 0..layer_index {
        h = match &reg.layers[li] {
            LayerIds::Gnn(ids) => gnn_layer(&mut tape, graph, h, ids)?,
            LayerIds::Attn(ids) => {
                let bn_index = ids.bn_index;
                let ids_copy = AttnIds {
                    w_query: ids.w_query,
                    w_key: ids.w_key,
                    w_value: ids.w_value,
                    w_edge: ids.w_edge,
                    gamma: ids.gamma,
                    beta: ids.beta,
                    bn_index,
                };
                let state = &mut reg.bn_states[bn_index].2;
                attention_layer(
                    &mut tape, graph, h, &ids_copy, state, config, Mode::Eval, &mut rng,
                )?
            }
        };
    }
    let LayerIds::Attn(ids) = &reg.layers[layer_index] else {
        unreachable!("checked pattern character");
    };
    let state = &mut reg.bn_states[ids.bn_index].2;
    let x = tape.batchnorm(h, ids.gamma, ids.beta, state, false)?;
    let q = tape.matmul(x, ids.w_query)?;
    let k = tape.matmul(x, ids.w_key)?;
    let (mut srcs, mut dsts) = (Vec::new(), Vec::new());
    for e in &graph.shortcut_edges {
        srcs.push(e.src);
        dsts.push(e.dst);
    }
    if srcs.is_empty() {
        return Ok(Vec::new());
    }
    let q_dst = tape.gather_rows(q, &dsts)?;
    let k_src = tape.gather_rows(k, &srcs)?;
    let qk = tape.add(q_dst, k_src)?;
    let sig = tape.sigmoid(qk);
    let e_scores = tape.matmul(sig, ids.w_edge)?;
    let alpha = tape.segment_softmax(e_scores, &dsts)?;
    let av = tape.value(alpha);
    Ok((0..srcs.len())
        .map(|i| (srcs[i], dsts[i], av.get(i, 0)))
        .collect())
}
