//! Batched session graphs: the immediate-successor multigraph consumed by
//! GNN layers and the appears-anywhere-after shortcut multigraph consumed by
//! attention layers, plus per-session position maps for the readout.

use std::collections::{BTreeSet, HashMap};
use std::fmt::Write as _;

use crate::dataio::TrainingSequence;
use crate::error::{Error, Result};

/// Node-sharing policy when batching sessions.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GraphMode {
    /// Each session gets its own nodes; no state leaks across sessions.
    Disjoint,
    /// Sessions in the batch share nodes per item.
    Merged,
}

/// Directed edge of the successor multigraph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SuccessorEdge {
    pub src: usize,
    pub dst: usize,
    pub session: usize,
    pub position: usize,
}

/// Directed edge of the shortcut graph, deduplicated per (session, src, dst).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShortcutEdge {
    pub src: usize,
    pub dst: usize,
    pub session: usize,
}

#[derive(Debug, Clone)]
pub struct BatchedSessionGraph {
    pub node_count: usize,
    /// node -> dense item index
    pub node_item: Vec<u32>,
    pub successor_edges: Vec<SuccessorEdge>,
    pub shortcut_edges: Vec<ShortcutEdge>,
    /// session -> node per item occurrence, in session order
    pub session_nodes: Vec<Vec<usize>>,
    /// session -> node of the final input item
    pub session_last: Vec<usize>,
    pub mode: GraphMode,
}

impl BatchedSessionGraph {
    /// Incoming successor edges of `node`, sorted by (session, position):
    /// the deterministic feed order for the GRU aggregator.
    pub fn edge_order(&self, node: usize) -> Vec<SuccessorEdge> {
        let mut edges: Vec<SuccessorEdge> = self
            .successor_edges
            .iter()
            .filter(|e| e.dst == node)
            .copied()
            .collect();
        edges.sort_by_key(|e| (e.session, e.position));
        edges
    }

    /// DOT-format dump for inspection.
    pub fn to_dot(&self) -> String {
        let mut out = String::from("digraph session_batch {\n");
        for (n, item) in self.node_item.iter().enumerate() {
            let _ = writeln!(out, "  n{n} [label=\"item {item}\"];");
        }
        for e in &self.successor_edges {
            let _ = writeln!(
                out,
                "  n{} -> n{} [label=\"s{} p{}\"];",
                e.src, e.dst, e.session, e.position
            );
        }
        for e in &self.shortcut_edges {
            let _ = writeln!(
                out,
                "  n{} -> n{} [style=dashed, label=\"s{}\"];",
                e.src, e.dst, e.session
            );
        }
        out.push_str("}\n");
        out
    }
}

/// Build the successor view and populate shortcut edges for a batch of
/// sequences. Repeated items within a session map to one node; self-loops
/// never appear in either view.
pub fn build_graph(batch: &[&[u32]], mode: GraphMode) -> Result<BatchedSessionGraph> {
    if batch.is_empty() {
        return Err(Error::Input("empty batch".into()));
    }
    let mut node_item: Vec<u32> = Vec::new();
    // merged: item -> node; disjoint: (session, item) -> node
    let mut merged_nodes: HashMap<u32, usize> = HashMap::new();
    let mut session_nodes: Vec<Vec<usize>> = Vec::with_capacity(batch.len());
    let mut session_last: Vec<usize> = Vec::with_capacity(batch.len());
    let mut successor_edges: Vec<SuccessorEdge> = Vec::new();

    for (sid, seq) in batch.iter().enumerate() {
        if seq.is_empty() {
            return Err(Error::Input(format!("empty sequence at batch index {sid}")));
        }
        let mut local: HashMap<u32, usize> = HashMap::new();
        let mut nodes = Vec::with_capacity(seq.len());
        for &item in *seq {
            let map = match mode {
                GraphMode::Disjoint => &mut local,
                GraphMode::Merged => &mut merged_nodes,
            };
            let node = *map.entry(item).or_insert_with(|| {
                node_item.push(item);
                node_item.len() - 1
            });
            nodes.push(node);
        }
        for (pos, pair) in nodes.windows(2).enumerate() {
            if pair[0] != pair[1] {
                successor_edges.push(SuccessorEdge {
                    src: pair[0],
                    dst: pair[1],
                    session: sid,
                    position: pos,
                });
            }
        }
        session_last.push(*nodes.last().expect("non-empty sequence"));
        session_nodes.push(nodes);
    }
    let mut graph = BatchedSessionGraph {
        node_count: node_item.len(),
        node_item,
        successor_edges,
        shortcut_edges: Vec::new(),
        session_nodes,
        session_last,
        mode,
    };
    build_shortcut(&mut graph);
    Ok(graph)
}

/// Emit edge (u_i, u_j) for every i < j with u_i != u_j in each session's
/// node occurrence order, deduplicated per session and node pair.
pub fn build_shortcut(graph: &mut BatchedSessionGraph) {
    let mut edges = Vec::new();
    for (sid, nodes) in graph.session_nodes.iter().enumerate() {
        let mut seen: BTreeSet<(usize, usize)> = BTreeSet::new();
        for i in 0..nodes.len() {
            for j in i + 1..nodes.len() {
                let (u, v) = (nodes[i], nodes[j]);
                if u != v && seen.insert((u, v)) {
                    edges.push(ShortcutEdge {
                        src: u,
                        dst: v,
                        session: sid,
                    });
                }
            }
        }
    }
    graph.shortcut_edges = edges;
}

/// Convenience wrapper over training sequences' input sides.
pub fn build_graph_for_pairs(
    batch: &[TrainingSequence],
    mode: GraphMode,
) -> Result<BatchedSessionGraph> {
    let views: Vec<&[u32]> = batch.iter().map(|p| p.inputs.as_slice()).collect();
    build_graph(&views, mode)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn item_edge_set(g: &BatchedSessionGraph, edges: &[(usize, usize)]) -> HashSet<(u32, u32)> {
        edges
            .iter()
            .map(|&(s, d)| (g.node_item[s], g.node_item[d]))
            .collect()
    }

    fn successor_items(g: &BatchedSessionGraph) -> HashSet<(u32, u32)> {
        let pairs: Vec<(usize, usize)> =
            g.successor_edges.iter().map(|e| (e.src, e.dst)).collect();
        item_edge_set(g, &pairs)
    }

    #[test]
    fn merged_mode_reproduces_shared_graph() {
        // [a,b,c] and [c,b,d] merge to nodes {a,b,c,d} with edges
        // a->b, b->c, c->b, b->d
        let (a, b, c, d) = (0u32, 1, 2, 3);
        let g = build_graph(&[&[a, b, c], &[c, b, d]], GraphMode::Merged).unwrap();
        assert_eq!(g.node_count, 4);
        let expect: HashSet<(u32, u32)> =
            [(a, b), (b, c), (c, b), (b, d)].into_iter().collect();
        assert_eq!(successor_items(&g), expect);
    }

    #[test]
    fn repeat_item_shares_node_without_self_loop() {
        let (a, b) = (7u32, 9);
        let g = build_graph(&[&[a, b, a]], GraphMode::Disjoint).unwrap();
        assert_eq!(g.node_count, 2);
        let expect: HashSet<(u32, u32)> = [(a, b), (b, a)].into_iter().collect();
        assert_eq!(successor_items(&g), expect);
        assert!(g.successor_edges.iter().all(|e| e.src != e.dst));
    }

    #[test]
    fn single_item_session() {
        let g = build_graph(&[&[5u32]], GraphMode::Disjoint).unwrap();
        assert_eq!(g.node_count, 1);
        assert!(g.successor_edges.is_empty());
        assert!(g.shortcut_edges.is_empty());
    }

    #[test]
    fn empty_sequence_rejected() {
        let empty: &[u32] = &[];
        assert!(build_graph(&[empty], GraphMode::Disjoint).is_err());
        assert!(build_graph(&[], GraphMode::Disjoint).is_err());
    }

    #[test]
    fn shortcut_of_three_items() {
        let (a, b, c) = (0u32, 1, 2);
        let g = build_graph(&[&[a, b, c]], GraphMode::Disjoint).unwrap();
        let pairs: Vec<(usize, usize)> = g.shortcut_edges.iter().map(|e| (e.src, e.dst)).collect();
        let expect: HashSet<(u32, u32)> =
            [(a, b), (a, c), (b, c)].into_iter().collect();
        assert_eq!(item_edge_set(&g, &pairs), expect);
    }

    #[test]
    fn shortcut_excludes_self_pairs() {
        let (a, b) = (0u32, 1);
        let g = build_graph(&[&[a, b, a]], GraphMode::Disjoint).unwrap();
        let pairs: Vec<(usize, usize)> = g.shortcut_edges.iter().map(|e| (e.src, e.dst)).collect();
        let expect: HashSet<(u32, u32)> = [(a, b), (b, a)].into_iter().collect();
        assert_eq!(item_edge_set(&g, &pairs), expect);
    }

    #[test]
    fn shortcut_length_two_equals_successor() {
        let g = build_graph(&[&[3u32, 4]], GraphMode::Disjoint).unwrap();
        assert_eq!(g.shortcut_edges.len(), 1);
        assert_eq!(g.successor_edges.len(), 1);
        assert_eq!(g.shortcut_edges[0].src, g.successor_edges[0].src);
        assert_eq!(g.shortcut_edges[0].dst, g.successor_edges[0].dst);
    }

    #[test]
    fn edge_order_on_merged_fixture() {
        let (a, b, c, d) = (0u32, 1, 2, 3);
        let g = build_graph(&[&[a, b, c], &[c, b, d]], GraphMode::Merged).unwrap();
        let node_b = g.session_nodes[0][1];
        let incoming = g.edge_order(node_b);
        assert_eq!(incoming.len(), 2);
        assert_eq!((incoming[0].session, incoming[0].position), (0, 0));
        assert_eq!(g.node_item[incoming[0].src], a);
        assert_eq!((incoming[1].session, incoming[1].position), (1, 0));
        assert_eq!(g.node_item[incoming[1].src], c);
    }

    #[test]
    fn edge_order_empty_and_within_session() {
        let (a, b, c) = (0u32, 1, 2);
        let g = build_graph(&[&[a, b, a, c, a]], GraphMode::Disjoint).unwrap();
        let node_a = g.session_nodes[0][0];
        // no incoming for a fresh node with no in-edges
        let g2 = build_graph(&[&[a, b]], GraphMode::Disjoint).unwrap();
        assert!(g2.edge_order(g2.session_nodes[0][0]).is_empty());
        // two in-edges from the same session arrive position-ordered
        let incoming = g.edge_order(node_a);
        assert_eq!(incoming.len(), 2);
        assert!(incoming[0].position < incoming[1].position);
    }

    #[test]
    fn successor_edges_reconstruct_sequence() {
        let seq = [2u32, 5, 2, 7];
        let g = build_graph(&[&seq], GraphMode::Disjoint).unwrap();
        let mut edges = g.successor_edges.clone();
        edges.sort_by_key(|e| e.position);
        let mut rebuilt = vec![g.node_item[edges[0].src]];
        rebuilt.extend(edges.iter().map(|e| g.node_item[e.dst]));
        assert_eq!(rebuilt, seq);
    }

    #[test]
    fn dot_dump_mentions_every_node() {
        let g = build_graph(&[&[1u32, 2]], GraphMode::Disjoint).unwrap();
        let dot = g.to_dot();
        assert!(dot.contains("n0") && dot.contains("n1") && dot.contains("digraph"));
    }

    // brute-force enumerators used as oracles
    fn brute_successor(batch: &[Vec<u32>]) -> HashSet<(usize, u32, u32)> {
        let mut out = HashSet::new();
        for (sid, seq) in batch.iter().enumerate() {
            for w in seq.windows(2) {
                if w[0] != w[1] {
                    out.insert((sid, w[0], w[1]));
                }
            }
        }
        out
    }

    fn brute_shortcut(batch: &[Vec<u32>]) -> HashSet<(usize, u32, u32)> {
        let mut out = HashSet::new();
        for (sid, seq) in batch.iter().enumerate() {
            for i in 0..seq.len() {
                for j in i + 1..seq.len() {
                    if seq[i] != seq[j] {
                        out.insert((sid, seq[i], seq[j]));
                    }
                }
            }
        }
        out
    }

    proptest! {
        #[test]
        fn matches_brute_force_enumeration(
            batch in prop::collection::vec(prop::collection::vec(0u32..10, 1..6), 1..8)
        ) {
            let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
            for mode in [GraphMode::Disjoint, GraphMode::Merged] {
                let g = build_graph(&views, mode).unwrap();
                let got_succ: HashSet<(usize, u32, u32)> = g
                    .successor_edges
                    .iter()
                    .map(|e| (e.session, g.node_item[e.src], g.node_item[e.dst]))
                    .collect();
                prop_assert_eq!(&got_succ, &brute_successor(&batch));
                let got_short: HashSet<(usize, u32, u32)> = g
                    .shortcut_edges
                    .iter()
                    .map(|e| (e.session, g.node_item[e.src], g.node_item[e.dst]))
                    .collect();
                prop_assert_eq!(&got_short, &brute_shortcut(&batch));
                prop_assert!(g.successor_edges.iter().all(|e| e.src != e.dst));
                prop_assert!(g.shortcut_edges.iter().all(|e| e.src != e.dst));
            }
        }

        #[test]
        fn disjoint_mode_isolates_sessions(
            batch in prop::collection::vec(prop::collection::vec(0u32..6, 1..6), 2..6)
        ) {
            let views: Vec<&[u32]> = batch.iter().map(|s| s.as_slice()).collect();
            let g = build_graph(&views, GraphMode::Disjoint).unwrap();
            let mut owner = vec![usize::MAX; g.node_count];
            for (sid, nodes) in g.session_nodes.iter().enumerate() {
                for &n in nodes {
                    prop_assert!(owner[n] == usize::MAX || owner[n] == sid);
                    owner[n] = sid;
                }
            }
            for e in &g.successor_edges {
                prop_assert_eq!(owner[e.src], owner[e.dst]);
            }
            for e in &g.shortcut_edges {
                prop_assert_eq!(owner[e.src], owner[e.dst]);
            }
        }
    }
}
