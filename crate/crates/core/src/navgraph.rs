//! Per-user navigation graphs.
//!
//! A graph is a first-order Markov model over the reports one user has
//! opened: edge weights are empirical transition probabilities, node masses
//! are shares of the user's dwell time, and nodes whose in-degree reaches the
//! graph mean are flagged as targets (candidate intents).

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Session;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeAttrs {
    pub target: bool,
    pub mass: f64,
    pub alpha: f64,
    pub beta: f64,
    pub dwell_seconds: f64,
}

impl Default for NodeAttrs {
    fn default() -> Self {
        NodeAttrs {
            target: false,
            mass: 0.0,
            alpha: 1.0,
            beta: 1.0,
            dwell_seconds: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub weight: f64,
    pub count: u64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct NavGraph {
    pub user_id: String,
    pub nodes: BTreeMap<String, NodeAttrs>,
    /// Outgoing edges keyed by source, then destination.
    pub edges: BTreeMap<String, BTreeMap<String, Edge>>,
}

impl NavGraph {
    pub fn contains(&self, node: &str) -> bool {
        self.nodes.contains_key(node)
    }

    pub fn node(&self, node: &str) -> Result<&NodeAttrs> {
        self.nodes
            .get(node)
            .ok_or_else(|| Error::lookup("node", node))
    }

    pub fn successors<'a>(&'a self, node: &str) -> impl Iterator<Item = (&'a str, &'a Edge)> + 'a {
        self.edges
            .get(node)
            .into_iter()
            .flat_map(|out| out.iter().map(|(k, e)| (k.as_str(), e)))
    }

    pub fn weight(&self, from: &str, to: &str) -> Option<f64> {
        self.edges.get(from)?.get(to).map(|e| e.weight)
    }

    pub fn edge_count(&self) -> usize {
        self.edges.values().map(BTreeMap::len).sum()
    }

    pub fn targets(&self) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(|(_, a)| a.target)
            .map(|(k, _)| k.as_str())
    }

    pub fn has_target(&self) -> bool {
        self.nodes.values().any(|a| a.target)
    }

    /// Distinct incoming edges per node (nodes without any map to 0).
    pub fn in_degrees(&self) -> BTreeMap<&str, usize> {
        let mut deg: BTreeMap<&str, usize> = self.nodes.keys().map(|k| (k.as_str(), 0)).collect();
        for out in self.edges.values() {
            for to in out.keys() {
                *deg.entry(to.as_str()).or_default() += 1;
            }
        }
        deg
    }
}

/// Builds one user's navigation graph from that user's training sessions.
///
/// Consecutive repeats of a report fold into its dwell time rather than
/// producing a self-loop. A hit's dwell is the gap to the next hit in the
/// same session; the last hit of each session gets the user's median dwell.
pub fn build_graph(user_id: &str, sessions: &[Session]) -> Result<NavGraph> {
    let mut graph = NavGraph {
        user_id: user_id.to_owned(),
        ..NavGraph::default()
    };
    let mut counts: BTreeMap<String, BTreeMap<String, u64>> = BTreeMap::new();
    let mut observed_dwells = Vec::new();
    let mut session_final = Vec::new();

    for session in sessions {
        if session.user_id != user_id {
            return Err(Error::argument(format!(
                "session of user {} passed to graph of {}",
                session.user_id, user_id
            )));
        }
        for (i, hit) in session.hits.iter().enumerate() {
            graph.nodes.entry(hit.report_id.clone()).or_default();
            match session.hits.get(i + 1) {
                Some(next) => {
                    let dwell = next.timestamp.saturating_sub(hit.timestamp) as f64;
                    observed_dwells.push(dwell);
                    graph.nodes.get_mut(&hit.report_id).unwrap().dwell_seconds += dwell;
                    if next.report_id != hit.report_id {
                        *counts
                            .entry(hit.report_id.clone())
                            .or_default()
                            .entry(next.report_id.clone())
                            .or_default() += 1;
                    }
                }
                None => session_final.push(hit.report_id.clone()),
            }
        }
    }

    let imputed = median(&mut observed_dwells).unwrap_or(0.0);
    for report in session_final {
        graph.nodes.get_mut(&report).unwrap().dwell_seconds += imputed;
    }

    let total_dwell: f64 = graph.nodes.values().map(|a| a.dwell_seconds).sum();
    let n = graph.nodes.len() as f64;
    for attrs in graph.nodes.values_mut() {
        attrs.mass = if total_dwell > 0.0 {
            attrs.dwell_seconds / total_dwell
        } else {
            1.0 / n
        };
    }

    for (from, out) in counts {
        let total: u64 = out.values().sum();
        let edges = out
            .into_iter()
            .map(|(to, count)| {
                (
                    to,
                    Edge {
                        weight: count as f64 / total as f64,
                        count,
                    },
                )
            })
            .collect();
        graph.edges.insert(from, edges);
    }
    Ok(graph)
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len().is_multiple_of(2) {
        (values[mid - 1] + values[mid]) / 2.0
    } else {
        values[mid]
    })
}

/// Flags nodes whose in-degree is at least the mean in-degree and returns them.
pub fn detect_targets(graph: &mut NavGraph) -> BTreeSet<String> {
    if graph.nodes.is_empty() {
        return BTreeSet::new();
    }
    let degrees: Vec<(String, usize)> = graph
        .in_degrees()
        .into_iter()
        .map(|(k, d)| (k.to_owned(), d))
        .collect();
    let n = degrees.len();
    let sum: usize = degrees.iter().map(|(_, d)| d).sum();
    let mut targets = BTreeSet::new();
    for (node, deg) in degrees {
        // deg >= sum / n, kept in integers
        let is_target = deg * n >= sum;
        graph.nodes.get_mut(&node).unwrap().target = is_target;
        if is_target {
            targets.insert(node);
        }
    }
    targets
}

/// Maximal path probabilities from one node to every reachable target.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentDistances {
    pub source: String,
    pub per_target: BTreeMap<String, f64>,
}

#[derive(Debug, PartialEq)]
struct Frontier<'a> {
    length: f64,
    node: &'a str,
}

impl Eq for Frontier<'_> {}

impl Ord for Frontier<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on length
        other
            .length
            .total_cmp(&self.length)
            .then_with(|| other.node.cmp(self.node))
    }
}

impl PartialOrd for Frontier<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

/// Single-source shortest path lengths under edge length `-ln(W)`.
pub fn neg_log_lengths<'a>(graph: &'a NavGraph, source: &str) -> Result<BTreeMap<&'a str, f64>> {
    let (source, _) = graph
        .nodes
        .get_key_value(source)
        .ok_or_else(|| Error::lookup("node", source))?;
    let mut settled: BTreeMap<&str, f64> = BTreeMap::new();
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    let mut heap = BinaryHeap::new();
    best.insert(source.as_str(), 0.0);
    heap.push(Frontier {
        length: 0.0,
        node: source.as_str(),
    });
    while let Some(Frontier { length, node }) = heap.pop() {
        if settled.contains_key(node) {
            continue;
        }
        settled.insert(node, length);
        for (next, edge) in graph.successors(node) {
            if settled.contains_key(next) {
                continue;
            }
            let candidate = length - edge.weight.ln();
            if best.get(next).is_none_or(|&b| candidate < b) {
                best.insert(next, candidate);
                heap.push(Frontier {
                    length: candidate,
                    node: next,
                });
            }
        }
    }
    Ok(settled)
}

/// Most probable path from `source` to each reachable target, found with
/// Dijkstra over negative log weights. A target source maps to itself with
/// probability 1.
pub fn intent_distances(graph: &NavGraph, source: &str) -> Result<IntentDistances> {
    let lengths = neg_log_lengths(graph, source)?;
    let per_target = lengths
        .into_iter()
        .filter(|(node, _)| graph.nodes[*node].target)
        .map(|(node, len)| (node.to_owned(), (-len).exp()))
        .collect();
    Ok(IntentDistances {
        source: source.to_owned(),
        per_target,
    })
}

/// `intent_distances` from every node of the graph.
pub fn all_intent_distances(graph: &NavGraph) -> BTreeMap<String, IntentDistances> {
    graph
        .nodes
        .keys()
        .map(|node| {
            let d = intent_distances(graph, node).expect("node exists");
            (node.clone(), d)
        })
        .collect()
}

// On-disk form: {user_id, nodes:[{id,target,mass,alpha,beta}], edges:[{from,to,w,count}]}

#[derive(Serialize, Deserialize)]
struct GraphDoc {
    user_id: String,
    nodes: Vec<NodeDoc>,
    edges: Vec<EdgeDoc>,
}

#[derive(Serialize, Deserialize)]
struct NodeDoc {
    id: String,
    target: u8,
    mass: f64,
    alpha: f64,
    beta: f64,
}

#[derive(Serialize, Deserialize)]
struct EdgeDoc {
    from: String,
    to: String,
    w: f64,
    count: u64,
}

impl Serialize for NavGraph {
    fn serialize<S: serde::Serializer>(
        &self,
        serializer: S,
    ) -> std::result::Result<S::Ok, S::Error> {
        let doc = GraphDoc {
            user_id: self.user_id.clone(),
            nodes: self
                .nodes
                .iter()
                .map(|(id, a)| NodeDoc {
                    id: id.clone(),
                    target: a.target as u8,
                    mass: a.mass,
                    alpha: a.alpha,
                    beta: a.beta,
                })
                .collect(),
            edges: self
                .edges
                .iter()
                .flat_map(|(from, out)| {
                    out.iter().map(move |(to, e)| EdgeDoc {
                        from: from.clone(),
                        to: to.clone(),
                        w: e.weight,
                        count: e.count,
                    })
                })
                .collect(),
        };
        doc.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for NavGraph {
    fn deserialize<D: serde::Deserializer<'de>>(
        deserializer: D,
    ) -> std::result::Result<Self, D::Error> {
        let doc = GraphDoc::deserialize(deserializer)?;
        let mut graph = NavGraph {
            user_id: doc.user_id,
            ..NavGraph::default()
        };
        for n in doc.nodes {
            graph.nodes.insert(
                n.id,
                NodeAttrs {
                    target: n.target != 0,
                    mass: n.mass,
                    alpha: n.alpha,
                    beta: n.beta,
                    dwell_seconds: 0.0,
                },
            );
        }
        for e in doc.edges {
            if !graph.nodes.contains_key(&e.from) || !graph.nodes.contains_key(&e.to) {
                return Err(serde::de::Error::custom(format!(
                    "edge {} -> {} references an unknown node",
                    e.from, e.to
                )));
            }
            graph.edges.entry(e.from).or_default().insert(
                e.to,
                Edge {
                    weight: e.w,
                    count: e.count,
                },
            );
        }
        Ok(graph)
    }
}
