//! Candidate scoring, ranking, group-sourced candidates and feedback.
//!
//! Every candidate gets `K = α·W·R + β·M`: `W` is the (path) transition
//! probability from the current report, `R` the relevance derived from the
//! current intent scores, `M` the node mass, and `α`, `β` the node's feedback
//! multipliers. The multipliers actually applied are stored with each
//! recommendation so `K` can be recomputed from its parts.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::context::UserClustering;
use crate::error::{Error, Result};
use crate::navgraph::{IntentDistances, NavGraph};

pub const DEFAULT_TOP_K: usize = 10;
pub const DEFAULT_FEEDBACK_RATE: f64 = 0.1;
/// Lower bound for α and β after feedback.
pub const FEEDBACK_FLOOR: f64 = 0.01;

/// How intent scores are folded into a single relevance value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelevanceVariant {
    SumI,
    MaxI,
    MaxIxD,
    DotIxD,
}

impl RelevanceVariant {
    pub const ALL: [RelevanceVariant; 4] = [Self::MaxIxD, Self::DotIxD, Self::MaxI, Self::SumI];

    pub fn name(self) -> &'static str {
        match self {
            Self::SumI => "sum-i",
            Self::MaxI => "max-i",
            Self::MaxIxD => "max-ixd",
            Self::DotIxD => "dot-ixd",
        }
    }
}

impl fmt::Display for RelevanceVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for RelevanceVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::argument(format!("unknown relevance variant {s:?}")))
    }
}

/// Relevance of one candidate.
///
/// `SumI`/`MaxI` use every score given; the `IxD` variants pair each score
/// with the candidate's path probability to that intent, skipping targets
/// that have no score.
pub fn relevance(
    variant: RelevanceVariant,
    intent_scores: &BTreeMap<String, f64>,
    distances: &BTreeMap<String, f64>,
) -> f64 {
    if intent_scores.is_empty() {
        log::warn!("no intent scores; relevance is 0");
        return 0.0;
    }
    let weighted = || {
        distances
            .iter()
            .filter_map(|(t, d)| intent_scores.get(t).map(|s| s * d))
    };
    match variant {
        RelevanceVariant::SumI => intent_scores.values().sum(),
        RelevanceVariant::MaxI => intent_scores
            .values()
            .copied()
            .fold(f64::NEG_INFINITY, f64::max),
        RelevanceVariant::MaxIxD => weighted().fold(0.0, f64::max),
        RelevanceVariant::DotIxD => weighted().sum(),
    }
}

/// Which terms of the score are active.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scoring {
    /// `α·W·R + β·M` with the given relevance.
    Full(RelevanceVariant),
    /// `W` alone.
    Frequency,
    /// `M` alone.
    Mass,
    /// Sum-I relevance alone (`W ≡ 1`, `β = 0`).
    Context,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub node: String,
    #[serde(rename = "K")]
    pub score: f64,
    #[serde(rename = "R")]
    pub relevance: f64,
    #[serde(rename = "W")]
    pub weight: f64,
    #[serde(rename = "M")]
    pub mass: f64,
    pub alpha: f64,
    pub beta: f64,
    pub collaborative: bool,
    pub source_user: String,
    pub step: u8,
    /// Intermediate node of a 2-step candidate.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub via: Option<String>,
}

impl Recommendation {
    /// `α·W·R + β·M` from the stored parts.
    pub fn recomputed_score(&self) -> f64 {
        self.alpha * self.weight * self.relevance + self.beta * self.mass
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Candidate<'a> {
    node: &'a str,
    weight: f64,
    step: u8,
    via: Option<&'a str>,
}

/// 1-step successors of `current` and 2-step nodes behind them. A 2-step
/// node keeps its most probable intermediate; nodes that are also 1-step
/// (or `current` itself) are dropped.
fn candidates<'a>(graph: &'a NavGraph, current: &str) -> Vec<Candidate<'a>> {
    let first: BTreeMap<&str, f64> = graph
        .successors(current)
        .map(|(v, e)| (v, e.weight))
        .collect();
    let mut second: BTreeMap<&str, (f64, &str)> = BTreeMap::new();
    for (&v, &w_uv) in &first {
        for (w, e) in graph.successors(v) {
            if w == current || first.contains_key(w) {
                continue;
            }
            let p = w_uv * e.weight;
            let better = second.get(w).is_none_or(|&(best, _)| p > best);
            if better {
                second.insert(w, (p, v));
            }
        }
    }
    let mut out: Vec<Candidate> = first
        .into_iter()
        .map(|(node, weight)| Candidate {
            node,
            weight,
            step: 1,
            via: None,
        })
        .collect();
    out.extend(second.into_iter().map(|(node, (weight, via))| Candidate {
        node,
        weight,
        step: 2,
        via: Some(via),
    }));
    out
}

/// Scores every 1- and 2-step candidate of `current` in `graph`.
///
/// `distances` holds the intent distances of the graph's nodes (as built by
/// [`crate::navgraph::all_intent_distances`]). `SumI` and `MaxI` only count
/// intents the candidate can still reach; a candidate that reaches none has
/// relevance 0.
pub fn score_candidates(
    graph: &NavGraph,
    distances: &BTreeMap<String, IntentDistances>,
    current: &str,
    intent_scores: &BTreeMap<String, f64>,
    scoring: Scoring,
) -> Result<Vec<Recommendation>> {
    if !graph.contains(current) {
        return Err(Error::lookup("node", current));
    }
    let empty = BTreeMap::new();
    let mut out = Vec::new();
    for c in candidates(graph, current) {
        let attrs = &graph.nodes[c.node];
        let reach = distances.get(c.node).map_or(&empty, |d| &d.per_target);
        let reachable_relevance = |variant| {
            let scores: BTreeMap<String, f64> = match variant {
                RelevanceVariant::SumI | RelevanceVariant::MaxI => intent_scores
                    .iter()
                    .filter(|(t, _)| reach.contains_key(*t))
                    .map(|(t, s)| (t.clone(), *s))
                    .collect(),
                _ => intent_scores.clone(),
            };
            if scores.is_empty() {
                0.0
            } else {
                relevance(variant, &scores, reach)
            }
        };
        let (alpha, weight, rel, beta) = match scoring {
            Scoring::Full(v) => (attrs.alpha, c.weight, reachable_relevance(v), attrs.beta),
            Scoring::Frequency => (1.0, c.weight, 1.0, 0.0),
            Scoring::Mass => (0.0, c.weight, 0.0, 1.0),
            Scoring::Context => (1.0, 1.0, reachable_relevance(RelevanceVariant::SumI), 0.0),
        };
        out.push(Recommendation {
            node: c.node.to_owned(),
            score: alpha * weight * rel + beta * attrs.mass,
            relevance: rel,
            weight,
            mass: attrs.mass,
            alpha,
            beta,
            collaborative: false,
            source_user: graph.user_id.clone(),
            step: c.step,
            via: c.via.map(str::to_owned),
        });
    }
    Ok(out)
}

/// Preference order: K, own graph before collaborative, R, W, M (all
/// descending); then 1-step first and node id for determinism.
pub fn preference(a: &Recommendation, b: &Recommendation) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.collaborative.cmp(&b.collaborative))
        .then(b.relevance.total_cmp(&a.relevance))
        .then(b.weight.total_cmp(&a.weight))
        .then(b.mass.total_cmp(&a.mass))
        .then(a.step.cmp(&b.step))
        .then_with(|| a.node.cmp(&b.node))
        .then_with(|| a.source_user.cmp(&b.source_user))
}

/// Sorts by [`preference`] and keeps the first `k`. A node offered more
/// than once keeps only its best entry.
pub fn rank(mut recs: Vec<Recommendation>, k: usize) -> Vec<Recommendation> {
    assert!(k >= 1, "k must be at least 1");
    recs.sort_by(preference);
    let mut seen = std::collections::BTreeSet::new();
    recs.retain(|r| seen.insert(r.node.clone()));
    recs.truncate(k);
    recs
}

/// A graph together with the intent distances of all its nodes.
#[derive(Debug, Clone)]
pub struct IndexedGraph {
    pub graph: NavGraph,
    pub distances: BTreeMap<String, IntentDistances>,
}

impl IndexedGraph {
    pub fn new(graph: NavGraph) -> Self {
        let distances = crate::navgraph::all_intent_distances(&graph);
        IndexedGraph { graph, distances }
    }

    pub fn score(
        &self,
        current: &str,
        intent_scores: &BTreeMap<String, f64>,
        scoring: Scoring,
    ) -> Result<Vec<Recommendation>> {
        score_candidates(
            &self.graph,
            &self.distances,
            current,
            intent_scores,
            scoring,
        )
    }
}

/// Candidates taken from the graphs of users in the same or a more
/// experienced cluster who have visited `current` and have a target.
/// Only nodes the original user has never visited are kept.
pub fn group_recommend(
    user: &str,
    clustering: &UserClustering,
    graphs: &BTreeMap<String, IndexedGraph>,
    current: &str,
    intent_scores: &BTreeMap<String, f64>,
    scoring: Scoring,
) -> Result<Vec<Recommendation>> {
    let own_cluster = clustering
        .cluster_of(user)
        .ok_or_else(|| Error::lookup("clustered user", user))?;
    let own = graphs.get(user).map(|g| &g.graph);
    let mut out = Vec::new();
    for (other, indexed) in graphs {
        if other == user {
            continue;
        }
        if clustering.cluster_of(other).is_none_or(|c| c < own_cluster) {
            continue;
        }
        let g = &indexed.graph;
        if !g.contains(current) || !g.has_target() {
            continue;
        }
        for mut rec in indexed.score(current, intent_scores, scoring)? {
            if own.is_some_and(|o| o.contains(&rec.node)) {
                continue;
            }
            rec.collaborative = true;
            out.push(rec);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Feedback {
    /// The user clicked a recommendation.
    ExplicitPos(String),
    /// The user dismissed a recommendation.
    ExplicitNeg(String),
    /// The user reached a shown node without clicking it.
    ImplicitPos(String),
    /// The user ignored the whole list.
    ImplicitNeg,
}

fn scale(graph: &mut NavGraph, node: &str, factor: f64) {
    if let Some(a) = graph.nodes.get_mut(node) {
        a.alpha = (a.alpha * factor).max(FEEDBACK_FLOOR);
        a.beta = (a.beta * factor).max(FEEDBACK_FLOOR);
    }
}

/// Multiplicative α/β update. 2-step nodes get half the change.
pub fn apply_feedback(
    graph: &mut NavGraph,
    shown: &[Recommendation],
    event: &Feedback,
    eta: f64,
) -> Result<()> {
    if !(0.0..1.0).contains(&eta) {
        return Err(Error::argument(format!(
            "feedback rate {eta} outside [0, 1)"
        )));
    }
    let damped = |delta: f64, rec: Option<&Recommendation>| {
        if rec.is_some_and(|r| r.step == 2) {
            1.0 + delta / 2.0
        } else {
            1.0 + delta
        }
    };
    let find = |v: &str| shown.iter().find(|r| r.node == v);
    match event {
        Feedback::ExplicitPos(v) | Feedback::ExplicitNeg(v) => {
            let rec = find(v).ok_or_else(|| Error::argument(format!("{v} was not shown")))?;
            let delta = if matches!(event, Feedback::ExplicitPos(_)) {
                eta
            } else {
                -eta
            };
            scale(graph, v, damped(delta, Some(rec)));
        }
        Feedback::ImplicitPos(v) => {
            let rec = find(v);
            scale(graph, v, damped(eta / 2.0, rec));
        }
        Feedback::ImplicitNeg => {
            for rec in shown {
                scale(graph, &rec.node, damped(-eta / 4.0, Some(rec)));
            }
        }
    }
    Ok(())
}

/// One line of recommendation output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationRequest {
    pub user: String,
    pub current: String,
    pub k: usize,
    pub recs: Vec<Recommendation>,
    pub variant: String,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::navgraph::{Edge, NodeAttrs};

    fn scores(pairs: &[(&str, f64)]) -> BTreeMap<String, f64> {
        pairs.iter().map(|(k, v)| (k.to_string(), *v)).collect()
    }

    fn graph(user: &str, edges: &[(&str, &str, f64)], targets: &[&str]) -> NavGraph {
        let mut g = NavGraph {
            user_id: user.into(),
            ..Default::default()
        };
        for (a, b, w) in edges {
            for n in [a, b] {
                g.nodes.entry(n.to_string()).or_default();
            }
            g.edges.entry(a.to_string()).or_default().insert(
                b.to_string(),
                Edge {
                    weight: *w,
                    count: 1,
                },
            );
        }
        for t in targets {
            g.nodes.get_mut(*t).unwrap().target = true;
        }
        g
    }

    #[test]
    fn relevance_variants() {
        let s = scores(&[("I", 0.2), ("J", 0.3)]);
        let d = scores(&[("I", 0.5), ("J", 0.4)]);
        assert!((relevance(RelevanceVariant::SumI, &s, &d) - 0.5).abs() < 1e-15);
        assert_eq!(relevance(RelevanceVariant::MaxI, &s, &d), 0.3);
        assert!((relevance(RelevanceVariant::MaxIxD, &s, &d) - 0.12).abs() < 1e-15);
        assert!((relevance(RelevanceVariant::DotIxD, &s, &d) - 0.22).abs() < 1e-15);
        assert_eq!(relevance(RelevanceVariant::SumI, &BTreeMap::new(), &d), 0.0);
    }

    #[test]
    fn variant_names_round_trip() {
        for v in RelevanceVariant::ALL {
            assert_eq!(v.name().parse::<RelevanceVariant>().unwrap(), v);
        }
        assert!("best".parse::<RelevanceVariant>().is_err());
    }

    #[test]
    fn hand_score() {
        let mut g = graph("u", &[("A", "B", 0.5), ("A", "C", 0.5)], &["B"]);
        g.nodes.get_mut("B").unwrap().mass = 0.1;
        let ix = IndexedGraph::new(g);
        let s = scores(&[("B", 0.8)]);
        let recs = ix
            .score("A", &s, Scoring::Full(RelevanceVariant::SumI))
            .unwrap();
        let b = recs.iter().find(|r| r.node == "B").unwrap();
        assert!((b.score - 0.5).abs() < 1e-15);
        // C reaches no intent
        let c = recs.iter().find(|r| r.node == "C").unwrap();
        assert_eq!(c.relevance, 0.0);
    }

    #[test]
    fn two_step_weight_is_best_product() {
        let g = graph(
            "u",
            &[
                ("U", "V", 0.5),
                ("U", "X", 0.5),
                ("V", "W", 0.4),
                ("X", "W", 0.2),
                ("V", "U", 0.6),
            ],
            &["W"],
        );
        let ix = IndexedGraph::new(g);
        let recs = ix
            .score("U", &scores(&[("W", 1.0)]), Scoring::Frequency)
            .unwrap();
        let w = recs.iter().find(|r| r.node == "W").unwrap();
        assert_eq!(w.step, 2);
        assert!((w.weight - 0.2).abs() < 1e-15);
        assert_eq!(w.via.as_deref(), Some("V"));
        assert!(recs.iter().all(|r| r.node != "U"));
    }

    #[test]
    fn missing_current_node() {
        let ix = IndexedGraph::new(graph("u", &[("A", "B", 1.0)], &["B"]));
        assert!(ix.score("Z", &BTreeMap::new(), Scoring::Frequency).is_err());
        assert!(ix
            .score("B", &BTreeMap::new(), Scoring::Frequency)
            .unwrap()
            .is_empty());
    }

    fn rec(node: &str, k: f64, r: f64, collaborative: bool) -> Recommendation {
        Recommendation {
            node: node.into(),
            score: k,
            relevance: r,
            weight: 0.0,
            mass: 0.0,
            alpha: 1.0,
            beta: 1.0,
            collaborative,
            source_user: "u".into(),
            step: 1,
            via: None,
        }
    }

    #[test]
    fn preference_order() {
        let ranked = rank(
            vec![rec("a", 0.4, 0.0, false), rec("b", 0.5, 0.0, false)],
            10,
        );
        assert_eq!(ranked[0].node, "b");
        let ranked = rank(
            vec![rec("a", 0.5, 0.0, true), rec("b", 0.5, 0.0, false)],
            10,
        );
        assert_eq!(ranked[0].node, "b");
        let ranked = rank(
            vec![rec("a", 0.5, 0.6, false), rec("b", 0.5, 0.8, false)],
            1,
        );
        assert_eq!(ranked.len(), 1);
        assert_eq!(ranked[0].node, "b");
    }

    #[test]
    fn group_sourcing() {
        let novice = graph("n", &[], &[]);
        let mut novice = novice;
        novice.nodes.insert("A".into(), NodeAttrs::default());
        let expert = graph("e", &[("A", "B", 1.0)], &["B"]);
        let nomad = graph("x", &[("C", "D", 1.0)], &["D"]);
        let both = graph("y", &[("A", "A2", 1.0)], &["A2"]);
        let mut graphs = BTreeMap::new();
        for g in [novice, expert, nomad, both] {
            graphs.insert(g.user_id.clone(), IndexedGraph::new(g));
        }
        let clustering = UserClustering {
            assignments: [("n", 0), ("e", 3), ("x", 3), ("y", 0)]
                .into_iter()
                .map(|(u, c)| (u.to_string(), c))
                .collect(),
            centroids: vec![[0.0; 3]; 4],
            sizes: vec![2, 0, 0, 2],
            insufficient: false,
            wcss_trace: vec![],
        };
        let s = scores(&[("B", 0.9)]);
        let recs = group_recommend(
            "n",
            &clustering,
            &graphs,
            "A",
            &s,
            Scoring::Full(RelevanceVariant::SumI),
        )
        .unwrap();
        let nodes: Vec<&str> = recs.iter().map(|r| r.node.as_str()).collect();
        assert_eq!(nodes, vec!["B", "A2"]);
        assert!(recs.iter().all(|r| r.collaborative));
        let b = &recs[0];
        assert_eq!(b.source_user, "e");
        assert_eq!(b.weight, 1.0);
        assert!((b.relevance - 0.9).abs() < 1e-15);

        // the expert's candidate is dropped once the novice knows it
        graphs
            .get_mut("n")
            .unwrap()
            .graph
            .nodes
            .insert("B".into(), NodeAttrs::default());
        let recs = group_recommend(
            "n",
            &clustering,
            &graphs,
            "A",
            &s,
            Scoring::Full(RelevanceVariant::SumI),
        )
        .unwrap();
        assert!(recs.iter().all(|r| r.node != "B"));
    }

    #[test]
    fn feedback_updates() {
        let base = graph("u", &[("A", "B", 0.5), ("A", "C", 0.5)], &["B"]);
        let shown = vec![rec("B", 0.5, 0.5, false), rec("C", 0.4, 0.5, false)];
        let mut g = base.clone();
        apply_feedback(&mut g, &shown, &Feedback::ExplicitPos("B".into()), 0.1).unwrap();
        assert!((g.nodes["B"].alpha - 1.1).abs() < 1e-15);
        assert_eq!(g.nodes["C"], base.nodes["C"]);

        let mut g = base.clone();
        apply_feedback(&mut g, &shown, &Feedback::ExplicitNeg("B".into()), 0.1).unwrap();
        assert!((g.nodes["B"].beta - 0.9).abs() < 1e-15);

        for ev in [
            Feedback::ExplicitPos("B".into()),
            Feedback::ExplicitNeg("B".into()),
            Feedback::ImplicitPos("C".into()),
            Feedback::ImplicitNeg,
        ] {
            let mut g = base.clone();
            apply_feedback(&mut g, &shown, &ev, 0.0).unwrap();
            assert_eq!(g, base);
        }

        let mut g = base.clone();
        assert!(apply_feedback(&mut g, &shown, &Feedback::ExplicitPos("A".into()), 0.1).is_err());
    }

    #[test]
    fn two_step_feedback_is_damped_and_floored() {
        let mut g = graph("u", &[("A", "B", 1.0)], &["B"]);
        let mut r = rec("B", 0.5, 0.5, false);
        r.step = 2;
        apply_feedback(
            &mut g,
            &[r.clone()],
            &Feedback::ExplicitPos("B".into()),
            0.1,
        )
        .unwrap();
        assert!((g.nodes["B"].alpha - 1.05).abs() < 1e-15);
        for _ in 0..2000 {
            apply_feedback(&mut g, &[r.clone()], &Feedback::ImplicitNeg, 0.9).unwrap();
        }
        assert_eq!(g.nodes["B"].alpha, FEEDBACK_FLOOR);
    }
}
