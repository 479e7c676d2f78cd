//! Offline evaluation: next-report prediction on held-out sessions.

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::io::Write;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Session;
use crate::kalman;
use crate::pipeline::TrainedSystem;
use crate::recommender::{self, Recommendation, RelevanceVariant, Scoring};

pub fn ndcg_at_k(shown: &[&str], relevant: &str, k: usize) -> f64 {
    assert!(k >= 1, "k must be at least 1");
    shown
        .iter()
        .take(k)
        .position(|s| *s == relevant)
        .map_or(0.0, |i| 1.0 / ((i + 2) as f64).log2())
}

/// `(hits / k, hits)` with a single relevant item.
pub fn precision_recall_at_k(shown: &[&str], relevant: &str, k: usize) -> (f64, f64) {
    assert!(k >= 1, "k must be at least 1");
    let hit = shown.iter().take(k).any(|s| *s == relevant);
    if hit {
        (1.0 / k as f64, 1.0)
    } else {
        (0.0, 0.0)
    }
}

/// Scores of every candidate of one event and the held-out next report.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredEvent {
    pub user: String,
    pub positive: String,
    pub scores: Vec<(String, f64)>,
}

/// Pairwise AUC of one event: negatives strictly below the positive count
/// 1, ties 0.5. A missing positive gives 0; a positive with no negatives 1.
pub fn event_auc(event: &ScoredEvent) -> f64 {
    let Some(pos) = event
        .scores
        .iter()
        .find(|(n, _)| *n == event.positive)
        .map(|(_, s)| *s)
    else {
        return 0.0;
    };
    let mut below = 0.0;
    let mut negatives = 0usize;
    for (n, s) in &event.scores {
        if *n == event.positive {
            continue;
        }
        negatives += 1;
        if *s < pos {
            below += 1.0;
        } else if *s == pos {
            below += 0.5;
        }
    }
    if negatives == 0 {
        1.0
    } else {
        below / negatives as f64
    }
}

/// Per-user mean event AUC, averaged over users weighted by event count.
/// That weighting makes it the plain mean over events.
pub fn weighted_auc(events: &[ScoredEvent]) -> f64 {
    let mut per_user: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for e in events {
        let entry = per_user.entry(&e.user).or_default();
        entry.0 += event_auc(e);
        entry.1 += 1;
    }
    let total: usize = per_user.values().map(|(_, n)| n).sum();
    if total == 0 {
        return 0.0;
    }
    per_user
        .values()
        .map(|(sum, n)| (sum / *n as f64) * (*n as f64 / total as f64))
        .sum()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    Mass,
    Frequency,
    Context,
    Parafac2,
    Variant(RelevanceVariant),
}

impl Method {
    /// Every method, in table order.
    pub fn all() -> Vec<Method> {
        let mut m = vec![
            Method::Mass,
            Method::Frequency,
            Method::Context,
            Method::Parafac2,
        ];
        m.extend(RelevanceVariant::ALL.map(Method::Variant));
        m
    }

    pub fn name(self) -> &'static str {
        match self {
            Method::Mass => "Mass",
            Method::Frequency => "Frequency",
            Method::Context => "Context",
            Method::Parafac2 => "PARAFAC2",
            Method::Variant(RelevanceVariant::MaxIxD) => "Max-IxD",
            Method::Variant(RelevanceVariant::DotIxD) => "Dot-IxD",
            Method::Variant(RelevanceVariant::MaxI) => "Max-I",
            Method::Variant(RelevanceVariant::SumI) => "Sum-I",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::all()
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::argument(format!("unknown method {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub ndcg: f64,
    pub precision: f64,
    pub recall: f64,
    pub wauc: f64,
    pub events: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub k: usize,
    /// Users who saw fewer distinct reports in training are not evaluated.
    pub min_unique_reports: usize,
    /// Score events whose current report is new to the user from the graphs
    /// of more experienced users.
    pub group: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            k: recommender::DEFAULT_TOP_K,
            min_unique_reports: 5,
            group: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Benchmark {
    pub reports: Vec<EvalReport>,
    /// Events skipped because the current report was new to the user.
    pub cold_events: usize,
    pub users: usize,
}

#[derive(Default)]
struct Tally {
    ndcg: f64,
    precision: f64,
    recall: f64,
    events: Vec<ScoredEvent>,
}

struct UserOutcome {
    per_method: Vec<Tally>,
    cold: usize,
}

fn evaluate_user(
    system: &TrainedSystem,
    user: &str,
    sessions: &[&Session],
    methods: &[Method],
    opts: &EvalOptions,
) -> Result<UserOutcome> {
    let mut out = UserOutcome {
        per_method: methods.iter().map(|_| Tally::default()).collect(),
        cold: 0,
    };
    let graph = &system.graphs[user];
    let model = system.context.get(user);
    let mut state = model.map(|m| m.end_state.clone());

    for session in sessions {
        for (t, hit) in session.hits.iter().enumerate() {
            // context of the current view
            let (filtered, projected) = match model {
                Some(m) => {
                    let x = m.layout.context_vector(hit)?;
                    let f = kalman::step(
                        &m.kalman,
                        state.as_mut().expect("state with model"),
                        x.as_ref(),
                    );
                    let p = x
                        .map(|x| &m.projection * x)
                        .unwrap_or_else(|| DVector::zeros(m.rank()));
                    (Some(f), Some(p))
                }
                None => (None, None),
            };
            let Some(next) = session.hits.get(t + 1) else {
                continue;
            };
            let current = hit.report_id.as_str();
            let positive = next.report_id.as_str();
            if current == positive {
                continue;
            }
            let own = graph.graph.contains(current);
            if !own && !opts.group {
                out.cold += 1;
                continue;
            }
            let scores_kalman = filtered
                .as_ref()
                .map(|f| system.rank.intent_scores(user, f.as_slice()))
                .unwrap_or_default();
            let scores_plain = projected
                .as_ref()
                .map(|f| system.rank_plain.intent_scores(user, f.as_slice()))
                .unwrap_or_default();

            for (mi, method) in methods.iter().enumerate() {
                let (scores, scoring) = match method {
                    Method::Mass => (&scores_kalman, Scoring::Mass),
                    Method::Frequency => (&scores_kalman, Scoring::Frequency),
                    Method::Context => (&scores_kalman, Scoring::Context),
                    Method::Parafac2 => (&scores_plain, Scoring::Full(RelevanceVariant::SumI)),
                    Method::Variant(v) => (&scores_kalman, Scoring::Full(*v)),
                };
                let recs: Vec<Recommendation> = system.score(user, current, scores, scoring)?;
                let scored = ScoredEvent {
                    user: user.to_owned(),
                    positive: positive.to_owned(),
                    scores: recs.iter().map(|r| (r.node.clone(), r.score)).collect(),
                };
                let ranked = recommender::rank(recs, opts.k);
                let shown: Vec<&str> = ranked.iter().map(|r| r.node.as_str()).collect();
                let tally = &mut out.per_method[mi];
                tally.ndcg += ndcg_at_k(&shown, positive, opts.k);
                let (p, r) = precision_recall_at_k(&shown, positive, opts.k);
                tally.precision += p;
                tally.recall += r;
                tally.events.push(scored);
            }
        }
    }
    Ok(out)
}

/// Evaluates `methods` on every consecutive pair of views in the test
/// sessions. Filter state carries over from the end of training.
pub fn run_benchmark(
    system: &TrainedSystem,
    test: &[Session],
    methods: &[Method],
    opts: &EvalOptions,
) -> Result<Benchmark> {
    let mut by_user: BTreeMap<&str, Vec<&Session>> = BTreeMap::new();
    for s in test {
        by_user.entry(&s.user_id).or_default().push(s);
    }
    let users: Vec<(&str, Vec<&Session>)> = by_user
        .into_iter()
        .filter(|(u, _)| {
            system
                .graphs
                .get(*u)
                .is_some_and(|g| g.graph.nodes.len() >= opts.min_unique_reports)
        })
        .collect();
    if users.is_empty() {
        log::warn!("no test events to evaluate");
    }
    let outcomes: Vec<UserOutcome> = users
        .par_iter()
        .map(|(u, sessions)| evaluate_user(system, u, sessions, methods, opts))
        .collect::<Result<_>>()?;

    let mut cold = 0;
    let mut merged: Vec<Tally> = methods.iter().map(|_| Tally::default()).collect();
    for o in outcomes {
        cold += o.cold;
        for (m, t) in merged.iter_mut().zip(o.per_method) {
            m.ndcg += t.ndcg;
            m.precision += t.precision;
            m.recall += t.recall;
            m.events.extend(t.events);
        }
    }
    let reports = methods
        .iter()
        .zip(merged)
        .map(|(m, t)| {
            let n = t.events.len();
            let mean = |x: f64| if n == 0 { 0.0 } else { x / n as f64 };
            EvalReport {
                method: m.name().to_owned(),
                ndcg: mean(t.ndcg),
                precision: mean(t.precision),
                recall: mean(t.recall),
                wauc: weighted_auc(&t.events),
                events: n,
            }
        })
        .collect();
    Ok(Benchmark {
        reports,
        cold_events: cold,
        users: users.len(),
    })
}

pub fn write_results_csv<W: Write>(sink: W, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(sink);
    w.write_record(["method", "ndcg", "precision", "recall", "wauc", "events"])?;
    for r in reports {
        w.write_record([
            r.method.clone(),
            format!("{:.6}", r.ndcg),
            format!("{:.6}", r.precision),
            format!("{:.6}", r.recall),
            format!("{:.6}", r.wauc),
            r.events.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Plain-text comparison table.
pub fn format_table(reports: &[EvalReport]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:>8} {:>10} {:>8} {:>8} {:>8}",
        "Method", "NDCG", "Precision", "Recall", "w-AUC", "events"
    );
    let _ = writeln!(s, "{}", "-".repeat(59));
    for r in reports {
        let _ = writeln!(
            s,
            "{:<12} {:>8.4} {:>10.4} {:>8.4} {:>8.4} {:>8}",
            r.method, r.ndcg, r.precision, r.recall, r.wauc, r.events
        );
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ndcg_hand_values() {
        assert_eq!(ndcg_at_k(&["a", "b"], "a", 10), 1.0);
        assert!((ndcg_at_k(&["a", "b"], "b", 10) - 1.0 / 3f64.log2()).abs() < 1e-12);
        assert_eq!(ndcg_at_k(&["a", "b"], "c", 10), 0.0);
        assert_eq!(ndcg_at_k(&["a", "b"], "b", 1), 0.0);
    }

    #[test]
    fn precision_recall_hand_values() {
        assert_eq!(precision_recall_at_k(&["a"], "a", 10), (0.1, 1.0));
        assert_eq!(precision_recall_at_k(&["a"], "b", 10), (0.0, 0.0));
        let events = [("a", "a"), ("b", "b"), ("c", "x")];
        let (p, r) = events.iter().fold((0.0, 0.0), |acc, (shown, rel)| {
            let (p, r) = precision_recall_at_k(&[shown], rel, 10);
            (acc.0 + p / 3.0, acc.1 + r / 3.0)
        });
        assert!((p - 0.0667).abs() < 1e-4);
        assert!((r - 0.6667).abs() < 1e-4);
    }

    fn event(user: &str, pos: f64, negatives: &[f64]) -> ScoredEvent {
        let mut scores = vec![("pos".to_string(), pos)];
        scores.extend(
            negatives
                .iter()
                .enumerate()
                .map(|(i, s)| (format!("n{i}"), *s)),
        );
        ScoredEvent {
            user: user.into(),
            positive: "pos".into(),
            scores,
        }
    }

    #[test]
    fn auc_conventions() {
        assert_eq!(event_auc(&event("u", 1.0, &[0.5; 9])), 1.0);
        assert_eq!(event_auc(&event("u", 0.5, &[0.5; 9])), 0.5);
        let mixed = [0.1, 0.2, 0.3, 0.1, 0.2, 0.3, 0.9, 0.9, 0.9];
        assert!((event_auc(&event("u", 0.5, &mixed)) - 6.0 / 9.0).abs() < 1e-15);
        let mut missing = event("u", 0.5, &[0.1]);
        missing.positive = "gone".into();
        assert_eq!(event_auc(&missing), 0.0);
        assert_eq!(event_auc(&event("u", 0.5, &[])), 1.0);
    }

    #[test]
    fn auc_weights_users_by_events() {
        let events = vec![
            event("a", 1.0, &[0.0]),
            event("a", 1.0, &[0.0]),
            event("a", 1.0, &[0.0]),
            event("b", 0.0, &[1.0]),
        ];
        assert!((weighted_auc(&events) - 0.75).abs() < 1e-15);
        assert_eq!(weighted_auc(&[]), 0.0);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::all() {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
    }

    #[test]
    fn csv_layout() {
        let r = EvalReport {
            method: "Sum-I".into(),
            ndcg: 0.5,
            precision: 0.1,
            recall: 1.0,
            wauc: 0.75,
            events: 4,
        };
        let mut buf = Vec::new();
        write_results_csv(&mut buf, &[r]).unwrap();
        assert_eq!(
            String::from_utf8(buf).unwrap(),
            "method,ndcg,precision,recall,wauc,events\nSum-I,0.500000,0.100000,1.000000,0.750000,4\n"
        );
    }
}
