//! Independent reference implementations and data builders shared by the
//! integration tests. Nothing here calls into the code under test except to
//! build its input types.

#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet};

use intentrec::ingest::{HitRecord, ReportKind, Session};
use intentrec::navgraph::{Edge, NavGraph, NodeAttrs};
use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub fn hit(user: &str, ts: u64, report: &str) -> HitRecord {
    HitRecord {
        user_id: user.to_owned(),
        timestamp: ts,
        report_id: report.to_owned(),
        kind: ReportKind::TimeSeries,
        metric: "m".into(),
        dimension_element: "e".into(),
        values: vec![1.0, 2.0, 3.0],
        session_hint: None,
    }
}

pub fn session(user: &str, start: u64, reports: &[&str]) -> Session {
    Session {
        user_id: user.to_owned(),
        hits: reports
            .iter()
            .enumerate()
            .map(|(i, r)| hit(user, start + 30 * i as u64, r))
            .collect(),
    }
}

/// A few sessions over at most `max_reports` reports.
pub fn random_sessions(rng: &mut ChaCha8Rng, user: &str, max_reports: usize) -> Vec<Session> {
    let n_reports = rng.gen_range(1..=max_reports);
    let n_sessions = rng.gen_range(1..=6);
    let mut t = 0;
    (0..n_sessions)
        .map(|_| {
            let len = rng.gen_range(1..=8);
            let hits = (0..len)
                .map(|_| {
                    t += rng.gen_range(1..120);
                    hit(user, t, &format!("r{}", rng.gen_range(0..n_reports)))
                })
                .collect();
            t += 10_000;
            Session {
                user_id: user.to_owned(),
                hits,
            }
        })
        .collect()
}

/// A graph with arbitrary positive edge weights and random target flags.
pub fn random_graph(rng: &mut ChaCha8Rng, max_nodes: usize) -> NavGraph {
    let n = rng.gen_range(1..=max_nodes);
    let names: Vec<String> = (0..n).map(|i| format!("n{i}")).collect();
    let mut g = NavGraph {
        user_id: "u".into(),
        ..NavGraph::default()
    };
    for name in &names {
        g.nodes.insert(
            name.clone(),
            NodeAttrs {
                target: rng.gen_bool(0.4),
                ..NodeAttrs::default()
            },
        );
    }
    for a in &names {
        for b in &names {
            if a != b && rng.gen_bool(0.35) {
                let weight = rng.gen_range(0.01..=1.0);
                g.edges
                    .entry(a.clone())
                    .or_default()
                    .insert(b.clone(), Edge { weight, count: 1 });
            }
        }
    }
    g
}

/// Best path probability from `source` to every node, by enumerating all
/// simple paths.
pub fn exhaustive_best_paths(g: &NavGraph, source: &str) -> BTreeMap<String, f64> {
    fn walk(
        g: &NavGraph,
        node: &str,
        p: f64,
        seen: &mut BTreeSet<String>,
        best: &mut BTreeMap<String, f64>,
    ) {
        let e = best.entry(node.to_owned()).or_insert(0.0);
        if p > *e {
            *e = p;
        }
        if let Some(out) = g.edges.get(node) {
            for (next, edge) in out {
                if seen.insert(next.clone()) {
                    walk(g, next, p * edge.weight, seen, best);
                    seen.remove(next);
                }
            }
        }
    }
    let mut best = BTreeMap::new();
    let mut seen = BTreeSet::from([source.to_owned()]);
    walk(g, source, 1.0, &mut seen, &mut best);
    best
}

/// One predict/update step of a scalar Kalman filter.
/// Returns `(gain, prior mean, prior var, posterior mean, posterior var)`.
pub fn scalar_kalman_step(
    a: f64,
    q: f64,
    lambda: f64,
    psi: f64,
    mean: f64,
    var: f64,
    x: f64,
) -> [f64; 5] {
    let prior_mean = a * mean;
    let prior_var = a * var * a + q;
    let gain = prior_var * lambda / (lambda * prior_var * lambda + psi);
    let post_mean = prior_mean + gain * (x - lambda * prior_mean);
    let post_var = (1.0 - gain * lambda) * prior_var;
    [gain, prior_mean, prior_var, post_mean, post_var]
}

fn random_orthonormal(rng: &mut ChaCha8Rng, n: usize, r: usize) -> DMatrix<f64> {
    let m = DMatrix::from_fn(n, r, |_, _| rng.gen_range(-1.0..1.0));
    m.qr().q()
}

/// Slices `G_u H S_u Vᵀ` built from random factors of rank `r`: `H` is a
/// random orthogonal matrix, `V` uniform on [-1, 1), the `S_u` diagonals
/// uniform on [0, 1) and each `G_u` a random orthonormal basis with 5 to 10
/// rows (at least `r`).
pub fn planted_parafac2(
    rng: &mut ChaCha8Rng,
    r: usize,
    users: usize,
    t: usize,
) -> Vec<DMatrix<f64>> {
    let h = random_orthonormal(rng, r, r);
    let v = DMatrix::from_fn(t, r, |_, _| rng.gen_range(-1.0..1.0));
    (0..users)
        .map(|_| {
            let n = rng.gen_range(r.max(5)..=10);
            let g = random_orthonormal(rng, n, r);
            let s = DMatrix::from_diagonal(&DVector::from_fn(r, |_, _| rng.gen_range(0.0..1.0)));
            g * &h * s * v.transpose()
        })
        .collect()
}

pub fn max_abs(m: &DMatrix<f64>) -> f64 {
    m.iter().fold(0.0, |acc, x| acc.max(x.abs()))
}

/// `1 / log2(rank + 1)` for a 1-based rank, or 0 when absent.
pub fn ndcg_oracle(shown: &[&str], relevant: &str, k: usize) -> f64 {
    for (i, s) in shown.iter().take(k).enumerate() {
        if *s == relevant {
            return 1.0 / ((i + 2) as f64).log2();
        }
    }
    0.0
}
