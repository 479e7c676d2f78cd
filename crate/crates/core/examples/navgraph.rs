//! Build a navigation graph from a few sessions, flag targets and compute
//! path probabilities to them.

use intentrec::ingest::{HitRecord, ReportKind, Session};
use intentrec::navgraph;

fn session(start: u64, reports: &[&str]) -> Session {
    let hits = reports
        .iter()
        .enumerate()
        .map(|(i, r)| HitRecord {
            user_id: "alice".into(),
            timestamp: start + 45 * i as u64,
            report_id: (*r).into(),
            kind: ReportKind::TimeSeries,
            metric: "visits".into(),
            dimension_element: "all".into(),
            values: vec![3.0, 5.0, 4.0],
            session_hint: None,
        })
        .collect();
    Session {
        user_id: "alice".into(),
        hits,
    }
}

fn main() -> intentrec::Result<()> {
    let sessions = [
        session(0, &["home", "traffic", "sources"]),
        session(10_000, &["home", "traffic", "pages", "sources"]),
        session(20_000, &["home", "revenue", "sources"]),
    ];
    let mut g = navgraph::build_graph("alice", &sessions)?;
    let targets = navgraph::detect_targets(&mut g);
    println!("targets: {targets:?}");
    for (from, out) in &g.edges {
        for (to, e) in out {
            println!("{from} -> {to}: w={:.3} (n={})", e.weight, e.count);
        }
    }
    let d = navgraph::intent_distances(&g, "home")?;
    for (t, p) in &d.per_target {
        println!("best path home -> {t}: {p:.4}");
    }
    Ok(())
}
