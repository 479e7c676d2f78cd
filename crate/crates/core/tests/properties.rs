mod common;

use intentrec::eval::{self, ScoredEvent};
use intentrec::ingest::{self, HitRecord, Session};
use intentrec::matio;
use intentrec::navgraph;
use intentrec::ranksvm;
use nalgebra::DMatrix;
use proptest::prelude::*;

fn hits_strategy() -> impl Strategy<Value = Vec<HitRecord>> {
    prop::collection::vec((0usize..3, 0u64..5000, 0usize..6), 1..60).prop_map(|raw| {
        raw.into_iter()
            .map(|(u, ts, r)| common::hit(&format!("u{u}"), ts, &format!("r{r}")))
            .collect()
    })
}

fn sessions_strategy() -> impl Strategy<Value = Vec<Session>> {
    prop::collection::vec(prop::collection::vec((0usize..7, 1u64..200), 1..10), 1..6).prop_map(
        |raw| {
            let mut t = 0;
            let mut out = Vec::new();
            for steps in raw {
                let mut hits = Vec::new();
                for (r, dt) in steps {
                    t += dt;
                    hits.push(common::hit("u", t, &format!("r{r}")));
                }
                t += 50_000;
                out.push(Session {
                    user_id: "u".into(),
                    hits,
                });
            }
            out
        },
    )
}

proptest! {
    #[test]
    fn sessionize_keeps_every_hit(hits in hits_strategy(), timeout in 1u64..2000) {
        let sessions = ingest::sessionize(&hits, timeout);
        prop_assert_eq!(sessions.iter().map(|s| s.hits.len()).sum::<usize>(), hits.len());
        for s in &sessions {
            prop_assert!(!s.hits.is_empty());
            prop_assert!(s.hits.iter().all(|h| h.user_id == s.user_id));
            for w in s.hits.windows(2) {
                prop_assert!(w[0].timestamp <= w[1].timestamp);
                prop_assert!(w[1].timestamp - w[0].timestamp <= timeout);
            }
        }
        // consecutive sessions of a user are separated by more than the timeout
        for w in sessions.windows(2) {
            if w[0].user_id == w[1].user_id {
                prop_assert!(w[1].start() - w[0].end() > timeout);
            }
        }
    }

    #[test]
    fn temporal_split_is_clean(hits in hits_strategy(), fraction in 0.1f64..0.9) {
        let sessions = ingest::sessionize(&hits, 100);
        if let Ok(d) = ingest::temporal_split(&sessions, fraction) {
            prop_assert_eq!(d.train_hits() + d.test_hits(), hits.len());
            prop_assert!(d.train.iter().all(|s| s.end() < d.split_instant));
            prop_assert!(d.test.iter().all(|s| s.start() >= d.split_instant));
        }
    }

    #[test]
    fn graphs_are_stochastic_with_mean_degree_targets(sessions in sessions_strategy()) {
        let mut g = navgraph::build_graph("u", &sessions).unwrap();
        let targets = navgraph::detect_targets(&mut g);
        prop_assert!(!targets.is_empty());
        for out in g.edges.values() {
            let total: f64 = out.values().map(|e| e.weight).sum();
            prop_assert!((total - 1.0).abs() <= 1e-9);
            prop_assert!(out.values().all(|e| e.weight > 0.0));
        }
        let deg = g.in_degrees();
        let mean = deg.values().sum::<usize>() as f64 / deg.len() as f64;
        for (node, d) in deg {
            prop_assert_eq!(targets.contains(node), d as f64 >= mean - 1e-12);
        }
        // every visited report is a node, and nothing else is
        let mut seen: Vec<&str> = sessions.iter().flat_map(|s| s.report_ids()).collect();
        seen.sort();
        seen.dedup();
        prop_assert_eq!(seen, g.nodes.keys().map(String::as_str).collect::<Vec<_>>());
    }

    #[test]
    fn intent_distances_are_probabilities(sessions in sessions_strategy()) {
        let mut g = navgraph::build_graph("u", &sessions).unwrap();
        navgraph::detect_targets(&mut g);
        for source in g.nodes.keys() {
            let d = navgraph::intent_distances(&g, source).unwrap();
            let oracle = common::exhaustive_best_paths(&g, source);
            for (t, p) in &d.per_target {
                prop_assert!(*p > 0.0 && *p <= 1.0);
                prop_assert!(g.nodes[t].target);
                prop_assert!((p - oracle[t]).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn ndcg_matches_reference(
        shown in prop::collection::vec(0usize..30, 0..20),
        relevant in 0usize..30,
        k in 1usize..15,
    ) {
        let mut names: Vec<String> = shown.iter().map(|i| format!("n{i}")).collect();
        names.dedup();
        let shown: Vec<&str> = names.iter().map(String::as_str).collect();
        let relevant = format!("n{relevant}");
        let got = eval::ndcg_at_k(&shown, &relevant, k);
        prop_assert!((got - common::ndcg_oracle(&shown, &relevant, k)).abs() <= 1e-15);
        let (p, r) = eval::precision_recall_at_k(&shown, &relevant, k);
        prop_assert!((0.0..=1.0).contains(&p) && (r == 0.0 || r == 1.0));
        prop_assert_eq!(r == 1.0, got > 0.0);
    }

    #[test]
    fn auc_is_bounded(raw in prop::collection::vec((prop::collection::vec(-5.0f64..5.0, 1..8), 0usize..9), 1..20)) {
        let events: Vec<ScoredEvent> = raw
            .iter()
            .enumerate()
            .map(|(i, (scores, pos))| ScoredEvent {
                user: format!("u{}", i % 3),
                positive: format!("n{pos}"),
                scores: scores.iter().enumerate().map(|(j, s)| (format!("n{j}"), *s)).collect(),
            })
            .collect();
        let w = eval::weighted_auc(&events);
        prop_assert!((0.0..=1.0).contains(&w));
        for e in &events {
            let a = eval::event_auc(e);
            prop_assert!((0.0..=1.0).contains(&a));
        }
    }

    #[test]
    fn intent_scores_stay_in_unit_interval(margin in prop::num::f64::ANY) {
        let s = ranksvm::score_from_margin(margin);
        prop_assert!(margin.is_nan() || (0.0..=1.0).contains(&s));
    }

    #[test]
    fn scalar_filter_matches_reference(
        a in -1.5f64..1.5, q in 0.0f64..2.0, lambda in 0.1f64..2.0, psi in 0.01f64..3.0,
        mean in -3.0f64..3.0, var in 0.01f64..3.0, x in -5.0f64..5.0,
    ) {
        use intentrec::kalman::{step, KalmanModel, KalmanState, MeasurementNoise};
        let m = KalmanModel {
            transition: DMatrix::from_element(1, 1, a),
            process_noise: DMatrix::from_element(1, 1, q),
            measurement_noise: MeasurementNoise::Isotropic(psi),
            loading: DMatrix::from_element(1, 1, lambda),
        };
        let mut s = KalmanState::new(nalgebra::DVector::from_element(1, mean), DMatrix::from_element(1, 1, var));
        step(&m, &mut s, Some(&nalgebra::DVector::from_element(1, x)));
        let [k, pm, pv, fm, fv] = common::scalar_kalman_step(a, q, lambda, psi, mean, var, x);
        prop_assert!((s.gain.unwrap()[(0, 0)] - k).abs() <= 1e-12);
        prop_assert!((s.prior_mean[0] - pm).abs() <= 1e-12);
        prop_assert!((s.prior_cov[(0, 0)] - pv).abs() <= 1e-12);
        prop_assert!((s.post_mean[0] - fm).abs() <= 1e-12);
        prop_assert!((s.post_cov[(0, 0)] - fv).abs() <= 1e-12);
    }

    #[test]
    fn matrices_round_trip_exactly(rows in 1usize..6, cols in 1usize..6, seed in any::<u64>()) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let m = DMatrix::from_fn(rows, cols, |_, _| rng.gen::<f64>() * 10f64.powi(rng.gen_range(-12..12)) - 0.5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        matio::write_matrix(&path, &m).unwrap();
        prop_assert_eq!(matio::read_matrix(&path).unwrap(), m);
    }
}
