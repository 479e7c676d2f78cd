//! Pairwise ranking SVM over evolved latent factors, one linear model per
//! (user, intent).
//!
//! For intent `I`, factors from sessions that end at `I` (set R1) should
//! outrank factors from sessions ending at another target (set R2):
//!
//! ```text
//! min ⟨w,w⟩ + λ Σ_(i,j) ε_ij   s.t. ⟨w,f_i⟩ ≥ ⟨w,f_j⟩ + 1 − ε_ij,  ε_ij ≥ 0
//! ```
//!
//! Dividing by `λ|P|` gives the equivalent `(μ/2)‖w‖² + mean hinge` with
//! `μ = 2/(λ|P|)`, which is minimized by stochastic subgradient descent with
//! step `1/(μ t)` and suffix averaging of the iterates. The trained weight
//! vector is clipped to norm 4 so that `⟨w,f⟩ ∈ [−4, 4]` for unit `f`, and
//! the intent score is `(4 + ⟨w,f⟩) / 8`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_WEIGHT_NORM: f64 = 4.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankOptions {
    pub lambda: f64,
    pub epochs: usize,
    /// Sampled pairs per epoch.
    pub pairs_per_epoch: usize,
    pub seed: u64,
    /// Record the mean hinge loss over every pair after each epoch.
    pub track_objective: bool,
}

impl Default for RankOptions {
    fn default() -> Self {
        RankOptions {
            lambda: 1.0,
            epochs: 200,
            pairs_per_epoch: 256,
            seed: 0,
            track_objective: false,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RankTrainingSet {
    pub intent: String,
    pub preferred: Vec<Vec<f64>>,
    pub other: Vec<Vec<f64>>,
}

impl RankTrainingSet {
    pub fn pair_count(&self) -> usize {
        self.preferred.len() * self.other.len()
    }
}

/// One training session: its evolved factors (one per view) and the last
/// target it visited, if any.
#[derive(Debug, Clone)]
pub struct LabeledSession<'a> {
    pub factors: &'a [Vec<f64>],
    pub final_target: Option<&'a str>,
}

/// Unit-normalized copy, or `None` for a zero (or non-finite) vector.
pub fn unit(f: &[f64]) -> Option<Vec<f64>> {
    let norm = f.iter().map(|x| x * x).sum::<f64>().sqrt();
    (norm > 0.0 && norm.is_finite()).then(|| f.iter().map(|x| x / norm).collect())
}

/// Builds R1/R2 for every intent that ends at least one session.
pub fn build_training_sets(sessions: &[LabeledSession<'_>]) -> BTreeMap<String, RankTrainingSet> {
    let mut sets: BTreeMap<String, RankTrainingSet> = BTreeMap::new();
    for s in sessions {
        if let Some(t) = s.final_target {
            sets.entry(t.to_owned()).or_insert_with(|| RankTrainingSet {
                intent: t.to_owned(),
                ..Default::default()
            });
        }
    }
    for s in sessions {
        let Some(label) = s.final_target else {
            continue;
        };
        let units: Vec<Vec<f64>> = s.factors.iter().filter_map(|f| unit(f)).collect();
        for (intent, set) in sets.iter_mut() {
            let side = if intent == label {
                &mut set.preferred
            } else {
                &mut set.other
            };
            side.extend(units.iter().cloned());
        }
    }
    sets
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IntentModel {
    pub weights: Vec<f64>,
    /// One-sided training data: `weights` is the normalized mean of R1.
    pub degenerate: bool,
    pub pairs: usize,
    pub violations: usize,
    /// `⟨w,w⟩ + λ Σ hinge` at the returned weights (before clipping).
    pub objective: f64,
    /// Mean hinge loss over all pairs after each epoch.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub epoch_hinge: Vec<f64>,
}

impl IntentModel {
    pub fn margin(&self, f: &[f64]) -> f64 {
        dot(&self.weights, f)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

fn mean_hinge(w: &[f64], set: &RankTrainingSet) -> f64 {
    let pos: Vec<f64> = set.preferred.iter().map(|f| dot(w, f)).collect();
    let neg: Vec<f64> = set.other.iter().map(|f| dot(w, f)).collect();
    let mut total = 0.0;
    for p in &pos {
        for n in &neg {
            total += (1.0 - (p - n)).max(0.0);
        }
    }
    total / (pos.len() * neg.len()).max(1) as f64
}

fn count_violations(w: &[f64], set: &RankTrainingSet) -> usize {
    let pos: Vec<f64> = set.preferred.iter().map(|f| dot(w, f)).collect();
    let neg: Vec<f64> = set.other.iter().map(|f| dot(w, f)).collect();
    pos.iter()
        .map(|p| neg.iter().filter(|&&n| *p <= n).count())
        .sum()
}

fn clip(mut w: Vec<f64>) -> Vec<f64> {
    let n = norm(&w);
    if n > MAX_WEIGHT_NORM {
        for x in &mut w {
            *x *= MAX_WEIGHT_NORM / n;
        }
    }
    w
}

/// Trains the ranking function of one intent.
pub fn train(set: &RankTrainingSet, opts: &RankOptions) -> Result<IntentModel> {
    if !(opts.lambda > 0.0) {
        return Err(Error::argument("lambda must be positive"));
    }
    let dim = set
        .preferred
        .first()
        .or_else(|| set.other.first())
        .map_or(0, Vec::len);

    if set.preferred.is_empty() || set.other.is_empty() {
        let mut mean = vec![0.0; dim];
        for f in &set.preferred {
            for (m, x) in mean.iter_mut().zip(f) {
                *m += x;
            }
        }
        let weights = unit(&mean).unwrap_or(mean);
        return Ok(IntentModel {
            objective: dot(&weights, &weights),
            weights,
            degenerate: true,
            pairs: 0,
            violations: 0,
            epoch_hinge: vec![],
        });
    }

    let pairs = set.pair_count();
    let mu = 2.0 / (opts.lambda * pairs as f64);
    let radius = (1.0 / mu).sqrt();
    let steps_per_epoch = opts.pairs_per_epoch.max(1);
    let total_steps = steps_per_epoch * opts.epochs.max(1);
    let average_from = total_steps / 2;

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut w = vec![0.0; dim];
    let mut avg = vec![0.0; dim];
    let mut averaged = 0usize;
    let mut epoch_hinge = Vec::with_capacity(opts.epochs);
    let mut t = 0usize;
    for _ in 0..opts.epochs.max(1) {
        for _ in 0..steps_per_epoch {
            t += 1;
            let fi = &set.preferred[rng.gen_range(0..set.preferred.len())];
            let fj = &set.other[rng.gen_range(0..set.other.len())];
            let eta = 1.0 / (mu * t as f64);
            let shrink = 1.0 - eta * mu;
            let violated = dot(&w, fi) - dot(&w, fj) < 1.0;
            for k in 0..dim {
                w[k] *= shrink;
                if violated {
                    w[k] += eta * (fi[k] - fj[k]);
                }
            }
            let n = norm(&w);
            if n > radius {
                for x in &mut w {
                    *x *= radius / n;
                }
            }
            if t > average_from {
                averaged += 1;
                let a = 1.0 / averaged as f64;
                for k in 0..dim {
                    avg[k] += (w[k] - avg[k]) * a;
                }
            }
        }
        if opts.track_objective {
            let current = if averaged > 0 { &avg } else { &w };
            epoch_hinge.push(mean_hinge(current, set));
        }
    }

    let final_w = if averaged > 0 { avg } else { w };
    let objective =
        dot(&final_w, &final_w) + opts.lambda * mean_hinge(&final_w, set) * pairs as f64;
    let weights = clip(final_w);
    Ok(IntentModel {
        violations: count_violations(&weights, set),
        weights,
        degenerate: false,
        pairs,
        objective,
        epoch_hinge,
    })
}

/// Trains every intent of one user, in parallel, with per-intent seeds.
pub fn train_all(
    sets: &BTreeMap<String, RankTrainingSet>,
    opts: &RankOptions,
) -> Result<BTreeMap<String, IntentModel>> {
    let jobs: Vec<(&String, &RankTrainingSet)> = sets.iter().collect();
    jobs.into_par_iter()
        .enumerate()
        .map(|(i, (intent, set))| {
            let o = RankOptions {
                seed: opts.seed.wrapping_add(i as u64 * 0x9E37_79B9),
                ..*opts
            };
            Ok((intent.clone(), train(set, &o)?))
        })
        .collect()
}

/// `(4 + ⟨w,f⟩) / 8`, clamped to `[0, 1]`.
pub fn score_from_margin(margin: f64) -> f64 {
    ((MAX_WEIGHT_NORM + margin) / (2.0 * MAX_WEIGHT_NORM)).clamp(0.0, 1.0)
}

/// Rank models of all users.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RankModel {
    pub lambda: f64,
    /// user → intent → model
    pub users: BTreeMap<String, BTreeMap<String, IntentModel>>,
}

impl RankModel {
    pub fn intents(&self, user: &str) -> impl Iterator<Item = &str> {
        self.users
            .get(user)
            .into_iter()
            .flat_map(|m| m.keys().map(String::as_str))
    }

    /// Intent score of a unit-norm latent factor.
    pub fn intent_score(&self, user: &str, intent: &str, f: &[f64]) -> Result<f64> {
        let model = self
            .users
            .get(user)
            .and_then(|m| m.get(intent))
            .ok_or_else(|| Error::lookup("intent", format!("{user}/{intent}")))?;
        Ok(score_from_margin(model.margin(f)))
    }

    /// Scores of every intent of `user` for the latent factor `f`
    /// (normalized here; a zero factor scores 0.5 everywhere).
    pub fn intent_scores(&self, user: &str, f: &[f64]) -> BTreeMap<String, f64> {
        let f = unit(f).unwrap_or_else(|| vec![0.0; f.len()]);
        self.users
            .get(user)
            .map(|models| {
                models
                    .iter()
                    .map(|(intent, m)| (intent.clone(), score_from_margin(m.margin(&f))))
                    .collect()
            })
            .unwrap_or_default()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_normalization() {
        assert_eq!(score_from_margin(0.0), 0.5);
        assert_eq!(score_from_margin(4.0), 1.0);
        assert_eq!(score_from_margin(-2.0), 0.25);
        assert_eq!(score_from_margin(9.0), 1.0);
        assert_eq!(score_from_margin(-9.0), 0.0);
    }

    #[test]
    fn labels_follow_final_target() {
        let a = vec![vec![1.0, 0.0]];
        let b = vec![vec![0.0, 2.0]];
        let c = vec![vec![3.0, 3.0]];
        let none = vec![vec![5.0, 5.0]];
        let sessions = [
            LabeledSession {
                factors: &a,
                final_target: Some("I"),
            },
            LabeledSession {
                factors: &b,
                final_target: Some("I"),
            },
            LabeledSession {
                factors: &c,
                final_target: Some("J"),
            },
            LabeledSession {
                factors: &none,
                final_target: None,
            },
        ];
        let sets = build_training_sets(&sessions);
        assert_eq!(sets.len(), 2);
        assert_eq!(sets["I"].preferred.len(), 2);
        assert_eq!(sets["I"].other.len(), 1);
        assert_eq!(sets["J"].preferred.len(), 1);
        assert_eq!(sets["J"].other.len(), 2);
        // unit normalized
        assert_eq!(sets["I"].preferred[1], vec![0.0, 1.0]);
    }

    #[test]
    fn zero_factors_are_skipped() {
        let a = vec![vec![0.0, 0.0], vec![1.0, 0.0]];
        let sessions = [LabeledSession {
            factors: &a,
            final_target: Some("I"),
        }];
        assert_eq!(build_training_sets(&sessions)["I"].preferred.len(), 1);
    }

    #[test]
    fn one_class_falls_back_to_mean() {
        let set = RankTrainingSet {
            intent: "I".into(),
            preferred: vec![vec![1.0, 0.0], vec![0.0, 1.0]],
            other: vec![],
        };
        let m = train(&set, &RankOptions::default()).unwrap();
        assert!(m.degenerate);
        let s = 0.5f64.sqrt();
        assert!((m.weights[0] - s).abs() < 1e-12 && (m.weights[1] - s).abs() < 1e-12);
    }

    #[test]
    fn two_point_case_orders_correctly() {
        let set = RankTrainingSet {
            intent: "I".into(),
            preferred: vec![vec![1.0, 0.0]],
            other: vec![vec![0.0, 1.0]],
        };
        let m = train(
            &set,
            &RankOptions {
                lambda: 100.0,
                ..Default::default()
            },
        )
        .unwrap();
        // exact QP optimum is w = (1/2, -1/2)
        assert!((m.weights[0] - 0.5).abs() < 1e-2, "{:?}", m.weights);
        assert!((m.weights[1] + 0.5).abs() < 1e-2, "{:?}", m.weights);
        assert!(m.margin(&[1.0, 0.0]) > m.margin(&[0.0, 1.0]));
        assert_eq!(m.violations, 0);
    }

    #[test]
    fn identical_sides_give_zero_weights() {
        let pts = vec![vec![0.6, 0.8], vec![1.0, 0.0]];
        let set = RankTrainingSet {
            intent: "I".into(),
            preferred: pts.clone(),
            other: pts,
        };
        let m = train(&set, &RankOptions::default()).unwrap();
        assert!(norm(&m.weights) < 0.05 * MAX_WEIGHT_NORM, "{:?}", m.weights);
        let single = RankTrainingSet {
            intent: "I".into(),
            preferred: vec![vec![0.6, 0.8]],
            other: vec![vec![0.6, 0.8]],
        };
        assert_eq!(
            norm(&train(&single, &RankOptions::default()).unwrap().weights),
            0.0
        );
    }

    #[test]
    fn weights_are_clipped() {
        let set = RankTrainingSet {
            intent: "I".into(),
            preferred: vec![vec![1.0, 0.0], vec![0.9, 0.1]],
            other: vec![vec![0.99, 0.01]],
        };
        let m = train(
            &set,
            &RankOptions {
                lambda: 1e6,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(norm(&m.weights) <= MAX_WEIGHT_NORM + 1e-12);
    }

    #[test]
    fn unknown_intent_is_lookup_error() {
        let model = RankModel::default();
        assert!(matches!(
            model.intent_score("u", "x", &[1.0]),
            Err(Error::Lookup { .. })
        ));
    }
}
