//! Experience groups: k-means (k = 4, k-means++ seeding) over standardized
//! usage features. Cluster ids are ordered by activity, so cluster 3 holds
//! the most experienced users.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::navgraph::NavGraph;

pub const CLUSTER_COUNT: usize = 4;

const MAX_ITERS: usize = 100;

/// Browsing duration (s), number of transitions, distinct reports seen.
pub type UsageFeatures = [f64; 3];

pub fn usage_features(graph: &NavGraph) -> UsageFeatures {
    let duration = graph.nodes.values().map(|a| a.dwell_seconds).sum();
    let transitions: u64 = graph
        .edges
        .values()
        .flat_map(|out| out.values().map(|e| e.count))
        .sum();
    [duration, transitions as f64, graph.nodes.len() as f64]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserClustering {
    pub assignments: BTreeMap<String, usize>,
    /// Centroids in the original (unstandardized) feature space.
    pub centroids: Vec<UsageFeatures>,
    pub sizes: Vec<usize>,
    /// Fewer than four users: everyone was placed in cluster 0.
    pub insufficient: bool,
    /// Within-cluster sum of squares (standardized space) after each Lloyd step.
    pub wcss_trace: Vec<f64>,
}

impl UserClustering {
    pub fn cluster_of(&self, user: &str) -> Option<usize> {
        self.assignments.get(user).copied()
    }

    pub fn members(&self, cluster: usize) -> impl Iterator<Item = &str> {
        self.assignments
            .iter()
            .filter(move |(_, &c)| c == cluster)
            .map(|(u, _)| u.as_str())
    }
}

fn sq_dist(a: &[f64; 3], b: &[f64; 3]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(p: &[f64; 3], centroids: &[[f64; 3]]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best = k;
            best_d = d;
        }
    }
    best
}

fn standardize(raw: &[[f64; 3]]) -> (Vec<[f64; 3]>, [f64; 3], [f64; 3]) {
    let n = raw.len() as f64;
    let mut mean = [0.0; 3];
    let mut sd = [0.0; 3];
    for d in 0..3 {
        mean[d] = raw.iter().map(|p| p[d]).sum::<f64>() / n;
        sd[d] = (raw.iter().map(|p| (p[d] - mean[d]).powi(2)).sum::<f64>() / n).sqrt();
    }
    let z = raw
        .iter()
        .map(|p| {
            let mut q = [0.0; 3];
            for d in 0..3 {
                q[d] = if sd[d] > 0.0 {
                    (p[d] - mean[d]) / sd[d]
                } else {
                    0.0
                };
            }
            q
        })
        .collect();
    (z, mean, sd)
}

fn seed_centroids(points: &[[f64; 3]], rng: &mut ChaCha8Rng) -> Vec<[f64; 3]> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())]];
    while centroids.len() < CLUSTER_COUNT {
        let d2: Vec<f64> = points
            .iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = d2.iter().sum();
        if total <= 0.0 {
            // every point coincides with a centroid; the rest stay empty
            break;
        }
        let mut pick = rng.gen::<f64>() * total;
        let mut chosen = points.len() - 1;
        for (i, d) in d2.iter().enumerate() {
            if pick < *d {
                chosen = i;
                break;
            }
            pick -= d;
        }
        centroids.push(points[chosen]);
    }
    centroids
}

/// Clusters users into four experience groups.
pub fn cluster_users(features: &BTreeMap<String, UsageFeatures>, seed: u64) -> UserClustering {
    let users: Vec<&String> = features.keys().collect();
    if users.len() < CLUSTER_COUNT {
        log::warn!(
            "{} users is too few to cluster; all placed in cluster 0",
            users.len()
        );
        let mut centroid = [0.0; 3];
        for f in features.values() {
            for d in 0..3 {
                centroid[d] += f[d] / users.len().max(1) as f64;
            }
        }
        let mut centroids = vec![[0.0; 3]; CLUSTER_COUNT];
        centroids[0] = centroid;
        let mut sizes = vec![0; CLUSTER_COUNT];
        sizes[0] = users.len();
        return UserClustering {
            assignments: users.iter().map(|u| ((*u).clone(), 0)).collect(),
            centroids,
            sizes,
            insufficient: true,
            wcss_trace: vec![],
        };
    }

    let raw: Vec<[f64; 3]> = features.values().copied().collect();
    let (points, mean, sd) = standardize(&raw);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let seeded = seed_centroids(&points, &mut rng);
    let active = seeded.len();
    let mut centroids = seeded;

    let mut assign: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    let mut wcss_trace = Vec::new();
    for _ in 0..MAX_ITERS {
        let mut sums = vec![[0.0; 3]; active];
        let mut counts = vec![0usize; active];
        for (p, &k) in points.iter().zip(&assign) {
            counts[k] += 1;
            for d in 0..3 {
                sums[k][d] += p[d];
            }
        }
        for k in 0..active {
            if counts[k] == 0 {
                continue;
            }
            let mut c = [0.0; 3];
            for d in 0..3 {
                c[d] = sums[k][d] / counts[k] as f64;
            }
            centroids[k] = c;
        }
        wcss_trace.push(
            points
                .iter()
                .zip(&assign)
                .map(|(p, &k)| sq_dist(p, &centroids[k]))
                .sum(),
        );
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        let changed = next != assign;
        assign = next;
        // a fixed point also means zero centroid shift on the next step
        if !changed {
            break;
        }
    }

    // order: empty clusters first, then by total standardized activity
    let mut sizes = vec![0usize; CLUSTER_COUNT];
    for &k in &assign {
        sizes[k] += 1;
    }
    let mut order: Vec<usize> = (0..CLUSTER_COUNT).collect();
    let activity = |k: usize| -> f64 {
        if k < active && sizes[k] > 0 {
            centroids[k].iter().sum()
        } else {
            f64::NEG_INFINITY
        }
    };
    order.sort_by(|&a, &b| activity(a).total_cmp(&activity(b)).then(a.cmp(&b)));
    let mut rank_of = vec![0; CLUSTER_COUNT];
    for (rank, &k) in order.iter().enumerate() {
        rank_of[k] = rank;
    }

    let mut out_centroids = vec![[0.0; 3]; CLUSTER_COUNT];
    let mut out_sizes = vec![0; CLUSTER_COUNT];
    for k in 0..CLUSTER_COUNT {
        let z = if k < active {
            centroids[k]
        } else {
            centroids[0]
        };
        let mut c = [0.0; 3];
        for d in 0..3 {
            c[d] = mean[d] + z[d] * sd[d];
        }
        out_centroids[rank_of[k]] = c;
        out_sizes[rank_of[k]] = sizes[k];
    }
    UserClustering {
        assignments: users
            .iter()
            .zip(&assign)
            .map(|(u, &k)| ((*u).clone(), rank_of[k]))
            .collect(),
        centroids: out_centroids,
        sizes: out_sizes,
        insufficient: false,
        wcss_trace,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn features(points: &[[f64; 3]]) -> BTreeMap<String, UsageFeatures> {
        points
            .iter()
            .enumerate()
            .map(|(i, p)| (format!("u{i}"), *p))
            .collect()
    }

    #[test]
    fn separated_users_are_singletons() {
        let f = features(&[
            [0.0, 0.0, 0.0],
            [10.0, 0.0, 0.0],
            [0.0, 10.0, 0.0],
            [0.0, 0.0, 10.0],
        ]);
        let c = cluster_users(&f, 7);
        assert!(!c.insufficient);
        assert_eq!(c.sizes, vec![1, 1, 1, 1]);
        // the origin has the least activity
        assert_eq!(c.cluster_of("u0"), Some(0));
    }

    #[test]
    fn identical_users_share_one_cluster() {
        let f = features(&[[3.0, 3.0, 3.0]; 6]);
        let c = cluster_users(&f, 1);
        assert_eq!(c.sizes.iter().filter(|&&s| s == 0).count(), 3);
        let first = c.cluster_of("u0").unwrap();
        assert!(c.assignments.values().all(|&k| k == first));
    }

    #[test]
    fn too_few_users_fall_back() {
        let f = features(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]);
        let c = cluster_users(&f, 1);
        assert!(c.insufficient);
        assert!(c.assignments.values().all(|&k| k == 0));
    }

    #[test]
    fn most_active_group_is_last() {
        let mut pts = Vec::new();
        for i in 0..5 {
            let j = i as f64 * 0.01;
            pts.push([1.0 + j, 1.0, 1.0]);
            pts.push([100.0 + j, 20.0, 10.0]);
            pts.push([400.0 + j, 60.0, 30.0]);
            pts.push([1000.0 + j, 200.0, 80.0]);
        }
        let c = cluster_users(&features(&pts), 3);
        assert_eq!(c.sizes, vec![5, 5, 5, 5]);
        assert_eq!(c.cluster_of("u3"), Some(3));
        assert_eq!(c.cluster_of("u0"), Some(0));
        assert!(c.centroids[3][0] > c.centroids[0][0]);
    }

    #[test]
    fn wcss_never_increases() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let pts: Vec<[f64; 3]> = (0..60)
            .map(|_| {
                [
                    rng.gen::<f64>() * 100.0,
                    rng.gen::<f64>() * 10.0,
                    rng.gen::<f64>(),
                ]
            })
            .collect();
        let c = cluster_users(&features(&pts), 5);
        for w in c.wcss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-9, "{:?}", c.wcss_trace);
        }
    }
}
