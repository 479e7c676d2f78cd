//! Context modelling: per-view feature vectors, per-user context matrices
//! and per-cluster context tensors.
//!
//! Every (metric, dimension element) pair a user has seen owns a six-slot
//! segment of that user's context vector:
//!
//! | slot | time series                          | histogram |
//! |------|--------------------------------------|-----------|
//! | 0    | sum of observations                  | sum       |
//! | 1    | maximum                              | 0         |
//! | 2    | minimum                              | 0         |
//! | 3    | index of the maximum (0-based)       | 0         |
//! | 4    | longest run of positive differences  | 0         |
//! | 5    | mean absolute difference             | 0         |
//!
//! A view only fills the segment of its own pair; everything else is zero.

mod cluster;

pub use cluster::{cluster_users, usage_features, UsageFeatures, UserClustering, CLUSTER_COUNT};

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::{HitRecord, ReportKind, Session};

/// Width of one (metric, dimension element) segment.
pub const SEGMENT_WIDTH: usize = 6;

pub type FeatureVector = [f64; SEGMENT_WIDTH];

pub fn extract_features(kind: ReportKind, values: &[f64]) -> Result<FeatureVector> {
    if values.is_empty() {
        return Err(Error::argument(
            "cannot extract features from an empty series",
        ));
    }
    let sum: f64 = values.iter().sum();
    if kind == ReportKind::Histogram {
        return Ok([sum, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    let mut max = values[0];
    let mut min = values[0];
    let mut argmax = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > max {
            max = v;
            argmax = i;
        }
        min = min.min(v);
    }

    let mut longest_rise = 0usize;
    let mut run = 0usize;
    let mut abs_change = 0.0;
    for pair in values.windows(2) {
        let diff = pair[1] - pair[0];
        abs_change += diff.abs();
        if diff > 0.0 {
            run += 1;
            longest_rise = longest_rise.max(run);
        } else {
            run = 0;
        }
    }
    let mean_abs_change = if values.len() > 1 {
        abs_change / (values.len() - 1) as f64
    } else {
        0.0
    };

    Ok([
        sum,
        max,
        min,
        argmax as f64,
        longest_rise as f64,
        mean_abs_change,
    ])
}

/// Slot map of one user's context vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureLayout {
    pub user_id: String,
    /// (metric, dimension element), sorted.
    pub slots: Vec<(String, String)>,
}

impl FeatureLayout {
    pub fn from_pairs<'a, I>(user_id: &str, pairs: I) -> Self
    where
        I: IntoIterator<Item = (&'a str, &'a str)>,
    {
        let set: BTreeSet<(String, String)> = pairs
            .into_iter()
            .map(|(m, e)| (m.to_owned(), e.to_owned()))
            .collect();
        FeatureLayout {
            user_id: user_id.to_owned(),
            slots: set.into_iter().collect(),
        }
    }

    /// Elements seen per metric (`d_m`).
    pub fn elements_per_metric(&self) -> BTreeMap<&str, usize> {
        let mut d = BTreeMap::new();
        for (m, _) in &self.slots {
            *d.entry(m.as_str()).or_default() += 1;
        }
        d
    }

    pub fn metric_count(&self) -> usize {
        self.elements_per_metric().len()
    }

    /// `D_u`, the number of (metric, element) pairs.
    pub fn pair_count(&self) -> usize {
        self.slots.len()
    }

    /// `N_u = 6 * D_u`.
    pub fn width(&self) -> usize {
        SEGMENT_WIDTH * self.slots.len()
    }

    pub fn segment(&self, metric: &str, element: &str) -> Option<usize> {
        self.slots
            .binary_search_by(|(m, e)| (m.as_str(), e.as_str()).cmp(&(metric, element)))
            .ok()
    }

    /// Context vector of one view, or `None` when its pair is not part of
    /// the layout.
    pub fn context_vector(&self, hit: &HitRecord) -> Result<Option<DVector<f64>>> {
        let Some(seg) = self.segment(&hit.metric, &hit.dimension_element) else {
            return Ok(None);
        };
        let features = extract_features(hit.kind, &hit.values)?;
        let mut x = DVector::zeros(self.width());
        for (k, v) in features.iter().enumerate() {
            x[seg * SEGMENT_WIDTH + k] = *v;
        }
        Ok(Some(x))
    }
}

/// `N_u x T_u` matrix whose columns are the user's context vectors in time order.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextMatrix {
    pub layout: FeatureLayout,
    pub data: DMatrix<f64>,
}

impl ContextMatrix {
    pub fn user_id(&self) -> &str {
        &self.layout.user_id
    }

    pub fn views(&self) -> usize {
        self.data.ncols()
    }
}

pub fn build_matrix(user_id: &str, sessions: &[Session]) -> Result<ContextMatrix> {
    let hits: Vec<&HitRecord> = sessions.iter().flat_map(|s| s.hits.iter()).collect();
    if hits.is_empty() {
        return Err(Error::argument(format!("user {user_id} has no hits")));
    }
    let layout = FeatureLayout::from_pairs(
        user_id,
        hits.iter()
            .map(|h| (h.metric.as_str(), h.dimension_element.as_str())),
    );
    let mut data = DMatrix::zeros(layout.width(), hits.len());
    for (t, hit) in hits.iter().enumerate() {
        let x = layout
            .context_vector(hit)?
            .expect("layout covers every pair of the user");
        data.set_column(t, &x);
    }
    Ok(ContextMatrix { layout, data })
}

/// Context matrices of one cluster, padded to a common number of views.
#[derive(Debug, Clone, PartialEq)]
pub struct ContextTensor {
    pub cluster_id: usize,
    pub users: Vec<String>,
    pub slices: Vec<DMatrix<f64>>,
    /// Views per user before padding.
    pub lengths: Vec<usize>,
}

impl ContextTensor {
    pub fn views(&self) -> usize {
        self.slices.first().map_or(0, DMatrix::ncols)
    }

    pub fn is_empty(&self) -> bool {
        self.slices.is_empty()
    }
}

/// Pads `m` to `t` columns by cycling through its own columns.
pub fn pad_cyclic(m: &DMatrix<f64>, t: usize) -> DMatrix<f64> {
    let own = m.ncols();
    assert!(own > 0 && own <= t);
    DMatrix::from_fn(m.nrows(), t, |i, j| m[(i, j % own)])
}

/// Stacks the matrices of one cluster's members (sorted by user id).
pub fn assemble_tensor(
    matrices: &[ContextMatrix],
    clustering: &UserClustering,
    cluster_id: usize,
) -> Result<ContextTensor> {
    let mut members: Vec<&ContextMatrix> = matrices
        .iter()
        .filter(|m| clustering.assignments.get(m.user_id()) == Some(&cluster_id))
        .filter(|m| m.views() > 0)
        .collect();
    if members.is_empty() {
        return Err(Error::data(format!("cluster {cluster_id} has no members")));
    }
    members.sort_by(|a, b| a.user_id().cmp(b.user_id()));
    let t = members.iter().map(|m| m.views()).max().unwrap_or(0);
    Ok(ContextTensor {
        cluster_id,
        users: members.iter().map(|m| m.user_id().to_owned()).collect(),
        slices: members.iter().map(|m| pad_cyclic(&m.data, t)).collect(),
        lengths: members.iter().map(|m| m.views()).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::HitRecord;

    fn hit(metric: &str, element: &str, kind: ReportKind, values: &[f64]) -> HitRecord {
        HitRecord {
            user_id: "u".into(),
            timestamp: 0,
            report_id: format!("{metric}/{element}"),
            kind,
            metric: metric.into(),
            dimension_element: element.into(),
            values: values.to_vec(),
            session_hint: None,
        }
    }

    #[test]
    fn time_series_features() {
        let f = extract_features(ReportKind::TimeSeries, &[2.0, 5.0, 3.0, 7.0]).unwrap();
        assert_eq!(f, [17.0, 7.0, 2.0, 3.0, 1.0, 3.0]);
    }

    #[test]
    fn histogram_keeps_only_aggregate() {
        let f = extract_features(ReportKind::Histogram, &[4.0, 6.0]).unwrap();
        assert_eq!(f, [10.0, 0.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn singleton_series() {
        let f = extract_features(ReportKind::TimeSeries, &[5.0]).unwrap();
        assert_eq!(f, [5.0, 5.0, 5.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn empty_series_is_rejected() {
        assert!(extract_features(ReportKind::TimeSeries, &[]).is_err());
    }

    #[test]
    fn longest_rise_counts_consecutive_increases() {
        let f =
            extract_features(ReportKind::TimeSeries, &[1.0, 2.0, 3.0, 2.0, 3.0, 4.0, 5.0]).unwrap();
        assert_eq!(f[4], 3.0);
        assert_eq!(f[3], 6.0);
    }

    #[test]
    fn layout_sizes() {
        let layout =
            FeatureLayout::from_pairs("u", [("b", "x"), ("a", "y"), ("a", "x"), ("a", "x")]);
        assert_eq!(layout.slots[0], ("a".to_string(), "x".to_string()));
        assert_eq!(layout.pair_count(), 3);
        assert_eq!(layout.metric_count(), 2);
        assert_eq!(layout.elements_per_metric()["a"], 2);
        assert_eq!(layout.width(), 18);
        assert_eq!(layout.segment("b", "x"), Some(2));
        assert_eq!(layout.segment("c", "x"), None);
    }

    fn one_session(hits: Vec<HitRecord>) -> Vec<Session> {
        vec![Session {
            user_id: "u".into(),
            hits,
        }]
    }

    #[test]
    fn matrix_shape_two_pairs_three_hits() {
        let sessions = one_session(vec![
            hit("m", "a", ReportKind::TimeSeries, &[1.0, 2.0]),
            hit("m", "b", ReportKind::TimeSeries, &[3.0]),
            hit("m", "a", ReportKind::Histogram, &[1.0]),
        ]);
        let cm = build_matrix("u", &sessions).unwrap();
        assert_eq!(cm.data.shape(), (12, 3));
        // second hit touches pair #2: rows 0..6 are zero
        assert!(cm.data.column(1).rows(0, 6).iter().all(|&v| v == 0.0));
        assert_eq!(cm.data[(6, 1)], 3.0);
    }

    #[test]
    fn histogram_column() {
        let cm = build_matrix(
            "u",
            &one_session(vec![hit("m", "a", ReportKind::Histogram, &[1.0, 2.0])]),
        )
        .unwrap();
        assert_eq!(
            cm.data.column(0).as_slice(),
            &[3.0, 0.0, 0.0, 0.0, 0.0, 0.0]
        );
    }

    #[test]
    fn empty_user_is_an_error() {
        assert!(build_matrix("u", &[]).is_err());
    }

    #[test]
    fn unseen_pair_has_no_vector() {
        let layout = FeatureLayout::from_pairs("u", [("m", "a")]);
        assert!(layout
            .context_vector(&hit("m", "zz", ReportKind::Histogram, &[1.0]))
            .unwrap()
            .is_none());
    }

    fn matrix(user: &str, cols: usize) -> ContextMatrix {
        ContextMatrix {
            layout: FeatureLayout::from_pairs(user, [("m", "a")]),
            data: DMatrix::from_fn(6, cols, |i, j| (i * 100 + j) as f64),
        }
    }

    fn clustering(users: &[&str]) -> UserClustering {
        UserClustering {
            assignments: users.iter().map(|u| (u.to_string(), 0)).collect(),
            centroids: vec![[0.0; 3]; CLUSTER_COUNT],
            sizes: vec![users.len(), 0, 0, 0],
            insufficient: true,
            wcss_trace: vec![],
        }
    }

    #[test]
    fn cyclic_padding() {
        let ms = [matrix("b", 5), matrix("a", 3)];
        let tensor = assemble_tensor(&ms, &clustering(&["a", "b"]), 0).unwrap();
        assert_eq!(tensor.users, vec!["a", "b"]);
        assert_eq!(tensor.views(), 5);
        assert_eq!(tensor.lengths, vec![3, 5]);
        let a = &tensor.slices[0];
        assert_eq!(a.column(3), a.column(0));
        assert_eq!(a.column(4), a.column(1));
        assert_eq!(tensor.slices[1], ms[0].data);
    }

    #[test]
    fn single_member_unpadded() {
        let ms = [matrix("a", 4)];
        let tensor = assemble_tensor(&ms, &clustering(&["a"]), 0).unwrap();
        assert_eq!(tensor.slices[0], ms[0].data);
    }

    #[test]
    fn empty_cluster_is_an_error() {
        let ms = [matrix("a", 4)];
        assert!(assemble_tensor(&ms, &clustering(&["a"]), 2).is_err());
    }
}
