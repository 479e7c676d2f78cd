//! End-to-end training: graphs, context tensors, factors, filters, rank models.

use std::collections::BTreeMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::context::{self, ContextMatrix, ContextTensor, FeatureLayout, UserClustering};
use crate::error::{Error, Result};
use crate::eval::{self, Benchmark, EvalOptions, Method};
use crate::ingest::{self, Dataset, HitRecord, Session};
use crate::kalman::{self, KalmanModel, KalmanState, MeasurementNoise};
use crate::navgraph::{self, NavGraph};
use crate::parafac2::{self, FitReport, Parafac2Factors, Parafac2Options};
use crate::ranksvm::{self, LabeledSession, RankModel, RankOptions};
use crate::recommender::{
    self, IndexedGraph, Recommendation, RelevanceVariant, Scoring, DEFAULT_FEEDBACK_RATE,
    DEFAULT_TOP_K,
};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Session timeout, seconds.
    pub timeout: u64,
    pub train_fraction: f64,
    /// PARAFAC2 rank R.
    pub rank: usize,
    /// RankSVM trade-off λ.
    pub lambda: f64,
    /// Feedback rate η.
    pub eta: f64,
    pub variant: RelevanceVariant,
    pub k: usize,
    pub seed: u64,
    pub min_unique_reports: usize,
    pub parafac2_tol: f64,
    pub parafac2_max_iters: usize,
    /// Process noise q in `Q = q·I`; estimated from the transition
    /// residuals when unset.
    pub process_noise: Option<f64>,
    /// Ridge of the transition fit.
    pub transition_ridge: f64,
    pub rank_epochs: usize,
    pub rank_pairs_per_epoch: usize,
}

const MIN_PROCESS_NOISE: f64 = 1e-6;

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            timeout: ingest::DEFAULT_SESSION_TIMEOUT,
            train_fraction: 0.7,
            rank: 5,
            lambda: 1.0,
            eta: DEFAULT_FEEDBACK_RATE,
            variant: RelevanceVariant::SumI,
            k: DEFAULT_TOP_K,
            seed: 0,
            min_unique_reports: 5,
            parafac2_tol: 1e-7,
            parafac2_max_iters: 500,
            process_noise: Some(0.01),
            transition_ridge: 1.0,
            rank_epochs: 200,
            rank_pairs_per_epoch: RankOptions::default().pairs_per_epoch,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: &str| Err(Error::argument(msg.to_owned()));
        if self.timeout == 0 {
            return fail("timeout must be positive");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return fail("train_fraction must lie in (0, 1)");
        }
        if self.rank == 0 {
            return fail("rank must be at least 1");
        }
        if !(self.lambda > 0.0) {
            return fail("lambda must be positive");
        }
        if !(0.0..1.0).contains(&self.eta) {
            return fail("eta must lie in [0, 1)");
        }
        if self.k == 0 {
            return fail("k must be at least 1");
        }
        if !(self.parafac2_tol >= 0.0) || self.parafac2_max_iters == 0 {
            return fail("parafac2 tolerance must be >= 0 and max iterations positive");
        }
        if self.process_noise.is_some_and(|q| !(q > 0.0)) || !(self.transition_ridge >= 0.0) {
            return fail("process_noise must be positive and transition_ridge non-negative");
        }
        if self.rank_epochs == 0 || self.rank_pairs_per_epoch == 0 {
            return fail("rank epochs and pairs per epoch must be positive");
        }
        Ok(())
    }

    pub fn parafac2_options(&self, cluster: usize) -> Parafac2Options {
        Parafac2Options {
            rank: self.rank,
            tol: self.parafac2_tol,
            max_iters: self.parafac2_max_iters,
            seed: self.seed.wrapping_add(cluster as u64),
        }
    }

    pub fn rank_options(&self, seed: u64) -> RankOptions {
        RankOptions {
            lambda: self.lambda,
            epochs: self.rank_epochs,
            pairs_per_epoch: self.rank_pairs_per_epoch,
            seed,
            track_objective: false,
        }
    }

    pub fn eval_options(&self) -> EvalOptions {
        EvalOptions {
            k: self.k,
            min_unique_reports: self.min_unique_reports,
            group: false,
        }
    }
}

/// Sessionizes and splits raw hits.
pub fn prepare(hits: &[HitRecord], cfg: &PipelineConfig) -> Result<Dataset> {
    let sessions = ingest::sessionize(hits, cfg.timeout);
    ingest::temporal_split(&sessions, cfg.train_fraction)
}

pub fn sessions_by_user(sessions: &[Session]) -> BTreeMap<String, Vec<Session>> {
    let mut out: BTreeMap<String, Vec<Session>> = BTreeMap::new();
    for s in sessions {
        out.entry(s.user_id.clone()).or_default().push(s.clone());
    }
    out
}

/// Graphs with targets flagged, one per user.
pub fn build_graphs(
    by_user: &BTreeMap<String, Vec<Session>>,
) -> Result<BTreeMap<String, NavGraph>> {
    by_user
        .par_iter()
        .map(|(u, sessions)| {
            let mut g = navgraph::build_graph(u, sessions)?;
            navgraph::detect_targets(&mut g);
            Ok((u.clone(), g))
        })
        .collect()
}

pub fn build_matrices(
    by_user: &BTreeMap<String, Vec<Session>>,
) -> Result<BTreeMap<String, ContextMatrix>> {
    by_user
        .par_iter()
        .map(|(u, sessions)| Ok((u.clone(), context::build_matrix(u, sessions)?)))
        .collect()
}

pub fn cluster_graphs(graphs: &BTreeMap<String, NavGraph>, seed: u64) -> UserClustering {
    let features = graphs
        .iter()
        .map(|(u, g)| (u.clone(), context::usage_features(g)))
        .collect();
    context::cluster_users(&features, seed)
}

/// One tensor per non-empty cluster.
pub fn build_tensors(
    matrices: &BTreeMap<String, ContextMatrix>,
    clustering: &UserClustering,
) -> Result<Vec<ContextTensor>> {
    let all: Vec<ContextMatrix> = matrices.values().cloned().collect();
    (0..context::CLUSTER_COUNT)
        .filter(|&c| clustering.members(c).next().is_some())
        .map(|c| context::assemble_tensor(&all, clustering, c))
        .collect()
}

/// PARAFAC2 fit of one cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct ClusterFit {
    pub cluster_id: usize,
    /// Users in the decomposition, aligned with `factors.g`.
    pub users: Vec<String>,
    pub lengths: Vec<usize>,
    pub factors: Parafac2Factors,
    pub report: FitReport,
    pub options: Parafac2Options,
    /// Users left out because they have fewer feature rows than the rank.
    pub excluded: Vec<String>,
}

/// Decomposes a cluster tensor. Users with `N_u < R` are excluded; `None`
/// when nobody is left or the tensor has fewer views than the rank.
pub fn factorize(tensor: &ContextTensor, opts: &Parafac2Options) -> Result<Option<ClusterFit>> {
    let mut users = Vec::new();
    let mut lengths = Vec::new();
    let mut slices = Vec::new();
    let mut excluded = Vec::new();
    for ((u, x), &len) in tensor.users.iter().zip(&tensor.slices).zip(&tensor.lengths) {
        if x.nrows() < opts.rank {
            log::debug!(
                "user {u} has {} feature rows < rank {}; excluded",
                x.nrows(),
                opts.rank
            );
            excluded.push(u.clone());
        } else {
            users.push(u.clone());
            lengths.push(len);
            slices.push(x.clone());
        }
    }
    if !excluded.is_empty() {
        log::warn!(
            "cluster {}: {} users have fewer feature rows than rank {} and fall back to frequency",
            tensor.cluster_id,
            excluded.len(),
            opts.rank
        );
    }
    if slices.is_empty() || tensor.views() < opts.rank {
        log::warn!(
            "cluster {} cannot be factorized at rank {} ({} users, {} views)",
            tensor.cluster_id,
            opts.rank,
            slices.len(),
            tensor.views()
        );
        excluded.extend(users);
        return Ok(None);
    }
    let (mut factors, report) = parafac2::decompose(&slices, opts)?;
    factors.normalize_latent_columns();
    Ok(Some(ClusterFit {
        cluster_id: tensor.cluster_id,
        users,
        lengths,
        factors,
        report,
        options: *opts,
        excluded,
    }))
}

/// Context model of one user: the filter and its state at the end of training.
#[derive(Debug, Clone, PartialEq)]
pub struct UserContextModel {
    pub cluster_id: usize,
    pub layout: FeatureLayout,
    pub kalman: KalmanModel,
    pub end_state: KalmanState,
    /// `Λ̂⁺`, the least-squares map from a context vector to a latent factor.
    pub projection: DMatrix<f64>,
    /// Filtered factor of every training view.
    pub filtered: Vec<DVector<f64>>,
    /// Least-squares factor of every training view.
    pub projected: Vec<DVector<f64>>,
}

impl UserContextModel {
    pub fn rank(&self) -> usize {
        self.kalman.rank()
    }
}

pub(crate) fn pinv(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eps = m.amax().max(f64::MIN_POSITIVE) * 1e-12 * m.nrows().max(m.ncols()) as f64;
    m.clone().pseudo_inverse(eps).expect("non-negative epsilon")
}

/// Builds and runs the filter of user `index` of a cluster fit.
pub fn fit_filter(
    fit: &ClusterFit,
    index: usize,
    matrix: &ContextMatrix,
    cfg: &PipelineConfig,
) -> Result<UserContextModel> {
    let loading = fit.factors.loading_matrix(index)?;
    let x = &matrix.data;
    let t_u = x.ncols();
    let v = &fit.factors.v;
    if loading.nrows() != x.nrows() || v.nrows() < t_u {
        return Err(Error::data(format!(
            "factors do not match the context matrix of {}",
            matrix.user_id()
        )));
    }
    let fitted = &loading * v.rows(0, t_u).transpose();
    let psi = ((x - fitted).norm_squared() / (x.len() as f64)).max(1e-9);
    let projection = pinv(&loading);
    let projected: Vec<DVector<f64>> = x.column_iter().map(|c| &projection * c).collect();
    let r = loading.ncols();
    let transition = if projected.len() >= 2 {
        kalman::estimate_transition(&projected, cfg.transition_ridge)?
    } else {
        DMatrix::identity(r, r)
    };
    let q = match cfg.process_noise {
        Some(q) => q,
        None => kalman::residual_variance(&projected, &transition).max(MIN_PROCESS_NOISE),
    };
    let model = KalmanModel {
        transition,
        process_noise: DMatrix::identity(r, r) * q,
        measurement_noise: MeasurementNoise::Isotropic(psi),
        loading,
    };
    let observations: Vec<Option<DVector<f64>>> =
        x.column_iter().map(|c| Some(c.into_owned())).collect();
    let initial = v.row(0).transpose();
    let (filtered, end_state) = kalman::evolve_sequence(&model, &initial, &observations)?;
    Ok(UserContextModel {
        cluster_id: fit.cluster_id,
        layout: matrix.layout.clone(),
        kalman: model,
        end_state,
        projection,
        filtered,
        projected,
    })
}

pub fn fit_filters(
    fits: &[ClusterFit],
    matrices: &BTreeMap<String, ContextMatrix>,
    cfg: &PipelineConfig,
) -> Result<BTreeMap<String, UserContextModel>> {
    let jobs: Vec<(&ClusterFit, usize)> = fits
        .iter()
        .flat_map(|f| (0..f.users.len()).map(move |i| (f, i)))
        .collect();
    jobs.into_par_iter()
        .map(|(fit, i)| {
            let user = &fit.users[i];
            let m = matrices
                .get(user)
                .ok_or_else(|| Error::lookup("context matrix", user.clone()))?;
            Ok((user.clone(), fit_filter(fit, i, m, cfg)?))
        })
        .collect()
}

/// Per-user seed derived from the run seed and the user's position.
fn user_seed(seed: u64, index: usize) -> u64 {
    seed ^ (index as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Rank models over filtered factors and over plain least-squares factors.
pub fn train_rank_models(
    by_user: &BTreeMap<String, Vec<Session>>,
    graphs: &BTreeMap<String, NavGraph>,
    models: &BTreeMap<String, UserContextModel>,
    cfg: &PipelineConfig,
) -> Result<(RankModel, RankModel)> {
    let jobs: Vec<(usize, &String, &UserContextModel)> = models
        .iter()
        .enumerate()
        .map(|(i, (u, m))| (i, u, m))
        .collect();
    let trained: Vec<_> = jobs
        .into_par_iter()
        .map(|(i, user, model)| -> Result<_> {
            let sessions = by_user.get(user).map(Vec::as_slice).unwrap_or(&[]);
            let graph = graphs
                .get(user)
                .ok_or_else(|| Error::lookup("graph", user.clone()))?;
            let as_rows = |fs: &[DVector<f64>]| -> Vec<Vec<f64>> {
                fs.iter().map(|f| f.as_slice().to_vec()).collect()
            };
            let filtered = as_rows(&model.filtered);
            let projected = as_rows(&model.projected);
            let mut spans = Vec::new();
            let mut offset = 0;
            for s in sessions {
                let label = s
                    .hits
                    .iter()
                    .rev()
                    .map(|h| h.report_id.as_str())
                    .find(|r| graph.nodes.get(*r).is_some_and(|a| a.target));
                spans.push((offset, offset + s.hits.len(), label));
                offset += s.hits.len();
            }
            if offset != filtered.len() {
                return Err(Error::data(format!(
                    "{user}: {offset} views but {} factors",
                    filtered.len()
                )));
            }
            let make = |rows: &[Vec<f64>]| {
                let sessions: Vec<LabeledSession> = spans
                    .iter()
                    .map(|&(a, b, label)| LabeledSession {
                        factors: &rows[a..b],
                        final_target: label,
                    })
                    .collect();
                ranksvm::build_training_sets(&sessions)
            };
            let opts = cfg.rank_options(user_seed(cfg.seed, i));
            let with_filter = ranksvm::train_all(&make(&filtered), &opts)?;
            let plain = ranksvm::train_all(&make(&projected), &opts)?;
            Ok((user.clone(), with_filter, plain))
        })
        .collect::<Result<_>>()?;
    let mut filtered = RankModel {
        lambda: cfg.lambda,
        users: BTreeMap::new(),
    };
    let mut plain = filtered.clone();
    for (u, a, b) in trained {
        filtered.users.insert(u.clone(), a);
        plain.users.insert(u, b);
    }
    Ok((filtered, plain))
}

/// Everything needed to serve and evaluate recommendations.
#[derive(Debug, Clone)]
pub struct TrainedSystem {
    pub graphs: BTreeMap<String, IndexedGraph>,
    pub clustering: UserClustering,
    pub fits: Vec<ClusterFit>,
    pub context: BTreeMap<String, UserContextModel>,
    /// Rank models over filtered factors.
    pub rank: RankModel,
    /// Rank models over unfiltered factors.
    pub rank_plain: RankModel,
}

impl TrainedSystem {
    /// Scores the candidates of `current` for `user`. Without intent scores
    /// the context-based scorings fall back to frequency; a `current` outside
    /// the user's own graph is served from similar users' graphs.
    pub fn score(
        &self,
        user: &str,
        current: &str,
        intent_scores: &BTreeMap<String, f64>,
        scoring: Scoring,
    ) -> Result<Vec<Recommendation>> {
        let scoring = match scoring {
            Scoring::Full(_) | Scoring::Context if intent_scores.is_empty() => Scoring::Frequency,
            s => s,
        };
        match self.graphs.get(user) {
            Some(g) if g.graph.contains(current) => g.score(current, intent_scores, scoring),
            _ => recommender::group_recommend(
                user,
                &self.clustering,
                &self.graphs,
                current,
                intent_scores,
                scoring,
            ),
        }
    }
}

pub fn train(train_sessions: &[Session], cfg: &PipelineConfig) -> Result<TrainedSystem> {
    cfg.validate()?;
    let by_user = sessions_by_user(train_sessions);
    let graphs = build_graphs(&by_user)?;
    let matrices = build_matrices(&by_user)?;
    let clustering = cluster_graphs(&graphs, cfg.seed);
    let tensors = build_tensors(&matrices, &clustering)?;
    let fits: Vec<ClusterFit> = tensors
        .par_iter()
        .map(|t| factorize(t, &cfg.parafac2_options(t.cluster_id)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .flatten()
        .collect();
    let context = fit_filters(&fits, &matrices, cfg)?;
    let (rank, rank_plain) = train_rank_models(&by_user, &graphs, &context, cfg)?;
    Ok(TrainedSystem {
        graphs: graphs
            .into_iter()
            .map(|(u, g)| (u, IndexedGraph::new(g)))
            .collect(),
        clustering,
        fits,
        context,
        rank,
        rank_plain,
    })
}

/// Splits, trains and evaluates in one go.
pub fn run(hits: &[HitRecord], cfg: &PipelineConfig, methods: &[Method]) -> Result<Benchmark> {
    let dataset = prepare(hits, cfg)?;
    let system = train(&dataset.train, cfg)?;
    eval::run_benchmark(&system, &dataset.test, methods, &cfg.eval_options())
}
