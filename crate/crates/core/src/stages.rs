//! The pipeline as separately runnable stages over a work directory.
//!
//! Each stage reads its predecessors' artifacts (failing with a
//! missing-artifact error that names the file), replaces its own outputs and
//! writes a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::context::FeatureLayout;
use crate::error::{Error, Result};
use crate::eval::{self, Benchmark, EvalReport, Method};
use crate::ingest::{self, Format, HitRecord};
use crate::kalman;
use crate::pipeline::{self, PipelineConfig, TrainedSystem};
use crate::recommender::{self, IndexedGraph, RecommendationRequest, Scoring};
use crate::store::{self, require, Manifest, Stage, Workdir};
use crate::synth::{self, SynthConfig};

#[derive(Default)]
struct Clock {
    timings: BTreeMap<String, f64>,
}

impl Clock {
    fn time<T>(&mut self, name: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings
            .insert(name.to_owned(), start.elapsed().as_secs_f64() * 1e3);
        out
    }
}

fn finish(
    wd: &Workdir,
    stage: Stage,
    inputs: &[PathBuf],
    config: &impl Serialize,
    outputs: &[PathBuf],
    clock: Clock,
) -> Result<Manifest> {
    let m = Manifest::new(wd, stage, inputs, config, outputs, clock.timings)?;
    m.write(wd, stage)?;
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSummary {
    pub hits: usize,
    pub users: usize,
}

pub fn synth(wd: &Workdir, cfg: &SynthConfig) -> Result<SynthSummary> {
    cfg.validate()?;
    fs::create_dir_all(wd.root())?;
    let mut clock = Clock::default();
    let out = clock.time("generate", || synth::generate(cfg))?;
    clock.time("write", || -> Result<()> {
        let mut w = BufWriter::new(fs::File::create(wd.hits())?);
        ingest::write_jsonl(&mut w, &out.hits)?;
        w.flush()?;
        store::write_json(&wd.planted(), &out.users)
    })?;
    finish(
        wd,
        Stage::Synth,
        &[],
        cfg,
        &[wd.hits(), wd.planted()],
        clock,
    )?;
    Ok(SynthSummary {
        hits: out.hits.len(),
        users: out.users.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestSummary {
    pub hits: usize,
    pub skipped: usize,
    pub train_sessions: usize,
    pub test_sessions: usize,
    pub train_hits: usize,
    pub test_hits: usize,
    pub split_instant: u64,
}

/// Parses `input` (the work directory's `hits.jsonl` when `None`),
/// sessionizes and splits it.
pub fn ingest(
    wd: &Workdir,
    input: Option<&Path>,
    format: Format,
    cfg: &PipelineConfig,
) -> Result<IngestSummary> {
    cfg.validate()?;
    let input = input.map_or_else(|| wd.hits(), Path::to_path_buf);
    require(&input, Stage::Synth)?;
    let mut clock = Clock::default();
    let parsed = clock.time("parse", || {
        ingest::parse_hits(fs::File::open(&input)?, format)
    })?;
    if parsed.skipped > 0 {
        log::warn!(
            "skipped {} malformed rows in {}",
            parsed.skipped,
            input.display()
        );
    }
    let data = clock.time("split", || pipeline::prepare(&parsed.records, cfg))?;
    let summary = IngestSummary {
        hits: parsed.records.len(),
        skipped: parsed.skipped,
        train_sessions: data.train.len(),
        test_sessions: data.test.len(),
        train_hits: data.train_hits(),
        test_hits: data.test_hits(),
        split_instant: data.split_instant,
    };
    clock.time("write", || -> Result<()> {
        store::fresh_dir(&wd.sessions())?;
        store::write_sessions(&wd.train_sessions(), &data.train)?;
        store::write_sessions(&wd.test_sessions(), &data.test)?;
        store::write_json(&wd.sessions().join("split.json"), &summary)
    })?;
    finish(wd, Stage::Ingest, &[input], cfg, &[wd.sessions()], clock)?;
    Ok(summary)
}

fn train_by_user(wd: &Workdir) -> Result<BTreeMap<String, Vec<ingest::Session>>> {
    require(&wd.train_sessions(), Stage::Ingest)?;
    Ok(pipeline::sessions_by_user(&store::read_sessions(
        &wd.train_sessions(),
    )?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSummary {
    pub users: usize,
    pub mean_targets: f64,
    pub cluster_sizes: Vec<usize>,
}

pub fn graph(wd: &Workdir, cfg: &PipelineConfig) -> Result<GraphSummary> {
    cfg.validate()?;
    let by_user = train_by_user(wd)?;
    let mut clock = Clock::default();
    let graphs = clock.time("build", || pipeline::build_graphs(&by_user))?;
    let clustering = clock.time("cluster", || pipeline::cluster_graphs(&graphs, cfg.seed));
    clock.time("write", || {
        store::write_graphs(&wd.graphs(), &graphs, &clustering)
    })?;
    finish(
        wd,
        Stage::Graph,
        &[wd.train_sessions()],
        cfg,
        &[wd.graphs()],
        clock,
    )?;
    let targets: usize = graphs.values().map(|g| g.targets().count()).sum();
    Ok(GraphSummary {
        users: graphs.len(),
        mean_targets: targets as f64 / graphs.len().max(1) as f64,
        cluster_sizes: clustering.sizes.clone(),
    })
}

pub fn tensor(wd: &Workdir, cfg: &PipelineConfig) -> Result<Vec<(usize, usize, usize)>> {
    cfg.validate()?;
    let by_user = train_by_user(wd)?;
    let (_, clustering) = store::read_graphs(&wd.graphs())?;
    let mut clock = Clock::default();
    let matrices = clock.time("matrices", || pipeline::build_matrices(&by_user))?;
    let tensors = clock.time("assemble", || {
        pipeline::build_tensors(&matrices, &clustering)
    })?;
    let layouts: BTreeMap<String, FeatureLayout> = matrices
        .iter()
        .map(|(u, m)| (u.clone(), m.layout.clone()))
        .collect();
    clock.time("write", || {
        store::write_tensors(&wd.tensors(), &tensors, &layouts)
    })?;
    finish(
        wd,
        Stage::Tensor,
        &[wd.train_sessions(), wd.clusters()],
        cfg,
        &[wd.tensors()],
        clock,
    )?;
    Ok(tensors
        .iter()
        .map(|t| (t.cluster_id, t.users.len(), t.views()))
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorSummary {
    pub cluster_id: usize,
    pub users: usize,
    pub excluded: usize,
    pub iterations: usize,
    pub converged: bool,
    pub final_error: Option<f64>,
}

pub fn factorize(wd: &Workdir, cfg: &PipelineConfig) -> Result<Vec<FactorSummary>> {
    cfg.validate()?;
    let (tensors, _) = store::read_tensors(&wd.tensors())?;
    let mut clock = Clock::default();
    let results = clock.time("decompose", || -> Result<Vec<_>> {
        use rayon::prelude::*;
        tensors
            .par_iter()
            .map(|t| {
                let opts = cfg.parafac2_options(t.cluster_id);
                Ok((t, opts, pipeline::factorize(t, &opts)?))
            })
            .collect()
    })?;
    let mut fits = Vec::new();
    let mut skipped = Vec::new();
    let mut summary = Vec::new();
    for (t, opts, fit) in results {
        match fit {
            Some(f) => {
                summary.push(FactorSummary {
                    cluster_id: f.cluster_id,
                    users: f.users.len(),
                    excluded: f.excluded.len(),
                    iterations: f.report.iterations,
                    converged: f.report.converged,
                    final_error: f.report.errors.last().copied(),
                });
                fits.push(f);
            }
            None => {
                summary.push(FactorSummary {
                    cluster_id: t.cluster_id,
                    users: 0,
                    excluded: t.users.len(),
                    iterations: 0,
                    converged: false,
                    final_error: None,
                });
                skipped.push((t.cluster_id, t.users.clone(), opts));
            }
        }
    }
    clock.time("write", || {
        store::write_factors(&wd.factors(), &fits, &skipped)
    })?;
    finish(
        wd,
        Stage::Factorize,
        &[wd.tensors()],
        cfg,
        &[wd.factors()],
        clock,
    )?;
    Ok(summary)
}

pub fn kalman(wd: &Workdir, cfg: &PipelineConfig) -> Result<usize> {
    cfg.validate()?;
    let by_user = train_by_user(wd)?;
    let fits = store::read_factors(&wd.factors())?;
    let mut clock = Clock::default();
    let matrices = clock.time("matrices", || pipeline::build_matrices(&by_user))?;
    let models = clock.time("filter", || pipeline::fit_filters(&fits, &matrices, cfg))?;
    clock.time("write", || store::write_filters(&wd.kalman(), &models))?;
    finish(
        wd,
        Stage::Kalman,
        &[wd.train_sessions(), wd.factors()],
        cfg,
        &[wd.kalman()],
        clock,
    )?;
    Ok(models.len())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankSummary {
    pub users: usize,
    pub intents: usize,
    pub degenerate: usize,
    pub mean_violation_rate: f64,
}

pub fn train_rank(wd: &Workdir, cfg: &PipelineConfig) -> Result<RankSummary> {
    cfg.validate()?;
    let by_user = train_by_user(wd)?;
    let (graphs, _) = store::read_graphs(&wd.graphs())?;
    let models = store::read_filters(&wd.kalman())?;
    let mut clock = Clock::default();
    let (rank, plain) = clock.time("train", || {
        pipeline::train_rank_models(&by_user, &graphs, &models, cfg)
    })?;
    clock.time("write", || -> Result<()> {
        store::fresh_dir(&wd.rank())?;
        store::write_json(&wd.rank_model(), &rank)?;
        store::write_json(&wd.plain_rank_model(), &plain)
    })?;
    finish(
        wd,
        Stage::TrainRank,
        &[wd.train_sessions(), wd.graphs(), wd.kalman()],
        cfg,
        &[wd.rank()],
        clock,
    )?;
    let all: Vec<_> = rank.users.values().flat_map(|m| m.values()).collect();
    let trained: Vec<_> = all.iter().filter(|m| !m.degenerate).collect();
    let rate = trained
        .iter()
        .map(|m| m.violations as f64 / m.pairs.max(1) as f64)
        .sum::<f64>()
        / trained.len().max(1) as f64;
    Ok(RankSummary {
        users: rank.users.len(),
        intents: all.len(),
        degenerate: all.len() - trained.len(),
        mean_violation_rate: rate,
    })
}

/// Reassembles a trained system from the artifacts of the training stages.
pub fn load_system(wd: &Workdir) -> Result<TrainedSystem> {
    let (graphs, clustering) = store::read_graphs(&wd.graphs())?;
    let fits = store::read_factors(&wd.factors())?;
    let context = store::read_filters(&wd.kalman())?;
    require(&wd.rank_model(), Stage::TrainRank)?;
    require(&wd.plain_rank_model(), Stage::TrainRank)?;
    let rank = store::read_json(&wd.rank_model())?;
    let rank_plain = store::read_json(&wd.plain_rank_model())?;
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

/// Recommendations for `current`, scored with the user's context at the
/// end of training.
pub fn recommend_latest(
    system: &TrainedSystem,
    cfg: &PipelineConfig,
    user: &str,
    current: &str,
) -> Result<RecommendationRequest> {
    let scores = system
        .context
        .get(user)
        .map(|m| {
            system
                .rank
                .intent_scores(user, m.end_state.post_mean.as_slice())
        })
        .unwrap_or_default();
    respond(system, cfg, user, current, &scores)
}

/// One recommendation per view, stepping each user's filter through the
/// views in order (starting from the end of training).
pub fn recommend_views(
    system: &TrainedSystem,
    cfg: &PipelineConfig,
    views: &[HitRecord],
) -> Result<Vec<RecommendationRequest>> {
    let mut states: BTreeMap<&str, kalman::KalmanState> = BTreeMap::new();
    let mut out = Vec::with_capacity(views.len());
    for hit in views {
        let user = hit.user_id.as_str();
        let scores = match system.context.get(user) {
            Some(m) => {
                let state = states.entry(user).or_insert_with(|| m.end_state.clone());
                let x = m.layout.context_vector(hit)?;
                let f = kalman::step(&m.kalman, state, x.as_ref());
                system.rank.intent_scores(user, f.as_slice())
            }
            None => BTreeMap::new(),
        };
        out.push(respond(system, cfg, user, &hit.report_id, &scores)?);
    }
    Ok(out)
}

fn respond(
    system: &TrainedSystem,
    cfg: &PipelineConfig,
    user: &str,
    current: &str,
    scores: &BTreeMap<String, f64>,
) -> Result<RecommendationRequest> {
    if !system.graphs.contains_key(user) && system.clustering.cluster_of(user).is_none() {
        return Err(Error::lookup("user", user));
    }
    let recs = system.score(user, current, scores, Scoring::Full(cfg.variant))?;
    Ok(RecommendationRequest {
        user: user.to_owned(),
        current: current.to_owned(),
        k: cfg.k,
        recs: recommender::rank(recs, cfg.k),
        variant: cfg.variant.name().to_owned(),
    })
}

pub fn write_recommendations<W: Write>(
    mut sink: W,
    responses: &[RecommendationRequest],
) -> Result<()> {
    for r in responses {
        serde_json::to_writer(&mut sink, r)?;
        sink.write_all(b"\n")?;
    }
    sink.flush()?;
    Ok(())
}

fn test_sessions(wd: &Workdir) -> Result<Vec<ingest::Session>> {
    require(&wd.test_sessions(), Stage::Ingest)?;
    store::read_sessions(&wd.test_sessions())
}

/// Evaluates `methods` on the held-out sessions and writes `results.csv`
/// and the text table.
pub fn evaluate(wd: &Workdir, cfg: &PipelineConfig, methods: &[Method]) -> Result<Benchmark> {
    cfg.validate()?;
    let test = test_sessions(wd)?;
    let mut clock = Clock::default();
    let system = clock.time("load", || load_system(wd))?;
    let bench = clock.time("evaluate", || {
        eval::run_benchmark(&system, &test, methods, &cfg.eval_options())
    })?;
    clock.time("write", || -> Result<()> {
        eval::write_results_csv(fs::File::create(wd.results())?, &bench.reports)?;
        fs::write(wd.results_table(), eval::format_table(&bench.reports))?;
        Ok(())
    })?;
    finish(
        wd,
        Stage::Evaluate,
        &[
            wd.test_sessions(),
            wd.graphs(),
            wd.factors(),
            wd.kalman(),
            wd.rank(),
        ],
        &(cfg, methods.iter().map(|m| m.name()).collect::<Vec<_>>()),
        &[wd.results(), wd.results_table()],
        clock,
    )?;
    Ok(bench)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rank: usize,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sweep {
    pub rows: Vec<SweepRow>,
    /// Rank with the highest NDCG (the first one on ties).
    pub best_rank: usize,
}

impl Sweep {
    pub fn best(&self) -> &SweepRow {
        self.rows
            .iter()
            .find(|r| r.rank == self.best_rank)
            .expect("best rank is one of the rows")
    }
}

/// Retrains from the ingested sessions at every rank in `ranks` and
/// evaluates the configured variant.
pub fn sweep(wd: &Workdir, cfg: &PipelineConfig, ranks: &[usize]) -> Result<Sweep> {
    cfg.validate()?;
    if ranks.is_empty() {
        return Err(Error::argument("sweep needs at least one rank"));
    }
    require(&wd.train_sessions(), Stage::Ingest)?;
    let train = store::read_sessions(&wd.train_sessions())?;
    let test = test_sessions(wd)?;
    let method = Method::Variant(cfg.variant);
    let mut clock = Clock::default();
    let mut rows = Vec::new();
    for &r in ranks {
        let rcfg = PipelineConfig {
            rank: r,
            ..cfg.clone()
        };
        rcfg.validate()?;
        let bench = clock.time(&format!("rank{r}"), || -> Result<Benchmark> {
            let system = pipeline::train(&train, &rcfg)?;
            eval::run_benchmark(&system, &test, &[method], &rcfg.eval_options())
        })?;
        let report = bench.reports.into_iter().next().expect("one method");
        rows.push(SweepRow { rank: r, report });
    }
    let best_rank = rows
        .iter()
        .fold(None::<&SweepRow>, |best, r| match best {
            Some(b) if b.report.ndcg >= r.report.ndcg => Some(b),
            _ => Some(r),
        })
        .expect("non-empty sweep")
        .rank;
    let result = Sweep { rows, best_rank };
    let csv_path = wd.root().join("sweep.csv");
    clock.time("write", || -> Result<()> {
        let mut w = csv::Writer::from_path(&csv_path)?;
        w.write_record([
            "rank",
            "method",
            "ndcg",
            "precision",
            "recall",
            "wauc",
            "events",
        ])?;
        for row in &result.rows {
            let r = &row.report;
            w.write_record([
                row.rank.to_string(),
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
    })?;
    finish(
        wd,
        Stage::Sweep,
        &[wd.train_sessions(), wd.test_sessions()],
        &(cfg, ranks),
        &[csv_path],
        clock,
    )?;
    Ok(result)
}

/// Plain-text sweep table ending with the best-rank line.
pub fn format_sweep(s: &Sweep) -> String {
    let mut out = format!(
        "{:>4}  {:<8} {:>8} {:>10} {:>8} {:>8} {:>8}\n",
        "R", "method", "NDCG", "Precision", "Recall", "w-AUC", "events"
    );
    for row in &s.rows {
        let r = &row.report;
        out.push_str(&format!(
            "{:>4}  {:<8} {:>8.4} {:>10.4} {:>8.4} {:>8.4} {:>8}\n",
            row.rank, r.method, r.ndcg, r.precision, r.recall, r.wauc, r.events
        ));
    }
    let b = s.best();
    out.push_str(&format!(
        "best R = {} (NDCG {:.4})\n",
        b.rank, b.report.ndcg
    ));
    out
}
