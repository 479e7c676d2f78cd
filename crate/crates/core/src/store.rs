//! On-disk artifacts of the staged pipeline.
//!
//! Layout of a work directory:
//!
//! ```text
//! hits.jsonl, planted.json          synth
//! sessions/{train,test}.jsonl       ingest
//! graphs/<user>.json, clusters.json graph
//! tensors/cluster<c>/               tensor     layout.json, X_<user>.csv
//! factors/cluster<c>/               factorize  V.csv, H.csv, G_<user>.csv, S_<user>.csv (diagonal), fit.json
//! kalman/                           kalman     fhat_<user>.csv, ftilde_<user>.csv, filter_<user>.json
//! rank/rankmodel.json               train-rank
//! results.csv, results.txt          evaluate
//! manifests/<stage>.json            every stage
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::context::{ContextTensor, FeatureLayout, UserClustering};
use crate::error::{Error, Result};
use crate::ingest::Session;
use crate::kalman::{self, KalmanModel, KalmanState, MeasurementNoise};
use crate::matio::{file_stem, read_matrix, write_matrix};
use crate::navgraph::NavGraph;
use crate::parafac2::{FitReport, Parafac2Factors, Parafac2Options};
use crate::pipeline::{ClusterFit, UserContextModel};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Synth,
    Ingest,
    Graph,
    Tensor,
    Factorize,
    Kalman,
    TrainRank,
    Recommend,
    Evaluate,
    Sweep,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::Synth => "synth",
            Stage::Ingest => "ingest",
            Stage::Graph => "graph",
            Stage::Tensor => "tensor",
            Stage::Factorize => "factorize",
            Stage::Kalman => "kalman",
            Stage::TrainRank => "train-rank",
            Stage::Recommend => "recommend",
            Stage::Evaluate => "evaluate",
            Stage::Sweep => "sweep",
        }
    }
}

/// Paths inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Workdir { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn hits(&self) -> PathBuf {
        self.root.join("hits.jsonl")
    }

    pub fn planted(&self) -> PathBuf {
        self.root.join("planted.json")
    }

    pub fn sessions(&self) -> PathBuf {
        self.root.join("sessions")
    }

    pub fn train_sessions(&self) -> PathBuf {
        self.sessions().join("train.jsonl")
    }

    pub fn test_sessions(&self) -> PathBuf {
        self.sessions().join("test.jsonl")
    }

    pub fn graphs(&self) -> PathBuf {
        self.root.join("graphs")
    }

    pub fn clusters(&self) -> PathBuf {
        self.graphs().join("clusters.json")
    }

    pub fn tensors(&self) -> PathBuf {
        self.root.join("tensors")
    }

    pub fn factors(&self) -> PathBuf {
        self.root.join("factors")
    }

    pub fn kalman(&self) -> PathBuf {
        self.root.join("kalman")
    }

    pub fn rank(&self) -> PathBuf {
        self.root.join("rank")
    }

    pub fn rank_model(&self) -> PathBuf {
        self.rank().join("rankmodel.json")
    }

    pub fn plain_rank_model(&self) -> PathBuf {
        self.rank().join("rankmodel_plain.json")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn results_table(&self) -> PathBuf {
        self.root.join("results.txt")
    }

    pub fn manifest(&self, stage: Stage) -> PathBuf {
        self.root
            .join("manifests")
            .join(format!("{}.json", stage.name()))
    }
}

/// Fails with a missing-artifact error unless `path` exists.
pub fn require(path: &Path, producer: Stage) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            stage: producer.name(),
        })
    }
}

/// Empties (or creates) an output directory so reruns leave no stale files.
pub fn fresh_dir(path: &Path) -> Result<()> {
    if path.exists() {
        fs::remove_dir_all(path)?;
    }
    fs::create_dir_all(path)?;
    Ok(())
}

pub fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

pub fn write_sessions(path: &Path, sessions: &[Session]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    let mut w = BufWriter::new(fs::File::create(path)?);
    for s in sessions {
        serde_json::to_writer(&mut w, s)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_sessions(path: &Path) -> Result<Vec<Session>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let s = serde_json::from_str(&line)
            .map_err(|e| Error::data(format!("{} line {}: {e}", path.display(), i + 1)))?;
        out.push(s);
    }
    Ok(out)
}

/// File stems for a set of ids; two ids sharing a stem is an error.
fn stems<'a>(ids: impl IntoIterator<Item = &'a String>) -> Result<BTreeMap<String, String>> {
    let mut seen = BTreeSet::new();
    let mut out = BTreeMap::new();
    for id in ids {
        let stem = file_stem(id);
        if !seen.insert(stem.clone()) {
            return Err(Error::data(format!(
                "user ids collide on file name `{stem}`"
            )));
        }
        out.insert(id.clone(), stem);
    }
    Ok(out)
}

// ---- manifests ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputDigest {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub stage: String,
    pub version: u32,
    /// SHA-256 over the per-file digests below, in order.
    pub inputs_hash: String,
    pub inputs: Vec<InputDigest>,
    pub config: serde_json::Value,
    pub outputs: Vec<String>,
    pub timings_ms: BTreeMap<String, f64>,
}

fn files_under(path: &Path, out: &mut Vec<PathBuf>) -> Result<()> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)?
            .map(|e| e.map(|e| e.path()))
            .collect::<std::io::Result<_>>()?;
        entries.sort();
        for e in entries {
            files_under(&e, out)?;
        }
    } else if path.is_file() {
        out.push(path.to_path_buf());
    }
    Ok(())
}

/// Digests of every file under `paths` (directories are walked in sorted
/// order). Paths are recorded relative to `root` when possible.
pub fn digest_inputs(root: &Path, paths: &[PathBuf]) -> Result<Vec<InputDigest>> {
    let mut files = Vec::new();
    for p in paths {
        files_under(p, &mut files)?;
    }
    files
        .into_iter()
        .map(|f| {
            let bytes = fs::read(&f)?;
            let shown = f.strip_prefix(root).unwrap_or(&f);
            Ok(InputDigest {
                path: shown.to_string_lossy().replace('\\', "/"),
                sha256: hex::encode(Sha256::digest(&bytes)),
            })
        })
        .collect()
}

pub fn combined_hash(inputs: &[InputDigest]) -> String {
    let mut h = Sha256::new();
    for d in inputs {
        h.update(d.path.as_bytes());
        h.update([0]);
        h.update(d.sha256.as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

impl Manifest {
    pub fn new(
        wd: &Workdir,
        stage: Stage,
        inputs: &[PathBuf],
        config: &impl Serialize,
        outputs: &[PathBuf],
        timings_ms: BTreeMap<String, f64>,
    ) -> Result<Self> {
        let inputs = digest_inputs(wd.root(), inputs)?;
        Ok(Manifest {
            stage: stage.name().to_owned(),
            version: MANIFEST_VERSION,
            inputs_hash: combined_hash(&inputs),
            inputs,
            config: serde_json::to_value(config)?,
            outputs: outputs
                .iter()
                .map(|p| {
                    p.strip_prefix(wd.root())
                        .unwrap_or(p)
                        .to_string_lossy()
                        .replace('\\', "/")
                })
                .collect(),
            timings_ms,
        })
    }

    pub fn write(&self, wd: &Workdir, stage: Stage) -> Result<()> {
        write_json(&wd.manifest(stage), self)
    }
}

// ---- graphs ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct GraphIndex {
    /// user → file name
    users: BTreeMap<String, String>,
}

pub fn write_graphs(
    dir: &Path,
    graphs: &BTreeMap<String, NavGraph>,
    clustering: &UserClustering,
) -> Result<()> {
    fresh_dir(dir)?;
    let stems = stems(graphs.keys())?;
    let mut index = GraphIndex {
        users: BTreeMap::new(),
    };
    for (u, g) in graphs {
        let file = format!("{}.json", stems[u]);
        write_json(&dir.join(&file), g)?;
        index.users.insert(u.clone(), file);
    }
    write_json(&dir.join("index.json"), &index)?;
    write_json(&dir.join("clusters.json"), clustering)
}

pub fn read_graphs(dir: &Path) -> Result<(BTreeMap<String, NavGraph>, UserClustering)> {
    require(dir, Stage::Graph)?;
    let index_path = dir.join("index.json");
    require(&index_path, Stage::Graph)?;
    let index: GraphIndex = read_json(&index_path)?;
    let mut graphs = BTreeMap::new();
    for (u, file) in index.users {
        let path = dir.join(&file);
        require(&path, Stage::Graph)?;
        let g: NavGraph = read_json(&path)?;
        graphs.insert(u, g);
    }
    let clusters = dir.join("clusters.json");
    require(&clusters, Stage::Graph)?;
    Ok((graphs, read_json(&clusters)?))
}

// ---- tensors ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorSlice {
    user: String,
    file: String,
    /// Views before padding.
    length: usize,
    layout: FeatureLayout,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorLayout {
    cluster_id: usize,
    views: usize,
    slices: Vec<TensorSlice>,
}

fn cluster_dir(dir: &Path, cluster: usize) -> PathBuf {
    dir.join(format!("cluster{cluster}"))
}

fn cluster_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<(usize, PathBuf)> = Vec::new();
    for e in fs::read_dir(dir)? {
        let p = e?.path();
        let id = p
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(|n| n.strip_prefix("cluster"))
            .and_then(|n| n.parse::<usize>().ok());
        if let (Some(id), true) = (id, p.is_dir()) {
            out.push((id, p));
        }
    }
    out.sort();
    Ok(out.into_iter().map(|(_, p)| p).collect())
}

/// Writes one directory per cluster tensor; `layouts` supplies each user's
/// feature layout.
pub fn write_tensors(
    dir: &Path,
    tensors: &[ContextTensor],
    layouts: &BTreeMap<String, FeatureLayout>,
) -> Result<()> {
    fresh_dir(dir)?;
    for t in tensors {
        let cdir = cluster_dir(dir, t.cluster_id);
        fs::create_dir_all(&cdir)?;
        let stems = stems(t.users.iter())?;
        let mut slices = Vec::new();
        for ((u, x), &len) in t.users.iter().zip(&t.slices).zip(&t.lengths) {
            let file = format!("X_{}.csv", stems[u]);
            write_matrix(&cdir.join(&file), x)?;
            let layout = layouts
                .get(u)
                .ok_or_else(|| Error::lookup("feature layout", u.clone()))?
                .clone();
            slices.push(TensorSlice {
                user: u.clone(),
                file,
                length: len,
                layout,
            });
        }
        let doc = TensorLayout {
            cluster_id: t.cluster_id,
            views: t.views(),
            slices,
        };
        write_json(&cdir.join("layout.json"), &doc)?;
    }
    Ok(())
}

/// Cluster tensors and every user's feature layout.
pub fn read_tensors(dir: &Path) -> Result<(Vec<ContextTensor>, BTreeMap<String, FeatureLayout>)> {
    require(dir, Stage::Tensor)?;
    let mut tensors = Vec::new();
    let mut layouts = BTreeMap::new();
    for cdir in cluster_dirs(dir)? {
        let layout_path = cdir.join("layout.json");
        require(&layout_path, Stage::Tensor)?;
        let doc: TensorLayout = read_json(&layout_path)?;
        let mut t = ContextTensor {
            cluster_id: doc.cluster_id,
            users: Vec::new(),
            slices: Vec::new(),
            lengths: Vec::new(),
        };
        for s in doc.slices {
            let path = cdir.join(&s.file);
            require(&path, Stage::Tensor)?;
            let x = read_matrix(&path)?;
            if x.ncols() != doc.views || x.nrows() != s.layout.width() || s.length > doc.views {
                return Err(Error::data(format!(
                    "{} does not match its layout",
                    path.display()
                )));
            }
            t.users.push(s.user.clone());
            t.slices.push(x);
            t.lengths.push(s.length);
            layouts.insert(s.user, s.layout);
        }
        tensors.push(t);
    }
    Ok((tensors, layouts))
}

// ---- factors ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitUser {
    user: String,
    file: String,
    length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FitDoc {
    cluster_id: usize,
    rank: usize,
    /// False when the cluster could not be decomposed at this rank.
    factorized: bool,
    users: Vec<FitUser>,
    excluded: Vec<String>,
    options: Parafac2Options,
    report: Option<FitReport>,
}

/// Writes factor directories. `skipped` lists clusters that could not be
/// decomposed together with their users.
pub fn write_factors(
    dir: &Path,
    fits: &[ClusterFit],
    skipped: &[(usize, Vec<String>, Parafac2Options)],
) -> Result<()> {
    fresh_dir(dir)?;
    for fit in fits {
        let cdir = cluster_dir(dir, fit.cluster_id);
        fs::create_dir_all(&cdir)?;
        let f = &fit.factors;
        write_matrix(&cdir.join("V.csv"), &f.v)?;
        write_matrix(&cdir.join("H.csv"), &f.h)?;
        let stems = stems(fit.users.iter())?;
        let mut users = Vec::new();
        for (i, u) in fit.users.iter().enumerate() {
            let stem = &stems[u];
            write_matrix(&cdir.join(format!("G_{stem}.csv")), &f.g[i])?;
            write_matrix(
                &cdir.join(format!("S_{stem}.csv")),
                &DMatrix::from_row_slice(1, f.s[i].len(), f.s[i].as_slice()),
            )?;
            users.push(FitUser {
                user: u.clone(),
                file: stem.clone(),
                length: fit.lengths[i],
            });
        }
        let doc = FitDoc {
            cluster_id: fit.cluster_id,
            rank: f.rank,
            factorized: true,
            users,
            excluded: fit.excluded.clone(),
            options: fit.options,
            report: Some(fit.report.clone()),
        };
        write_json(&cdir.join("fit.json"), &doc)?;
    }
    for (cluster, users, options) in skipped {
        let doc = FitDoc {
            cluster_id: *cluster,
            rank: options.rank,
            factorized: false,
            users: Vec::new(),
            excluded: users.clone(),
            options: *options,
            report: None,
        };
        write_json(&cluster_dir(dir, *cluster).join("fit.json"), &doc)?;
    }
    Ok(())
}

pub fn read_factors(dir: &Path) -> Result<Vec<ClusterFit>> {
    require(dir, Stage::Factorize)?;
    let mut fits = Vec::new();
    for cdir in cluster_dirs(dir)? {
        let fit_path = cdir.join("fit.json");
        require(&fit_path, Stage::Factorize)?;
        let doc: FitDoc = read_json(&fit_path)?;
        if !doc.factorized {
            continue;
        }
        let read = |name: &str| -> Result<DMatrix<f64>> {
            let p = cdir.join(name);
            require(&p, Stage::Factorize)?;
            read_matrix(&p)
        };
        let v = read("V.csv")?;
        let h = read("H.csv")?;
        let mut g = Vec::new();
        let mut s = Vec::new();
        for u in &doc.users {
            g.push(read(&format!("G_{}.csv", u.file))?);
            let diag = read(&format!("S_{}.csv", u.file))?;
            if diag.nrows() != 1 {
                return Err(Error::data(format!("S_{}.csv must hold one row", u.file)));
            }
            s.push(diag.row(0).transpose());
        }
        let r = doc.rank;
        let shapes_ok = v.ncols() == r
            && h.shape() == (r, r)
            && g.iter().all(|m| m.ncols() == r)
            && s.iter().all(|d| d.len() == r);
        if !shapes_ok {
            return Err(Error::data(format!(
                "{}: factor shapes do not match rank {r}",
                cdir.display()
            )));
        }
        fits.push(ClusterFit {
            cluster_id: doc.cluster_id,
            users: doc.users.iter().map(|u| u.user.clone()).collect(),
            lengths: doc.users.iter().map(|u| u.length).collect(),
            factors: Parafac2Factors {
                rank: r,
                g,
                h,
                s,
                v,
            },
            report: doc.report.unwrap_or(FitReport {
                iterations: 0,
                errors: Vec::new(),
                converged: false,
            }),
            options: doc.options,
            excluded: doc.excluded,
        });
    }
    Ok(fits)
}

// ---- filters ----

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FilterDoc {
    user: String,
    cluster_id: usize,
    layout: FeatureLayout,
    transition: Vec<Vec<f64>>,
    process_noise: Vec<Vec<f64>>,
    measurement_variance: f64,
    loading: Vec<Vec<f64>>,
    end_mean: Vec<f64>,
    end_cov: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FilterIndex {
    users: BTreeMap<String, String>,
}

fn factor_rows(fs: &[DVector<f64>], rank: usize) -> DMatrix<f64> {
    DMatrix::from_fn(fs.len(), rank, |i, j| fs[i][j])
}

pub fn write_filters(dir: &Path, models: &BTreeMap<String, UserContextModel>) -> Result<()> {
    fresh_dir(dir)?;
    let stems = stems(models.keys())?;
    let mut index = FilterIndex {
        users: BTreeMap::new(),
    };
    for (u, m) in models {
        let stem = &stems[u];
        let psi = match m.kalman.measurement_noise {
            MeasurementNoise::Isotropic(p) => p,
            MeasurementNoise::Full(_) => {
                return Err(Error::argument(
                    "only isotropic measurement noise can be stored",
                ));
            }
        };
        let r = m.rank();
        write_matrix(
            &dir.join(format!("fhat_{stem}.csv")),
            &factor_rows(&m.filtered, r),
        )?;
        write_matrix(
            &dir.join(format!("ftilde_{stem}.csv")),
            &factor_rows(&m.projected, r),
        )?;
        let doc = FilterDoc {
            user: u.clone(),
            cluster_id: m.cluster_id,
            layout: m.layout.clone(),
            transition: kalman::rows(&m.kalman.transition),
            process_noise: kalman::rows(&m.kalman.process_noise),
            measurement_variance: psi,
            loading: kalman::rows(&m.kalman.loading),
            end_mean: m.end_state.post_mean.iter().copied().collect(),
            end_cov: kalman::rows(&m.end_state.post_cov),
        };
        write_json(&dir.join(format!("filter_{stem}.json")), &doc)?;
        index.users.insert(u.clone(), stem.clone());
    }
    write_json(&dir.join("index.json"), &index)
}

fn matrix_rows(m: &DMatrix<f64>) -> Vec<DVector<f64>> {
    m.row_iter().map(|r| r.transpose()).collect()
}

pub fn read_filters(dir: &Path) -> Result<BTreeMap<String, UserContextModel>> {
    require(dir, Stage::Kalman)?;
    let index_path = dir.join("index.json");
    require(&index_path, Stage::Kalman)?;
    let index: FilterIndex = read_json(&index_path)?;
    let mut out = BTreeMap::new();
    for (u, stem) in index.users {
        let path = dir.join(format!("filter_{stem}.json"));
        require(&path, Stage::Kalman)?;
        let doc: FilterDoc = read_json(&path)?;
        let read = |name: String| -> Result<DMatrix<f64>> {
            let p = dir.join(name);
            require(&p, Stage::Kalman)?;
            read_matrix(&p)
        };
        let filtered = matrix_rows(&read(format!("fhat_{stem}.csv"))?);
        let projected = matrix_rows(&read(format!("ftilde_{stem}.csv"))?);
        let loading = kalman::from_rows(&doc.loading)?;
        let model = KalmanModel {
            transition: kalman::from_rows(&doc.transition)?,
            process_noise: kalman::from_rows(&doc.process_noise)?,
            measurement_noise: MeasurementNoise::Isotropic(doc.measurement_variance),
            loading: loading.clone(),
        };
        model.validate()?;
        let end_state = KalmanState::new(
            DVector::from_vec(doc.end_mean),
            kalman::from_rows(&doc.end_cov)?,
        );
        out.insert(
            u,
            UserContextModel {
                cluster_id: doc.cluster_id,
                layout: doc.layout,
                projection: crate::pipeline::pinv(&loading),
                kalman: model,
                end_state,
                filtered,
                projected,
            },
        );
    }
    Ok(out)
}
