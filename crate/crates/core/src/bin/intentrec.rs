use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use intentrec::eval::{self, Method};
use intentrec::ingest::{self, Format};
use intentrec::pipeline::PipelineConfig;
use intentrec::recommender::RelevanceVariant;
use intentrec::stages;
use intentrec::store::{self, Stage, Workdir};
use intentrec::synth::SynthConfig;
use intentrec::{Error, Result};

#[derive(Parser)]
#[command(
    name = "intentrec",
    version,
    about = "Intent-aware report recommendation pipeline"
)]
struct Cli {
    /// Directory holding every stage's artifacts.
    #[arg(long, global = true, default_value = "work")]
    workdir: PathBuf,
    /// JSON file with pipeline and generator settings; flags win over it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Log progress (RUST_LOG overrides).
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct PipelineArgs {
    /// Session timeout in seconds.
    #[arg(long, global = true)]
    timeout: Option<u64>,
    #[arg(long, global = true)]
    train_fraction: Option<f64>,
    /// PARAFAC2 rank R.
    #[arg(long, global = true)]
    rank: Option<usize>,
    /// RankSVM trade-off.
    #[arg(long, global = true)]
    lambda: Option<f64>,
    /// Feedback rate.
    #[arg(long, global = true)]
    eta: Option<f64>,
    /// Relevance variant: sum-i, max-i, max-ixd or dot-ixd.
    #[arg(long, global = true)]
    variant: Option<RelevanceVariant>,
    /// Recommendations per request.
    #[arg(long, global = true)]
    k: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Users with fewer distinct reports in training are not evaluated.
    #[arg(long, global = true)]
    min_unique_reports: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hit log into the work directory.
    Synth(SynthArgs),
    /// Parse, sessionize and split a hit log.
    Ingest {
        /// Hit log (defaults to the work directory's hits.jsonl).
        #[arg(long)]
        input: Option<PathBuf>,
        /// jsonl or csv.
        #[arg(long, default_value = "jsonl")]
        format: Format,
    },
    /// Build navigation graphs and usage clusters.
    Graph,
    /// Build per-cluster context tensors.
    Tensor,
    /// PARAFAC2 decomposition of every cluster tensor.
    Factorize,
    /// Fit per-user Kalman filters and evolve the latent factors.
    Kalman,
    /// Train the per-intent ranking models.
    TrainRank,
    /// Recommend for one report view, or for every view in a hit file.
    Recommend {
        #[arg(long, requires = "current", conflicts_with = "views")]
        user: Option<String>,
        #[arg(long, requires = "user")]
        current: Option<String>,
        /// Hit log (jsonl) of views to answer in order.
        #[arg(long)]
        views: Option<PathBuf>,
        /// Output JSONL (defaults to stdout).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Compare all methods on the held-out sessions.
    Evaluate {
        /// Comma-separated method names (default: all).
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
    },
    /// Retrain and evaluate over several ranks.
    Sweep {
        #[arg(long, value_delimiter = ',', default_values_t = [2usize, 5, 8])]
        ranks: Vec<usize>,
    },
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    users: Option<usize>,
    #[arg(long)]
    reports: Option<usize>,
    #[arg(long)]
    sessions: Option<usize>,
    /// Mean session length in hits.
    #[arg(long)]
    session_length: Option<f64>,
    #[arg(long)]
    intents: Option<usize>,
    /// Context signal strength in [0, 1].
    #[arg(long)]
    rho: Option<f64>,
}

fn load_config<T: serde::de::DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            if !p.is_file() {
                return Err(Error::Argument(format!(
                    "config file {} not found",
                    p.display()
                )));
            }
            store::read_json(p)
        }
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut cfg: PipelineConfig = load_config(cli.config.as_deref())?;
    let a = &cli.pipeline;
    set(&mut cfg.timeout, a.timeout);
    set(&mut cfg.train_fraction, a.train_fraction);
    set(&mut cfg.rank, a.rank);
    set(&mut cfg.lambda, a.lambda);
    set(&mut cfg.eta, a.eta);
    set(&mut cfg.variant, a.variant);
    set(&mut cfg.k, a.k);
    set(&mut cfg.seed, a.seed);
    set(&mut cfg.min_unique_reports, a.min_unique_reports);
    cfg.validate()?;
    Ok(cfg)
}

fn synth_config(cli: &Cli, a: &SynthArgs) -> Result<SynthConfig> {
    let mut cfg: SynthConfig = load_config(cli.config.as_deref())?;
    set(&mut cfg.n_users, a.users);
    set(&mut cfg.n_reports, a.reports);
    set(&mut cfg.sessions_per_user, a.sessions);
    set(&mut cfg.mean_session_length, a.session_length);
    set(&mut cfg.intent_count, a.intents);
    set(&mut cfg.context_signal_strength, a.rho);
    set(&mut cfg.seed, cli.pipeline.seed);
    cfg.validate()?;
    Ok(cfg)
}

fn json_line(value: &impl serde::Serialize) -> Result<String> {
    Ok(serde_json::to_string(value)?)
}

fn run(cli: &Cli) -> Result<()> {
    let wd = Workdir::new(&cli.workdir);
    match &cli.command {
        Command::Synth(a) => {
            let s = stages::synth(&wd, &synth_config(cli, a)?)?;
            println!(
                "wrote {} hits for {} users to {}",
                s.hits,
                s.users,
                wd.hits().display()
            );
        }
        Command::Ingest { input, format } => {
            let s = stages::ingest(&wd, input.as_deref(), *format, &pipeline_config(cli)?)?;
            println!("{}", json_line(&s)?);
        }
        Command::Graph => println!(
            "{}",
            json_line(&stages::graph(&wd, &pipeline_config(cli)?)?)?
        ),
        Command::Tensor => {
            for (c, users, views) in stages::tensor(&wd, &pipeline_config(cli)?)? {
                println!("cluster {c}: {users} users, {views} views");
            }
        }
        Command::Factorize => {
            for s in stages::factorize(&wd, &pipeline_config(cli)?)? {
                println!("{}", json_line(&s)?);
            }
        }
        Command::Kalman => {
            let n = stages::kalman(&wd, &pipeline_config(cli)?)?;
            println!("filtered {n} users");
        }
        Command::TrainRank => println!(
            "{}",
            json_line(&stages::train_rank(&wd, &pipeline_config(cli)?)?)?
        ),
        Command::Recommend {
            user,
            current,
            views,
            output,
        } => {
            let cfg = pipeline_config(cli)?;
            let system = stages::load_system(&wd)?;
            let responses = match (user, current, views) {
                (Some(u), Some(c), None) => vec![stages::recommend_latest(&system, &cfg, u, c)?],
                (None, None, Some(path)) => {
                    store::require(path, Stage::Synth)?;
                    let parsed = ingest::parse_hits(fs::File::open(path)?, Format::Jsonl)?;
                    stages::recommend_views(&system, &cfg, &parsed.records)?
                }
                _ => {
                    return Err(Error::Argument(
                        "give either --user and --current, or --views".into(),
                    ))
                }
            };
            match output {
                Some(p) => {
                    stages::write_recommendations(BufWriter::new(fs::File::create(p)?), &responses)?
                }
                None => stages::write_recommendations(io::stdout().lock(), &responses)?,
            }
        }
        Command::Evaluate { methods } => {
            let methods = if methods.is_empty() {
                Method::all()
            } else {
                methods.clone()
            };
            let b = stages::evaluate(&wd, &pipeline_config(cli)?, &methods)?;
            print!("{}", eval::format_table(&b.reports));
            println!("users {}, cold events skipped {}", b.users, b.cold_events);
        }
        Command::Sweep { ranks } => {
            let s = stages::sweep(&wd, &pipeline_config(cli)?, ranks)?;
            print!("{}", stages::format_sweep(&s));
        }
    }
    io::stdout().flush()?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
