//! Run every stage against a temporary work directory, as the CLI does.

use intentrec::eval::Method;
use intentrec::ingest::Format;
use intentrec::pipeline::PipelineConfig;
use intentrec::stages;
use intentrec::store::Workdir;
use intentrec::synth::SynthConfig;

fn main() -> intentrec::Result<()> {
    let dir = std::env::temp_dir().join("intentrec-staged-example");
    let wd = Workdir::new(&dir);
    let cfg = PipelineConfig::default();
    stages::synth(
        &wd,
        &SynthConfig {
            n_users: 60,
            ..SynthConfig::default()
        },
    )?;
    println!("{:?}", stages::ingest(&wd, None, Format::Jsonl, &cfg)?);
    println!("{:?}", stages::graph(&wd, &cfg)?);
    stages::tensor(&wd, &cfg)?;
    for f in stages::factorize(&wd, &cfg)? {
        println!("{f:?}");
    }
    println!("filtered {} users", stages::kalman(&wd, &cfg)?);
    println!("{:?}", stages::train_rank(&wd, &cfg)?);
    stages::evaluate(&wd, &cfg, &Method::all())?;
    print!("{}", std::fs::read_to_string(wd.results_table())?);
    println!("artifacts in {}", dir.display());
    Ok(())
}
