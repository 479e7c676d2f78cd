//! Compare every method on one synthetic world.

use intentrec::eval::{self, Method};
use intentrec::pipeline::{self, PipelineConfig};
use intentrec::synth::{self, SynthConfig};

fn main() -> intentrec::Result<()> {
    let out = synth::generate(&SynthConfig::default())?;
    let bench = pipeline::run(&out.hits, &PipelineConfig::default(), &Method::all())?;
    print!("{}", eval::format_table(&bench.reports));
    println!(
        "{} users, {} cold events skipped",
        bench.users, bench.cold_events
    );
    Ok(())
}
