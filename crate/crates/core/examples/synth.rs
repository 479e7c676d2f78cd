//! Generate a small synthetic hit log and summarize it.

use intentrec::ingest;
use intentrec::synth::{self, SynthConfig};

fn main() -> intentrec::Result<()> {
    let cfg = SynthConfig {
        n_users: 20,
        seed: 7,
        ..SynthConfig::default()
    };
    let out = synth::generate(&cfg)?;
    let sessions = ingest::sessionize(&out.hits, 1800);
    println!(
        "{} hits, {} sessions, {} users",
        out.hits.len(),
        sessions.len(),
        out.users.len()
    );
    for u in out.users.iter().take(3) {
        println!("{} (level {}): intents {:?}", u.user_id, u.level, u.intents);
    }
    let first = &out.hits[0];
    println!(
        "first hit: {} {} at {} -> {:?}",
        first.user_id, first.report_id, first.timestamp, first.values
    );
    Ok(())
}
