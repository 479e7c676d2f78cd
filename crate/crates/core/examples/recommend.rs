//! Train on a synthetic log and print recommendations for one user.

use intentrec::pipeline::{self, PipelineConfig};
use intentrec::recommender::{self, Scoring};
use intentrec::synth::{self, SynthConfig};

fn main() -> intentrec::Result<()> {
    let out = synth::generate(&SynthConfig {
        n_users: 40,
        ..SynthConfig::default()
    })?;
    let cfg = PipelineConfig::default();
    let data = pipeline::prepare(&out.hits, &cfg)?;
    let system = pipeline::train(&data.train, &cfg)?;

    let (user, graph) = system.graphs.iter().next().expect("at least one user");
    let current = graph.graph.nodes.keys().next().expect("non-empty graph");
    let scores = system
        .context
        .get(user)
        .map(|m| {
            system
                .rank
                .intent_scores(user, m.end_state.post_mean.as_slice())
        })
        .unwrap_or_default();
    println!("{user} at {current}; intent scores {scores:?}");
    let recs = system.score(user, current, &scores, Scoring::Full(cfg.variant))?;
    for r in recommender::rank(recs, cfg.k) {
        println!(
            "  {:<16} K={:.4} W={:.3} R={:.3} M={:.3}",
            r.node, r.score, r.weight, r.relevance, r.mass
        );
    }
    Ok(())
}
