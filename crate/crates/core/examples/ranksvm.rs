//! Train one intent model on labeled sessions and score new factors.

use intentrec::ranksvm::{self, LabeledSession, RankOptions};

fn main() -> intentrec::Result<()> {
    let reports = [
        vec![vec![0.9, 0.1], vec![0.8, 0.3]],
        vec![vec![0.1, 0.9]],
        vec![vec![0.2, 0.7], vec![0.3, 0.8]],
    ];
    let labels = ["sales", "costs", "costs"];
    let sessions: Vec<LabeledSession> = reports
        .iter()
        .zip(labels)
        .map(|(f, l)| LabeledSession {
            factors: f,
            final_target: Some(l),
        })
        .collect();
    let sets = ranksvm::build_training_sets(&sessions);
    for (intent, set) in &sets {
        let m = ranksvm::train(set, &RankOptions::default())?;
        println!(
            "{intent}: w = {:?}, {} of {} pairs violated",
            m.weights, m.violations, m.pairs
        );
        for f in [[1.0, 0.0], [0.0, 1.0]] {
            let u = ranksvm::unit(&f).unwrap();
            println!(
                "  score({f:?}) = {:.3}",
                ranksvm::score_from_margin(m.margin(&u))
            );
        }
    }
    Ok(())
}
