//! Token-level intent voting and the global slot/intent graph it induces.
//!
//! `cargo run --example intent_voting`

use jointslu::intent::{vote, VotingConfig};
use jointslu::slot::{EdgeKind, GlobalGraph, DEFAULT_WINDOW};
use jointslu::Tensor;

fn main() -> jointslu::Result<()> {
    // five tokens, three intents
    let probs = Tensor::new(
        vec![5, 3],
        vec![
            0.9, 0.2, 0.6, //
            0.8, 0.1, 0.7, //
            0.7, 0.4, 0.3, //
            0.2, 0.9, 0.6, //
            0.1, 0.8, 0.4,
        ],
    )?;
    let v = vote(&probs, VotingConfig::default())?;
    println!("voted intents {:?} (fallback: {})", v.intents, v.fallback);

    let strict = vote(&probs, VotingConfig { threshold: 0.95 })?;
    println!("threshold 0.95: {:?} (fallback: {})", strict.intents, strict.fallback);

    let g = GlobalGraph::build(5, &v.intents, DEFAULT_WINDOW)?;
    for (i, adj) in g.neighbors.iter().enumerate() {
        let kind = if g.is_slot(i) { "slot  " } else { "intent" };
        println!("{kind} node {i}: {adj:?}");
    }
    assert_eq!(g.edge_kind(0, 5), Some(EdgeKind::IntentSlot));
    Ok(())
}
