//! Positive examples by slot substitution, and the contrastive pairs built
//! from one batch.
//!
//! `cargo run --example augmentation`

use jointslu::augment::{build_batch_pairs, generate_positive};
use jointslu::corpus::SlotDictionary;
use jointslu::synthetic;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> jointslu::Result<()> {
    let data = synthetic::corpus(40, 9, 2)?;
    let dict = SlotDictionary::from_utterances(&data)?;
    for (ty, phrases) in dict.iter() {
        println!("{ty:>8}: {} phrases", phrases.len());
    }

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let batch = &data[..4];
    let positives = batch
        .iter()
        .map(|u| generate_positive(u, &dict, &mut rng))
        .collect::<jointslu::Result<Vec<_>>>()?;
    println!();
    for p in &positives {
        println!("{}  [{}]", p.base.tokens.join(" "), p.base.intents.join("#"));
        println!("  -> {}", p.utterance.tokens.join(" "));
    }

    let pairs = build_batch_pairs(batch, &positives, &mut rng, 8)?;
    println!(
        "\n{} coarse, {} fine, {} slot, {} word pairs",
        pairs.coarse_utt.len(),
        pairs.fine_utt.len(),
        pairs.slot.len(),
        pairs.word.len()
    );
    for line in pairs.manifest_lines()?.iter().take(6) {
        println!("{line}");
    }
    Ok(())
}
