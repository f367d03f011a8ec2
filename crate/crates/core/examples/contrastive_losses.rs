//! The four contrastive losses on encoder outputs of a random model, and
//! their gradients flowing back to the encoder.
//!
//! `cargo run --example contrastive_losses`

use jointslu::augment::{build_batch_pairs, generate_positive};
use jointslu::config::TrainConfig;
use jointslu::contrastive::{level_losses, RepresentationSet};
use jointslu::corpus::Utterance;
use jointslu::nn::Mode;
use jointslu::synthetic;
use jointslu::train::Trainer;
use jointslu::Tape;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> jointslu::Result<()> {
    let data = synthetic::corpus(6, 9, 3)?;
    let t = Trainer::new(TrainConfig::tiny(), &data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let positives = data
        .iter()
        .map(|u| generate_positive(u, &t.dictionary, &mut rng))
        .collect::<jointslu::Result<Vec<_>>>()?;
    let pairs = build_batch_pairs(&data, &positives, &mut rng, t.cfg.negatives)?;

    let mut tape = Tape::new();
    let encode = |tape: &mut Tape, u: &Utterance| {
        let ids = t.vocab.encode(&u.tokens);
        t.model.encode(tape, &t.store, &ids, &mut Mode::Eval).map(|o| o.e)
    };
    let base_e = data.iter().map(|u| encode(&mut tape, u)).collect::<jointslu::Result<Vec<_>>>()?;
    let pos_e = positives
        .iter()
        .map(|p| encode(&mut tape, &p.utterance))
        .collect::<jointslu::Result<Vec<_>>>()?;
    let spans = |us: Vec<&Utterance>| us.into_iter().map(Utterance::spans).collect::<jointslu::Result<Vec<_>>>();
    let reps = RepresentationSet::build(
        &mut tape,
        &base_e,
        &pos_e,
        &spans(data.iter().collect())?,
        &spans(positives.iter().map(|p| &p.utterance).collect())?,
    )?;
    let l = level_losses(&mut tape, &reps, &pairs, &t.cfg.similarity(), t.cfg.toggles.levels())?;
    for (name, v) in [("coarse", l.coarse), ("fine", l.fine), ("slot", l.slot), ("word", l.word)] {
        println!("{name:>6} {:.6}", tape.scalar_value(v)?);
    }
    let total = tape.add(l.coarse, l.fine)?;
    let total = tape.add(total, l.slot)?;
    let total = tape.add(total, l.word)?;
    let mut store = t.store.clone();
    tape.backward_into(total, &mut store)?;
    // the losses only see the encoder, so decoder parameters stay at zero
    for (_, p) in store.iter() {
        let norm = p.grad.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 0.0 {
            println!("  grad |{}| = {norm:.6}", p.name);
        }
    }
    Ok(())
}
