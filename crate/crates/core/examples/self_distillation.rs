//! The prediction snapshot behind the self-distillation terms: gold one-hot
//! before the first epoch, then the previous epoch's training predictions.
//!
//! `cargo run --release --example self_distillation`

use jointslu::config::TrainConfig;
use jointslu::synthetic;
use jointslu::train::Trainer;
use jointslu::Tape;

fn main() -> jointslu::Result<()> {
    let data = synthetic::corpus(32, 9, 3)?;
    let mut t = Trainer::new(TrainConfig::tiny(), &data)?;
    for epoch in 0..4 {
        let mut tape = Tape::new();
        let (_, vars) = t.batch_objective(&mut tape, &[0, 1, 2, 3], None)?;
        let skl = vars.skl.map(|v| tape.scalar_value(v)).transpose()?;
        let ikl = vars.ikl.map(|v| tape.scalar_value(v)).transpose()?;
        let first = &t.snapshot;
        println!(
            "snapshot epoch {epoch}: L_SKL {:.5} L_IKL {:.5} (example 0 first row {:?})",
            skl.unwrap_or(0.0),
            ikl.unwrap_or(0.0),
            first.slots[0].row(0).iter().map(|p| format!("{p:.2}")).collect::<Vec<_>>()
        );
        t.train_epoch()?;
    }
    Ok(())
}
