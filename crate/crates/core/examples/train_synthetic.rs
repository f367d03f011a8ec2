//! Trains on the built-in synthetic corpus with early stopping and prints
//! the per-epoch log.
//!
//! `cargo run --release --example train_synthetic -- [epochs]`

use jointslu::config::TrainConfig;
use jointslu::synthetic;
use jointslu::train::Trainer;

fn main() -> jointslu::Result<()> {
    let epochs = std::env::args().nth(1).map_or(20, |s| s.parse().expect("epoch count"));
    let data = synthetic::corpus(120, 9, 0)?;
    let (train, dev) = data.split_at(96);
    let cfg = TrainConfig {
        max_epochs: epochs,
        ..TrainConfig::tiny()
    };
    let mut trainer = Trainer::new(cfg, train)?;
    let outcome = trainer.fit(dev, |line| {
        println!(
            "epoch {:>3}  train {:.4} (L_I {:.4}, L_S {:.4})  dev loss {:.4}  slot F1 {:.3}  intent {:.3}  overall {:.3}",
            line.epoch,
            line.train.total,
            line.train.intent,
            line.train.slot,
            line.dev_loss,
            line.dev_slot_f1,
            line.dev_intent_acc,
            line.dev_overall_acc
        );
        Ok(())
    })?;
    println!(
        "best epoch {} with dev overall accuracy {:.3}{}",
        outcome.best_epoch,
        outcome.best_dev_overall,
        if outcome.stopped_early { " (stopped early)" } else { "" }
    );
    Ok(())
}
