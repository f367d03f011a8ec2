//! Scores predictions against gold and lists the utterances that failed.
//!
//! `cargo run --release --example evaluate`

use jointslu::config::TrainConfig;
use jointslu::synthetic;
use jointslu::train::Trainer;

fn main() -> jointslu::Result<()> {
    let data = synthetic::corpus(60, 9, 1)?;
    let (train, test) = data.split_at(48);
    let mut trainer = Trainer::new(TrainConfig::tiny(), train)?;
    for _ in 0..10 {
        trainer.train_epoch()?;
    }
    let (report, loss) = trainer.evaluate(test)?;
    println!("task loss       {loss:.4}");
    println!("slot F1         {:.4} (P {:.4}, R {:.4})", report.slot_f1, report.slot_precision, report.slot_recall);
    println!("intent accuracy {:.4}", report.intent_acc);
    println!("overall         {:.4}", report.overall_acc);
    for e in report.errors.iter().take(5) {
        println!("\n#{} {}", e.index, e.tokens.join(" "));
        println!("  gold {} | {}", e.gold_intents.join("#"), e.gold_tags.join(" "));
        println!("  pred {} | {}", e.pred_intents.join("#"), e.pred_tags.join(" "));
    }
    Ok(())
}
