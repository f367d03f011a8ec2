//! Saves a trained model directory, loads it back and labels raw token
//! sequences.
//!
//! `cargo run --release --example predict`

use jointslu::artifacts::ModelArtifacts;
use jointslu::config::TrainConfig;
use jointslu::corpus::{format_dataset, Utterance};
use jointslu::synthetic;
use jointslu::train::Trainer;

fn main() -> jointslu::Result<()> {
    let data = synthetic::corpus(64, 9, 2)?;
    let cfg = TrainConfig::tiny();
    let mut trainer = Trainer::new(cfg.clone(), &data)?;
    for _ in 0..10 {
        trainer.train_epoch()?;
    }
    let dir = std::env::temp_dir().join("jointslu-predict-example");
    ModelArtifacts::save(&dir, &cfg, &trainer.vocab, &trainer.store, Some(&trainer.snapshot))?;
    let model = ModelArtifacts::load(&dir)?;

    let inputs = ["play some jazz", "weather in paris tomorrow and play adele"]
        .iter()
        .map(|s| {
            let tokens: Vec<String> = s.split_whitespace().map(String::from).collect();
            let tags = vec!["O".to_string(); tokens.len()];
            Utterance::new(tokens, tags, vec!["?".into()])
        })
        .collect::<jointslu::Result<Vec<_>>>()?;
    print!("{}", format_dataset(&model.predict(&inputs)?));
    Ok(())
}
