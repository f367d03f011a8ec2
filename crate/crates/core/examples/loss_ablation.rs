//! Switches each auxiliary loss off in turn on one fixed batch and shows
//! that the objective drops by exactly that term.
//!
//! `cargo run --release --example loss_ablation`

use jointslu::config::{LossToggles, TrainConfig};
use jointslu::synthetic;
use jointslu::train::{LossTerms, Trainer};
use jointslu::Tape;

fn objective(toggles: LossToggles) -> jointslu::Result<LossTerms> {
    let data = synthetic::corpus(8, 9, 6)?;
    let cfg = TrainConfig {
        toggles,
        ..TrainConfig::tiny()
    };
    let mut t = Trainer::new(cfg, &data)?;
    let mut tape = Tape::new();
    let batch: Vec<usize> = (0..data.len()).collect();
    let (total, vars) = t.batch_objective(&mut tape, &batch, None)?;
    LossTerms::read(&tape, &vars, total)
}

fn main() -> jointslu::Result<()> {
    let full = objective(LossToggles::ALL)?;
    println!("{}", serde_json::to_string_pretty(&full)?);
    let names = ["cucl", "fucl", "scl", "wcl", "skl", "ikl"];
    let values = [full.cucl, full.fucl, full.scl, full.wcl, full.skl, full.ikl];
    for (i, name) in names.iter().enumerate() {
        let mut on = LossToggles::ALL;
        match i {
            0 => on.cucl = false,
            1 => on.fucl = false,
            2 => on.scl = false,
            3 => on.wcl = false,
            4 => on.skl = false,
            _ => on.ikl = false,
        }
        let without = objective(on)?;
        println!(
            "without {name:>4}: total {:.12}  drop {:.12}  term {:.12}",
            without.total,
            full.total - without.total,
            values[i]
        );
    }
    Ok(())
}
