//! Finite-difference check of the full training objective on a tiny model.
//!
//! `cargo run --release --example gradient_check -- [eps]`

use jointslu::config::TrainConfig;
use jointslu::gradcheck::{grad_check_params, DEFAULT_EPS};
use jointslu::synthetic;
use jointslu::train::Trainer;

fn main() -> jointslu::Result<()> {
    let eps = std::env::args().nth(1).map_or(DEFAULT_EPS, |s| s.parse().expect("step size"));
    let data = synthetic::corpus(3, 9, 4)?;
    let cfg = TrainConfig {
        embed_dim: 4,
        lstm_hidden: 2,
        decoder_hidden: 2,
        intent_head_dim: 3,
        heads: 2,
        dropout: 0.0,
        ..TrainConfig::default()
    };
    let trainer = Trainer::new(cfg, &data)?;
    println!("{} parameters", trainer.store.num_scalars());

    // a fixed positive draw per evaluation keeps the objective deterministic
    let check = grad_check_params(
        &trainer.store,
        |tape, store| {
            let mut t = Trainer::new(trainer.cfg.clone(), &data)?;
            t.store = store.clone();
            let (total, _) = t.batch_objective(tape, &[0, 1, 2], None)?;
            Ok(total)
        },
        eps,
    );
    println!(
        "max relative error {:.3e} over {} coordinates (worst: {}[{}], analytic {:.6e}, numeric {:.6e})",
        check.max_relative_error,
        check.coordinates,
        check.worst_param,
        check.worst_index,
        check.analytic,
        check.numeric
    );
    Ok(())
}
