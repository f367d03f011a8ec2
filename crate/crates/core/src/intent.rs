//! Token-level multi-label intent decoder and utterance-level voting.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Linear};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VotingConfig {
    pub threshold: f64,
}

impl Default for VotingConfig {
    fn default() -> Self {
        Self { threshold: 0.5 }
    }
}

impl VotingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config(format!(
                "vote threshold {} not in (0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }
}

/// Outcome of voting over a token intent matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vote {
    pub intents: Vec<usize>,
    pub fallback: bool,
}

/// Intents above `threshold` at a strict majority of tokens, ascending.
/// May be empty.
pub fn vote_raw(probs: &Tensor, cfg: VotingConfig) -> Result<Vec<usize>> {
    let (n, k) = probs.dims2()?;
    let mut counts = vec![0usize; k];
    for t in 0..n {
        for (j, &p) in probs.row(t).iter().enumerate() {
            if p > cfg.threshold {
                counts[j] += 1;
            }
        }
    }
    Ok((0..k).filter(|&j| 2 * counts[j] > n).collect())
}

/// [`vote_raw`], falling back to the intent with the highest mean
/// probability (lowest id on ties) when no intent wins a majority.
pub fn vote(probs: &Tensor, cfg: VotingConfig) -> Result<Vote> {
    let intents = vote_raw(probs, cfg)?;
    if !intents.is_empty() {
        return Ok(Vote {
            intents,
            fallback: false,
        });
    }
    let (n, k) = probs.dims2()?;
    let mut best = 0;
    let mut best_mean = f64::NEG_INFINITY;
    for j in 0..k {
        let mean = (0..n).map(|t| probs.get2(t, j)).sum::<f64>() / n as f64;
        if mean > best_mean {
            best_mean = mean;
            best = j;
        }
    }
    log::debug!("no intent won a majority of {n} tokens; falling back to intent {best}");
    Ok(Vote {
        intents: vec![best],
        fallback: true,
    })
}

/// `I_t = σ(W_I · LeakyReLU(W_h h_t + b_h) + b_I)` over an intent BiLSTM.
#[derive(Clone, Debug)]
pub struct IntentDecoder {
    pub lstm: BiLstm,
    pub hidden: Linear,
    pub out: Linear,
}

pub const INTENT_LEAKY_SLOPE: f64 = 0.01;

impl IntentDecoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        input: usize,
        lstm_hidden: usize,
        head_dim: usize,
        num_intents: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            lstm: BiLstm::new(store, "intent.lstm", input, lstm_hidden, rng)?,
            hidden: Linear::new(store, "intent.w_h", 2 * lstm_hidden, head_dim, true, rng)?,
            out: Linear::new(store, "intent.w_i", head_dim, num_intents, true, rng)?,
        })
    }

    /// Sigmoid head applied to arbitrary `[n x 2h]` states.
    pub fn head(&self, tape: &mut Tape, store: &ParamStore, h: Var) -> Result<Var> {
        let z = self.hidden.forward(tape, store, h)?;
        let z = tape.leaky_relu(z, INTENT_LEAKY_SLOPE)?;
        let logits = self.out.forward(tape, store, z)?;
        tape.sigmoid(logits)
    }

    /// Token intent probabilities `[n x |intents|]` from encoder rows.
    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, e: Var) -> Result<Var> {
        let n = tape.shape(e)[0];
        self.forward_packed(tape, store, e, &[n])
    }

    /// [`IntentDecoder::forward`] for utterances stacked row-wise.
    pub fn forward_packed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        lens: &[usize],
    ) -> Result<Var> {
        let h = self.lstm.forward_packed(tape, store, e, lens)?;
        self.head(tape, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{grad_check_params, DEFAULT_EPS};
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn matrix(n: usize, rows: &[f64]) -> Tensor {
        Tensor::new(vec![n, rows.len() / n], rows.to_vec()).unwrap()
    }

    #[test]
    fn strict_majority() {
        let five = matrix(5, &[0.9, 0.9, 0.9, 0.1, 0.2]);
        assert_eq!(vote_raw(&five, VotingConfig::default()).unwrap(), vec![0]);
        let four = matrix(4, &[0.9, 0.9, 0.1, 0.2]);
        assert!(vote_raw(&four, VotingConfig::default()).unwrap().is_empty());
        let at = matrix(1, &[0.5]);
        assert!(vote_raw(&at, VotingConfig::default()).unwrap().is_empty());
    }

    #[test]
    fn fallback_picks_highest_mean() {
        let probs = matrix(2, &[0.1, 0.4, 0.3, 0.2, 0.45, 0.1]);
        let v = vote(&probs, VotingConfig::default()).unwrap();
        assert_eq!(v.intents, vec![1]);
        assert!(v.fallback);
    }

    fn counting_oracle(rows: &[Vec<f64>], threshold: f64) -> Vec<usize> {
        let mut out = Vec::new();
        for j in 0..rows[0].len() {
            let mut above = 0.0;
            for r in rows {
                if r[j] > threshold {
                    above += 1.0;
                }
            }
            if above > rows.len() as f64 / 2.0 {
                out.push(j);
            }
        }
        out
    }

    #[test]
    fn vote_matches_counting_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let n = rng.gen_range(1..=7);
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..5).map(|_| rng.gen::<f64>()).collect())
                .collect();
            let t = Tensor::from_rows(&rows).unwrap();
            assert_eq!(
                vote_raw(&t, VotingConfig::default()).unwrap(),
                counting_oracle(&rows, 0.5)
            );
            assert!(!vote(&t, VotingConfig::default()).unwrap().intents.is_empty());
        }
    }

    proptest! {
        #[test]
        fn vote_ignores_token_order(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 4), 1..8),
            seed in any::<u64>(),
        ) {
            use rand::seq::SliceRandom;
            let mut shuffled = rows.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = vote(&Tensor::from_rows(&rows).unwrap(), VotingConfig::default()).unwrap();
            let b = vote(&Tensor::from_rows(&shuffled).unwrap(), VotingConfig::default()).unwrap();
            prop_assert_eq!(a, b);
        }

        #[test]
        fn raising_threshold_never_adds(
            rows in prop::collection::vec(prop::collection::vec(0.0f64..1.0, 5), 1..8),
            lo in 0.01f64..0.98,
            gap in 0.0f64..0.5,
        ) {
            let hi = (lo + gap).min(0.99);
            let t = Tensor::from_rows(&rows).unwrap();
            let low = vote_raw(&t, VotingConfig { threshold: lo }).unwrap();
            let high = vote_raw(&t, VotingConfig { threshold: hi }).unwrap();
            prop_assert!(high.iter().all(|j| low.contains(j)));
        }
    }

    fn decoder(store: &mut ParamStore) -> IntentDecoder {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        IntentDecoder::new(store, 4, 3, 5, 3, &mut rng).unwrap()
    }

    #[test]
    fn zero_head_gives_half() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        for l in [&dec.hidden, &dec.out] {
            store.value_mut(l.weight).data_mut().fill(0.0);
        }
        let mut tape = Tape::new();
        let e = tape.constant(Tensor::filled(&[3, 4], 0.7));
        let p = dec.forward(&mut tape, &store, e).unwrap();
        assert_eq!(tape.shape(p), &[3, 3]);
        assert!(tape.value(p).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn probabilities_in_open_unit_interval() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut tape = Tape::new();
        let e = tape.constant(
            Tensor::new(vec![6, 4], (0..24).map(|_| rng.gen_range(-3.0..3.0)).collect()).unwrap(),
        );
        let p = dec.forward(&mut tape, &store, e).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn head_gradient_matches_finite_differences() {
        let mut store = ParamStore::new();
        let dec = decoder(&mut store);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let e = Tensor::new(vec![4, 4], (0..16).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let probe = Tensor::new(vec![4, 3], (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let check = grad_check_params(
            &store,
            |tape, s| {
                let x = tape.constant(e.clone());
                let p = dec.forward(tape, s, x)?;
                let w = tape.constant(probe.clone());
                let y = tape.mul(p, w)?;
                tape.sum(y)
            },
            DEFAULT_EPS,
        );
        assert!(check.max_relative_error < 1e-4, "{check:?}");
    }
}
