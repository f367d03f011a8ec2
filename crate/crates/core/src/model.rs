//! The joint model: shared encoder, voting intent decoder and graph slot
//! decoder.

use crate::autodiff::{Tape, Var};
use crate::corpus::Vocabulary;
use crate::encoder::{Encoder, EncoderConfig, EncoderOutput};
use crate::error::Result;
use crate::intent::{vote, IntentDecoder, Vote, VotingConfig};
use crate::nn::Mode;
use crate::params::ParamStore;
use crate::slot::{argmax_rows, GatActivation, SlotDecoder, SlotDecoderConfig};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    /// Hidden units per direction in the intent and slot BiLSTMs.
    pub decoder_hidden: usize,
    pub intent_head_dim: usize,
    pub gat_layers: usize,
    pub window: usize,
    pub gat_activation: GatActivation,
    pub voting: VotingConfig,
}

pub struct JointModel {
    pub cfg: ModelConfig,
    pub encoder: Encoder,
    pub intent: IntentDecoder,
    pub slot: SlotDecoder,
    pub num_intents: usize,
    pub num_slots: usize,
}

/// Everything one forward pass produces for one utterance.
#[derive(Clone, Debug)]
pub struct Forward {
    pub enc: EncoderOutput,
    /// `[n x |intents|]` token intent probabilities.
    pub intent_probs: Var,
    /// `[n x |slots|]` slot distributions.
    pub slot_probs: Var,
    pub vote: Vote,
}

/// Decoded output in id space.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Prediction {
    pub intents: Vec<usize>,
    pub slots: Vec<usize>,
    pub fallback: bool,
}

impl JointModel {
    /// Registers all parameters in `store`, in a fixed order.
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: ModelConfig,
        vocab: &Vocabulary,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.voting.validate()?;
        let num_intents = vocab.num_intents();
        let num_slots = vocab.num_slots();
        let encoder = Encoder::new(store, vocab.num_words(), cfg.encoder.clone(), rng)?;
        let d_e = cfg.encoder.output_dim();
        let intent = IntentDecoder::new(
            store,
            d_e,
            cfg.decoder_hidden,
            cfg.intent_head_dim,
            num_intents,
            rng,
        )?;
        let slot = SlotDecoder::new(
            store,
            &SlotDecoderConfig {
                input: d_e,
                lstm_hidden: cfg.decoder_hidden,
                num_intents,
                num_slots,
                gat_layers: cfg.gat_layers,
                window: cfg.window,
                activation: cfg.gat_activation,
            },
            rng,
        )?;
        Ok(Self {
            cfg,
            encoder,
            intent,
            slot,
            num_intents,
            num_slots,
        })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        self.encoder.encode(tape, store, ids, mode)
    }

    /// Full forward pass. The graph is built from the voted intent set.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        mode: &mut Mode,
    ) -> Result<Forward> {
        Ok(self.forward_batch(tape, store, &[ids], mode)?.remove(0))
    }

    /// Forward passes for several utterances at once. Each result equals
    /// the single-utterance pass up to floating-point reassociation.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[usize]],
        mode: &mut Mode,
    ) -> Result<Vec<Forward>> {
        let enc = self.encoder.encode_batch(tape, store, seqs, mode)?;
        let lens = enc.lens.clone();
        let ip = self.intent.forward_packed(tape, store, enc.e, &lens)?;
        let mut votes = Vec::with_capacity(lens.len());
        let all = tape.value(ip);
        for (&s, &l) in enc.starts.iter().zip(&lens) {
            votes.push(vote(&all.rows(s, l)?, self.cfg.voting)?);
        }
        let sets: Vec<Vec<usize>> = votes.iter().map(|v| v.intents.clone()).collect();
        let slot = self.slot.forward_batch(tape, store, enc.e, ip, &lens, &sets)?;
        let single = lens.len() == 1;
        let mut out = Vec::with_capacity(lens.len());
        for (i, vote) in votes.into_iter().enumerate() {
            let (s, l) = (enc.starts[i], lens[i]);
            let (intent_probs, slot_probs) = if single {
                (ip, slot.probs)
            } else {
                (tape.slice(ip, 0, s, l)?, tape.slice(slot.probs, 0, s, l)?)
            };
            out.push(Forward {
                enc: enc.utterance(tape, i)?,
                intent_probs,
                slot_probs,
                vote,
            });
        }
        Ok(out)
    }

    /// Inference without recording gradients.
    pub fn predict(&self, store: &ParamStore, ids: &[usize]) -> Result<Prediction> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        let f = self.forward(&mut tape, store, ids, &mut Mode::Eval)?;
        Ok(Prediction {
            slots: argmax_rows(tape.value(f.slot_probs))?,
            intents: f.vote.intents,
            fallback: f.vote.fallback,
        })
    }

    /// [`JointModel::predict`] for several utterances in one pass.
    pub fn predict_batch(&self, store: &ParamStore, seqs: &[&[usize]]) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        tape.set_recording(false);
        self.forward_batch(&mut tape, store, seqs, &mut Mode::Eval)?
            .into_iter()
            .map(|f| {
                Ok(Prediction {
                    slots: argmax_rows(tape.value(f.slot_probs))?,
                    intents: f.vote.intents,
                    fallback: f.vote.fallback,
                })
            })
            .collect()
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::corpus::Utterance;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny_config() -> ModelConfig {
        ModelConfig {
            encoder: EncoderConfig::new(4, 3, 2, 0.0).unwrap(),
            decoder_hidden: 3,
            intent_head_dim: 4,
            gat_layers: 2,
            window: 2,
            gat_activation: GatActivation::Sigmoid,
            voting: VotingConfig::default(),
        }
    }

    pub(crate) fn tiny_corpus() -> Vec<Utterance> {
        vec![
            Utterance::parse_parts("list flights to boston", "O O O B-city", "atis_flight").unwrap(),
            Utterance::parse_parts(
                "fare to new york and airline",
                "O O B-city I-city O O",
                "atis_airfare#atis_airline",
            )
            .unwrap(),
            Utterance::parse_parts("show delta flights", "O B-airline O", "atis_flight").unwrap(),
        ]
    }

    #[test]
    fn forward_shapes() {
        let data = tiny_corpus();
        let vocab = Vocabulary::build(&data).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = JointModel::new(&mut store, tiny_config(), &vocab, &mut rng).unwrap();
        let ids = vocab.encode(&data[1].tokens);
        let mut tape = Tape::new();
        let f = model.forward(&mut tape, &store, &ids, &mut Mode::Eval).unwrap();
        assert_eq!(tape.shape(f.enc.e), &[6, 12]);
        assert_eq!(tape.shape(f.intent_probs), &[6, vocab.num_intents()]);
        assert_eq!(tape.shape(f.slot_probs), &[6, vocab.num_slots()]);
        let p = model.predict(&store, &ids).unwrap();
        assert_eq!(p.slots.len(), 6);
        assert!(!p.intents.is_empty());
    }

    #[test]
    fn batch_matches_single_utterances() {
        let data = tiny_corpus();
        let vocab = Vocabulary::build(&data).unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let model = JointModel::new(&mut store, tiny_config(), &vocab, &mut rng).unwrap();
        let ids: Vec<Vec<usize>> = data.iter().map(|u| vocab.encode(&u.tokens)).collect();
        let seqs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        let mut tape = Tape::new();
        let batch = model.forward_batch(&mut tape, &store, &seqs, &mut Mode::Eval).unwrap();
        for (f, ids) in batch.iter().zip(&ids) {
            let mut t1 = Tape::new();
            let one = model.forward(&mut t1, &store, ids, &mut Mode::Eval).unwrap();
            assert_eq!(f.vote, one.vote);
            for (a, b) in [(f.enc.e, one.enc.e), (f.intent_probs, one.intent_probs), (f.slot_probs, one.slot_probs)] {
                let (x, y) = (tape.value(a), t1.value(b));
                assert_eq!(x.shape(), y.shape());
                assert!(x.data().iter().zip(y.data()).all(|(p, q)| (p - q).abs() < 1e-12));
            }
        }
        let preds = model.predict_batch(&store, &seqs).unwrap();
        for (p, ids) in preds.iter().zip(&ids) {
            assert_eq!(p, &model.predict(&store, ids).unwrap());
        }
    }
}
