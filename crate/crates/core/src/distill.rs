//! Self-distillation against the previous epoch's predictions.

use crate::autodiff::{Tape, Var};
use crate::corpus::Vocabulary;
use crate::error::{dim_err, Error, Result};
use crate::params::{load_tensors, save_tensors};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::path::Path;

pub const PROB_FLOOR: f64 = 1e-12;
const PREFIX: &str = "snapshot/";

/// `Σ p ln(p / q)` with `q` floored at [`PROB_FLOOR`] and `0 ln 0 = 0`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return dim_err("kl_divergence", format!("{} vs {} entries", p.len(), q.len()));
    }
    if p.iter().chain(q).any(|&v| v < 0.0 || v.is_nan()) {
        return Err(Error::Domain {
            op: "kl_divergence",
            detail: "negative probability".into(),
        });
    }
    Ok(p.iter()
        .zip(q)
        .filter(|(&pc, _)| pc > 0.0)
        .map(|(&pc, &qc)| pc * (pc / qc.max(PROB_FLOOR)).ln())
        .sum())
}

/// KL between Bernoulli variables with success probabilities `p` and `q`.
pub fn bernoulli_kl(p: f64, q: f64) -> Result<f64> {
    kl_divergence(&[p, 1.0 - p], &[q, 1.0 - q])
}

fn xlogx(x: f64) -> f64 {
    if x > 0.0 {
        x * x.ln()
    } else {
        0.0
    }
}

/// Per-example token distributions from one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictionSnapshot {
    pub epoch: usize,
    /// `[n x |slots|]` per example.
    pub slots: Vec<Tensor>,
    /// `[n x |intents|]` per example.
    pub intents: Vec<Tensor>,
}

impl PredictionSnapshot {
    /// The epoch-0 snapshot: one-hot gold slots and multi-hot gold intents.
    /// Labels unknown to `vocab` contribute all-zero rows.
    pub fn from_gold(data: &[crate::corpus::Utterance], vocab: &Vocabulary) -> Result<Self> {
        let mut slots = Vec::with_capacity(data.len());
        let mut intents = Vec::with_capacity(data.len());
        for u in data {
            let n = u.len();
            let mut s = Tensor::zeros(&[n, vocab.num_slots()]);
            for (t, tag) in u.slot_tags.iter().enumerate() {
                if let Some(id) = vocab.slot_id(tag) {
                    s.data_mut()[t * vocab.num_slots() + id] = 1.0;
                }
            }
            let mut hot = vec![0.0; vocab.num_intents()];
            for i in &u.intents {
                if let Some(id) = vocab.intent_id(i) {
                    hot[id] = 1.0;
                }
            }
            let rows: Vec<Vec<f64>> = (0..n).map(|_| hot.clone()).collect();
            slots.push(s);
            intents.push(Tensor::from_rows(&rows)?);
        }
        Ok(Self {
            epoch: 0,
            slots,
            intents,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    fn example(&self, i: usize) -> Result<(&Tensor, &Tensor)> {
        match (self.slots.get(i), self.intents.get(i)) {
            (Some(s), Some(t)) => Ok((s, t)),
            _ => Err(Error::Contract(format!(
                "example {i} missing from epoch-{} snapshot of {}",
                self.epoch,
                self.len()
            ))),
        }
    }

    pub fn to_named(&self) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        out.insert(format!("{PREFIX}epoch"), Tensor::scalar(self.epoch as f64));
        for (i, (s, t)) in self.slots.iter().zip(&self.intents).enumerate() {
            out.insert(format!("{PREFIX}slots/{i:08}"), s.clone());
            out.insert(format!("{PREFIX}intents/{i:08}"), t.clone());
        }
        out
    }

    pub fn from_named(named: &BTreeMap<String, Tensor>) -> Result<Self> {
        let epoch = named
            .get(&format!("{PREFIX}epoch"))
            .ok_or_else(|| Error::Checkpoint("snapshot has no epoch entry".into()))?
            .item()? as usize;
        let collect = |kind: &str| -> Vec<Tensor> {
            let p = format!("{PREFIX}{kind}/");
            named
                .range(p.clone()..)
                .take_while(|(k, _)| k.starts_with(&p))
                .map(|(_, v)| v.clone())
                .collect()
        };
        let slots = collect("slots");
        let intents = collect("intents");
        if slots.len() != intents.len() {
            return Err(Error::Checkpoint(format!(
                "snapshot has {} slot and {} intent entries",
                slots.len(),
                intents.len()
            )));
        }
        Ok(Self {
            epoch,
            slots,
            intents,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_tensors(path, &self.to_named())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_named(&load_tensors(path)?)
    }

    /// Mean over tokens of `KL(snapshot ∥ current)` for example `i`, where
    /// `current` is `[n x |slots|]` on the tape.
    pub fn slot_kl(&self, tape: &mut Tape, i: usize, current: Var) -> Result<Var> {
        let (p, _) = self.example(i)?;
        if p.shape() != tape.shape(current) {
            return dim_err(
                "slot_kl",
                format!("snapshot {:?} vs current {:?}", p.shape(), tape.shape(current)),
            );
        }
        let n = p.shape()[0] as f64;
        let entropy: f64 = p.data().iter().map(|&v| xlogx(v)).sum::<f64>() / n;
        let q = tape.clamp(current, PROB_FLOOR, f64::INFINITY)?;
        let lq = tape.log(q)?;
        let pc = tape.constant(p.clone());
        let cross = tape.mul(pc, lq)?;
        let cross = tape.sum(cross)?;
        let cross = tape.scale(cross, -1.0 / n)?;
        tape.add_scalar(cross, entropy)
    }

    /// Mean over tokens of the per-dimension Bernoulli KL summed over
    /// intents, for example `i`.
    pub fn intent_kl(&self, tape: &mut Tape, i: usize, current: Var) -> Result<Var> {
        let (_, p) = self.example(i)?;
        if p.shape() != tape.shape(current) {
            return dim_err(
                "intent_kl",
                format!("snapshot {:?} vs current {:?}", p.shape(), tape.shape(current)),
            );
        }
        let n = p.shape()[0] as f64;
        let entropy: f64 = p
            .data()
            .iter()
            .map(|&v| xlogx(v) + xlogx(1.0 - v))
            .sum::<f64>()
            / n;
        let q = tape.clamp(current, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
        let lq = tape.log(q)?;
        let nq = tape.neg(q)?;
        let one_minus = tape.add_scalar(nq, 1.0)?;
        let lnq = tape.log(one_minus)?;
        let pc = tape.constant(p.clone());
        let qc = tape.constant(p.map(|v| 1.0 - v));
        let a = tape.mul(pc, lq)?;
        let b = tape.mul(qc, lnq)?;
        let cross = tape.add(a, b)?;
        let cross = tape.sum(cross)?;
        let cross = tape.scale(cross, -1.0 / n)?;
        tape.add_scalar(cross, entropy)
    }
}

/// Mean over a batch of per-example distillation terms.
pub fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let all = tape.concat(terms, 0)?;
    tape.mean_all(all)
}

/// Collects one epoch's training-pass predictions for the next snapshot.
#[derive(Debug)]
pub struct SnapshotBuilder {
    slots: Vec<Option<Tensor>>,
    intents: Vec<Option<Tensor>>,
}

impl SnapshotBuilder {
    pub fn new(len: usize) -> Self {
        Self {
            slots: vec![None; len],
            intents: vec![None; len],
        }
    }

    pub fn record(&mut self, i: usize, slots: Tensor, intents: Tensor) -> Result<()> {
        if i >= self.slots.len() {
            return Err(Error::Index {
                op: "snapshot_record",
                index: i,
                bound: self.slots.len(),
            });
        }
        self.slots[i] = Some(slots);
        self.intents[i] = Some(intents);
        Ok(())
    }

    /// Replaces the snapshot wholesale. Examples not seen this epoch keep
    /// their previous entry.
    pub fn finish(self, previous: &PredictionSnapshot) -> Result<PredictionSnapshot> {
        if previous.len() != self.slots.len() {
            return Err(Error::Contract(format!(
                "snapshot of {} examples updated with {}",
                previous.len(),
                self.slots.len()
            )));
        }
        let slots = self
            .slots
            .into_iter()
            .zip(&previous.slots)
            .map(|(new, old)| new.unwrap_or_else(|| old.clone()))
            .collect();
        let intents = self
            .intents
            .into_iter()
            .zip(&previous.intents)
            .map(|(new, old)| new.unwrap_or_else(|| old.clone()))
            .collect();
        Ok(PredictionSnapshot {
            epoch: previous.epoch + 1,
            slots,
            intents,
        })
    }
}
