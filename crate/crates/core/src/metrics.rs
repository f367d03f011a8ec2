//! Slot F1, intent accuracy and overall (semantic frame) accuracy.

use crate::corpus::{extract_chunks, Chunk, Utterance};
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;

/// Micro-averaged chunk precision, recall and F1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ChunkScore {
    pub correct: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl ChunkScore {
    pub fn add(&mut self, gold: &[Chunk], pred: &[Chunk]) {
        let g: BTreeSet<&Chunk> = gold.iter().collect();
        let p: BTreeSet<&Chunk> = pred.iter().collect();
        self.correct += g.intersection(&p).count();
        self.predicted += p.len();
        self.gold += g.len();
    }

    pub fn precision(&self) -> f64 {
        ratio(self.correct, self.predicted)
    }

    pub fn recall(&self) -> f64 {
        ratio(self.correct, self.gold)
    }

    /// 1.0 when there are neither gold nor predicted chunks.
    pub fn f1(&self) -> f64 {
        if self.gold == 0 && self.predicted == 0 {
            return 1.0;
        }
        let (p, r) = (self.precision(), self.recall());
        if p + r == 0.0 {
            0.0
        } else {
            2.0 * p * r / (p + r)
        }
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// Chunk F1 over aligned gold and predicted tag sequences.
pub fn slot_f1<S: AsRef<str>>(gold: &[Vec<S>], pred: &[Vec<S>]) -> Result<ChunkScore> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold vs {} predicted sequences",
            gold.len(),
            pred.len()
        )));
    }
    let mut score = ChunkScore::default();
    for (g, p) in gold.iter().zip(pred) {
        if g.len() != p.len() {
            return Err(Error::Contract(format!(
                "tag sequences of length {} and {}",
                g.len(),
                p.len()
            )));
        }
        score.add(&extract_chunks(g)?, &extract_chunks(p)?);
    }
    Ok(score)
}

/// One utterance whose frame was not fully correct.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub index: usize,
    pub tokens: Vec<String>,
    pub gold_tags: Vec<String>,
    pub pred_tags: Vec<String>,
    pub gold_intents: Vec<String>,
    pub pred_intents: Vec<String>,
    pub intent_correct: bool,
    pub slots_correct: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub slot_f1: f64,
    pub slot_precision: f64,
    pub slot_recall: f64,
    pub intent_acc: f64,
    pub overall_acc: f64,
    pub slot_sentence_acc: f64,
    pub utterances: usize,
    pub errors: Vec<ErrorRecord>,
}

/// Scores predictions against gold. Both slices hold the same utterances
/// in the same order; predicted utterances carry predicted tags and
/// intents.
pub fn evaluate_predictions(gold: &[Utterance], pred: &[Utterance]) -> Result<EvalReport> {
    if gold.len() != pred.len() {
        return Err(Error::Contract(format!(
            "{} gold vs {} predicted utterances",
            gold.len(),
            pred.len()
        )));
    }
    let mut score = ChunkScore::default();
    let (mut intent_ok, mut slots_ok, mut both_ok) = (0usize, 0usize, 0usize);
    let mut errors = Vec::new();
    for (index, (g, p)) in gold.iter().zip(pred).enumerate() {
        if g.tokens != p.tokens {
            return Err(Error::Contract(format!(
                "utterance {index}: predicted tokens differ from gold"
            )));
        }
        score.add(&extract_chunks(&g.slot_tags)?, &extract_chunks(&p.slot_tags)?);
        let ic = g.intent_set() == p.intent_set();
        let sc = g.slot_tags == p.slot_tags;
        intent_ok += usize::from(ic);
        slots_ok += usize::from(sc);
        both_ok += usize::from(ic && sc);
        if !(ic && sc) {
            errors.push(ErrorRecord {
                index,
                tokens: g.tokens.clone(),
                gold_tags: g.slot_tags.clone(),
                pred_tags: p.slot_tags.clone(),
                gold_intents: g.intents.clone(),
                pred_intents: p.intents.clone(),
                intent_correct: ic,
                slots_correct: sc,
            });
        }
    }
    let n = gold.len();
    Ok(EvalReport {
        slot_f1: score.f1(),
        slot_precision: score.precision(),
        slot_recall: score.recall(),
        intent_acc: ratio(intent_ok, n),
        overall_acc: ratio(both_ok, n),
        slot_sentence_acc: ratio(slots_ok, n),
        utterances: n,
        errors,
    })
}
