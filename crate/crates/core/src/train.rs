//! Task losses, the total training objective, and the training loop.

use crate::augment::{build_batch_pairs, generate_positive};
use crate::autodiff::{Tape, Var};
use crate::config::{LossToggles, LossWeights, TrainConfig};
use crate::contrastive::{level_losses, RepresentationSet};
use crate::corpus::{SlotDictionary, Utterance, Vocabulary};
use crate::distill::{batch_mean, PredictionSnapshot, SnapshotBuilder, PROB_FLOOR};
use crate::error::{Error, Result};
use crate::metrics::{evaluate_predictions, EvalReport};
use crate::model::JointModel;
use crate::nn::Mode;
use crate::optim::Adam;
use crate::params::ParamStore;
use crate::slot::argmax_rows;
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// An utterance with its label ids resolved against a vocabulary. Labels
/// unseen in training resolve to `None` / no hot entry and are left out of
/// the task losses.
#[derive(Clone, Debug)]
pub struct Example {
    pub utterance: Utterance,
    pub ids: Vec<usize>,
    pub slot_ids: Vec<Option<usize>>,
    pub intent_hot: Vec<f64>,
}

impl Example {
    pub fn new(utterance: &Utterance, vocab: &Vocabulary) -> Self {
        let mut intent_hot = vec![0.0; vocab.num_intents()];
        for i in &utterance.intents {
            if let Some(id) = vocab.intent_id(i) {
                intent_hot[id] = 1.0;
            }
        }
        Self {
            ids: vocab.encode(&utterance.tokens),
            slot_ids: utterance.slot_tags.iter().map(|t| vocab.slot_id(t)).collect(),
            intent_hot,
            utterance: utterance.clone(),
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Unnormalised task-loss sums for one utterance, with their divisors.
#[derive(Clone, Copy, Debug)]
pub struct TaskSums {
    pub intent: Var,
    pub intent_count: usize,
    pub slot: Var,
    pub slot_count: usize,
}

/// Token-level BCE against the broadcast multi-hot gold intents, and
/// label-smoothed cross-entropy against the gold slots, both summed.
pub fn task_sums(
    tape: &mut Tape,
    intent_probs: Var,
    slot_probs: Var,
    ex: &Example,
    smoothing: f64,
) -> Result<TaskSums> {
    let n = ex.len();
    let k = ex.intent_hot.len();
    let v = tape.shape(slot_probs)[1];
    if tape.shape(intent_probs) != [n, k] || tape.shape(slot_probs)[0] != n {
        return Err(Error::Dimension {
            op: "task_losses",
            detail: format!(
                "intent {:?} / slot {:?} for {n} tokens",
                tape.shape(intent_probs),
                tape.shape(slot_probs)
            ),
        });
    }
    let y = Tensor::new(vec![n, k], ex.intent_hot.repeat(n))?;
    let q = tape.clamp(intent_probs, PROB_FLOOR, 1.0 - PROB_FLOOR)?;
    let lq = tape.log(q)?;
    let nq = tape.neg(q)?;
    let rest = tape.add_scalar(nq, 1.0)?;
    let lrest = tape.log(rest)?;
    let yc = tape.constant(y.map(|t| -t));
    let ync = tape.constant(y.map(|t| t - 1.0));
    let a = tape.mul(yc, lq)?;
    let b = tape.mul(ync, lrest)?;
    let bce = tape.add(a, b)?;
    let intent = tape.sum(bce)?;

    let mut target = Tensor::zeros(&[n, v]);
    let mut slot_count = 0;
    for (t, gold) in ex.slot_ids.iter().enumerate() {
        let Some(g) = *gold else { continue };
        slot_count += 1;
        let row = &mut target.data_mut()[t * v..(t + 1) * v];
        row.fill(-smoothing / v as f64);
        row[g] -= 1.0 - smoothing;
    }
    let p = tape.clamp(slot_probs, PROB_FLOOR, f64::INFINITY)?;
    let lp = tape.log(p)?;
    let tc = tape.constant(target);
    let ce = tape.mul(tc, lp)?;
    let slot = tape.sum(ce)?;
    Ok(TaskSums {
        intent,
        intent_count: n * k,
        slot,
        slot_count,
    })
}

/// `(L_I, L_S)` over a group of utterances: means over all tokens (and
/// intent dimensions) in the group.
pub fn task_losses(tape: &mut Tape, sums: &[TaskSums]) -> Result<(Var, Var)> {
    let mean = |tape: &mut Tape, vars: Vec<Var>, count: usize| -> Result<Var> {
        if count == 0 || vars.is_empty() {
            return Ok(tape.constant(Tensor::scalar(0.0)));
        }
        let all = tape.concat(&vars, 0)?;
        let s = tape.sum(all)?;
        tape.scale(s, 1.0 / count as f64)
    };
    let li = mean(
        tape,
        sums.iter().map(|s| s.intent).collect(),
        sums.iter().map(|s| s.intent_count).sum(),
    )?;
    let ls = mean(
        tape,
        sums.iter().map(|s| s.slot).collect(),
        sums.iter().map(|s| s.slot_count).sum(),
    )?;
    Ok((li, ls))
}

/// Handles to every loss term of one batch; disabled terms are `None`.
#[derive(Clone, Copy, Debug)]
pub struct TermVars {
    pub intent: Var,
    pub slot: Var,
    pub cucl: Option<Var>,
    pub fucl: Option<Var>,
    pub scl: Option<Var>,
    pub wcl: Option<Var>,
    pub skl: Option<Var>,
    pub ikl: Option<Var>,
}

impl TermVars {
    fn aux(&self, w: &LossWeights) -> [(Option<Var>, f64); 6] {
        [
            (self.cucl, w.cucl),
            (self.fucl, w.fucl),
            (self.scl, w.scl),
            (self.wcl, w.wcl),
            (self.skl, w.skl),
            (self.ikl, w.ikl),
        ]
    }
}

/// Scalar values of the loss terms; disabled terms are 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub intent: f64,
    pub slot: f64,
    pub cucl: f64,
    pub fucl: f64,
    pub scl: f64,
    pub wcl: f64,
    pub skl: f64,
    pub ikl: f64,
    pub total: f64,
}

impl LossTerms {
    pub fn read(tape: &Tape, vars: &TermVars, total: Var) -> Result<Self> {
        let get = |v: Option<Var>| v.map_or(Ok(0.0), |v| tape.scalar_value(v));
        Ok(Self {
            intent: tape.scalar_value(vars.intent)?,
            slot: tape.scalar_value(vars.slot)?,
            cucl: get(vars.cucl)?,
            fucl: get(vars.fucl)?,
            scl: get(vars.scl)?,
            wcl: get(vars.wcl)?,
            skl: get(vars.skl)?,
            ikl: get(vars.ikl)?,
            total: tape.scalar_value(total)?,
        })
    }

    /// The objective recomputed from the stored terms, in the same order
    /// as [`total_loss`].
    pub fn weighted_sum(&self, on: &LossToggles, w: &LossWeights) -> f64 {
        let mut s = self.intent + self.slot;
        for (enabled, v, wt) in [
            (on.cucl, self.cucl, w.cucl),
            (on.fucl, self.fucl, w.fucl),
            (on.scl, self.scl, w.scl),
            (on.wcl, self.wcl, w.wcl),
            (on.skl, self.skl, w.skl),
            (on.ikl, self.ikl, w.ikl),
        ] {
            if enabled {
                s += if wt == 1.0 { v } else { wt * v };
            }
        }
        s
    }

    pub fn is_finite(&self) -> bool {
        [
            self.intent, self.slot, self.cucl, self.fucl, self.scl, self.wcl, self.skl, self.ikl,
            self.total,
        ]
        .iter()
        .all(|v| v.is_finite())
    }

    fn accumulate(&mut self, other: &Self) {
        self.intent += other.intent;
        self.slot += other.slot;
        self.cucl += other.cucl;
        self.fucl += other.fucl;
        self.scl += other.scl;
        self.wcl += other.wcl;
        self.skl += other.skl;
        self.ikl += other.ikl;
        self.total += other.total;
    }

    fn scaled(&self, c: f64) -> Self {
        Self {
            intent: self.intent * c,
            slot: self.slot * c,
            cucl: self.cucl * c,
            fucl: self.fucl * c,
            scl: self.scl * c,
            wcl: self.wcl * c,
            skl: self.skl * c,
            ikl: self.ikl * c,
            total: self.total * c,
        }
    }
}

/// `L_I + L_S` plus every present auxiliary term, each scaled by its
/// weight.
pub fn total_loss(tape: &mut Tape, vars: &TermVars, weights: &LossWeights) -> Result<Var> {
    let mut total = tape.add(vars.intent, vars.slot)?;
    for (term, w) in vars.aux(weights) {
        let Some(v) = term else { continue };
        let v = if w == 1.0 { v } else { tape.scale(v, w)? };
        total = tape.add(total, v)?;
    }
    Ok(total)
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train: LossTerms,
    pub dev_loss: f64,
    pub dev_slot_f1: f64,
    pub dev_intent_acc: f64,
    pub dev_overall_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best_epoch: usize,
    pub best_dev_overall: f64,
    pub epochs_run: usize,
    pub stopped_early: bool,
    pub log: Vec<EpochLog>,
}

/// Utterances decoded together at evaluation time.
pub const EVAL_BATCH: usize = 32;

fn decoded(vocab: &Vocabulary, u: &Utterance, slots: &[usize], intents: &[usize]) -> Result<Utterance> {
    let tags = slots
        .iter()
        .map(|&s| vocab.slot_tag(s).unwrap_or("O").to_string())
        .collect();
    let intents = intents
        .iter()
        .filter_map(|&i| vocab.intent(i).map(str::to_string))
        .collect();
    Utterance::new(u.tokens.clone(), tags, intents)
}

/// Predictions decoded back into label strings.
pub fn predict_utterances(
    model: &JointModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    data: &[Utterance],
) -> Result<Vec<Utterance>> {
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let ids: Vec<Vec<usize>> = chunk.iter().map(|u| vocab.encode(&u.tokens)).collect();
        let seqs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
        for (u, p) in chunk.iter().zip(model.predict_batch(store, &seqs)?) {
            out.push(decoded(vocab, u, &p.slots, &p.intents)?);
        }
    }
    Ok(out)
}

/// Metrics and the eval-mode task loss `L_I + L_S` over `data`.
pub fn evaluate_with_loss(
    model: &JointModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    data: &[Utterance],
    smoothing: f64,
) -> Result<(EvalReport, f64)> {
    let mut preds = Vec::with_capacity(data.len());
    let mut vals = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_BATCH) {
        let examples: Vec<Example> = chunk.iter().map(|u| Example::new(u, vocab)).collect();
        let seqs: Vec<&[usize]> = examples.iter().map(|e| e.ids.as_slice()).collect();
        let mut tape = Tape::new();
        tape.set_recording(false);
        let fs = model.forward_batch(&mut tape, store, &seqs, &mut Mode::Eval)?;
        for ((u, ex), f) in chunk.iter().zip(&examples).zip(fs) {
            let s = task_sums(&mut tape, f.intent_probs, f.slot_probs, ex, smoothing)?;
            vals.push((
                tape.scalar_value(s.intent)?,
                s.intent_count,
                tape.scalar_value(s.slot)?,
                s.slot_count,
            ));
            let slots = argmax_rows(tape.value(f.slot_probs))?;
            preds.push(decoded(vocab, u, &slots, &f.vote.intents)?);
        }
    }
    let report = evaluate_predictions(data, &preds)?;
    let (mut si, mut ni, mut ss, mut ns) = (0.0, 0, 0.0, 0);
    for (a, b, c, d) in vals {
        si += a;
        ni += b;
        ss += c;
        ns += d;
    }
    let li = if ni == 0 { 0.0 } else { si / ni as f64 };
    let ls = if ns == 0 { 0.0 } else { ss / ns as f64 };
    Ok((report, li + ls))
}

pub fn evaluate(
    model: &JointModel,
    store: &ParamStore,
    vocab: &Vocabulary,
    data: &[Utterance],
) -> Result<EvalReport> {
    let preds = predict_utterances(model, store, vocab, data)?;
    evaluate_predictions(data, &preds)
}

/// Owns the model, its parameters, optimiser state, and the data-derived
/// resources for one training run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub vocab: Vocabulary,
    pub model: JointModel,
    pub store: ParamStore,
    pub snapshot: PredictionSnapshot,
    pub dictionary: SlotDictionary,
    optim: Adam,
    rng: ChaCha8Rng,
    train: Vec<Example>,
    epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, train: &[Utterance]) -> Result<Self> {
        cfg.validate()?;
        let vocab = Vocabulary::build(train)?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut store = ParamStore::new();
        let model = JointModel::new(&mut store, cfg.model_config()?, &vocab, &mut rng)?;
        let dictionary = SlotDictionary::from_utterances(train)?;
        let dictionary = if cfg.dedup_dictionary {
            dictionary.deduplicated()
        } else {
            dictionary
        };
        let snapshot = PredictionSnapshot::from_gold(train, &vocab)?;
        let optim = Adam::new(&store, cfg.learning_rate);
        let train = train.iter().map(|u| Example::new(u, &vocab)).collect();
        Ok(Self {
            cfg,
            vocab,
            model,
            store,
            snapshot,
            dictionary,
            optim,
            rng,
            train,
            epoch: 0,
        })
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn train_examples(&self) -> &[Example] {
        &self.train
    }

    /// Builds the full objective for the training examples `batch` on
    /// `tape`. Training-pass predictions are offered to `record`.
    pub fn batch_objective(
        &mut self,
        tape: &mut Tape,
        batch: &[usize],
        mut record: Option<&mut SnapshotBuilder>,
    ) -> Result<(Var, TermVars)> {
        let on = self.cfg.toggles;
        let mut sums = Vec::with_capacity(batch.len());
        let mut base_e = Vec::with_capacity(batch.len());
        let (mut skl, mut ikl) = (Vec::new(), Vec::new());
        let seqs: Vec<&[usize]> = batch.iter().map(|&i| self.train[i].ids.as_slice()).collect();
        let fs = self
            .model
            .forward_batch(tape, &self.store, &seqs, &mut Mode::Train(&mut self.rng))?;
        for (&i, f) in batch.iter().zip(fs) {
            let ex = &self.train[i];
            sums.push(task_sums(
                tape,
                f.intent_probs,
                f.slot_probs,
                ex,
                self.cfg.label_smoothing,
            )?);
            base_e.push(f.enc.e);
            if on.skl {
                skl.push(self.snapshot.slot_kl(tape, i, f.slot_probs)?);
            }
            if on.ikl {
                ikl.push(self.snapshot.intent_kl(tape, i, f.intent_probs)?);
            }
            if let Some(b) = record.as_deref_mut() {
                b.record(
                    i,
                    tape.value(f.slot_probs).clone(),
                    tape.value(f.intent_probs).clone(),
                )?;
            }
        }
        let (intent, slot) = task_losses(tape, &sums)?;
        let mut vars = TermVars {
            intent,
            slot,
            cucl: None,
            fucl: None,
            scl: None,
            wcl: None,
            skl: None,
            ikl: None,
        };
        if on.any_contrastive() {
            let zero = tape.constant(Tensor::scalar(0.0));
            let mut levels = [zero; 4];
            if batch.len() >= 2 {
                let bases: Vec<Utterance> =
                    batch.iter().map(|&i| self.train[i].utterance.clone()).collect();
                let positives = bases
                    .iter()
                    .map(|u| generate_positive(u, &self.dictionary, &mut self.rng))
                    .collect::<Result<Vec<_>>>()?;
                let pairs =
                    build_batch_pairs(&bases, &positives, &mut self.rng, self.cfg.negatives)?;
                let ids: Vec<Vec<usize>> = positives
                    .iter()
                    .map(|p| self.vocab.encode(&p.utterance.tokens))
                    .collect();
                let seqs: Vec<&[usize]> = ids.iter().map(Vec::as_slice).collect();
                let enc = self.model.encoder.encode_batch(
                    tape,
                    &self.store,
                    &seqs,
                    &mut Mode::Train(&mut self.rng),
                )?;
                let pos_e = (0..seqs.len())
                    .map(|i| enc.utterance(tape, i).map(|o| o.e))
                    .collect::<Result<Vec<_>>>()?;
                let base_spans = bases.iter().map(Utterance::spans).collect::<Result<Vec<_>>>()?;
                let pos_spans = positives
                    .iter()
                    .map(|p| p.utterance.spans())
                    .collect::<Result<Vec<_>>>()?;
                let reps = RepresentationSet::build(tape, &base_e, &pos_e, &base_spans, &pos_spans)?;
                let l = level_losses(tape, &reps, &pairs, &self.cfg.similarity(), on.levels())?;
                levels = [l.coarse, l.fine, l.slot, l.word];
            }
            vars.cucl = on.cucl.then_some(levels[0]);
            vars.fucl = on.fucl.then_some(levels[1]);
            vars.scl = on.scl.then_some(levels[2]);
            vars.wcl = on.wcl.then_some(levels[3]);
        }
        if on.skl {
            vars.skl = Some(batch_mean(tape, &skl)?);
        }
        if on.ikl {
            vars.ikl = Some(batch_mean(tape, &ikl)?);
        }
        let total = total_loss(tape, &vars, &self.cfg.weights)?;
        Ok((total, vars))
    }

    /// One optimiser step on `batch`.
    pub fn train_step(
        &mut self,
        batch: &[usize],
        batch_index: usize,
        record: Option<&mut SnapshotBuilder>,
    ) -> Result<LossTerms> {
        let mut tape = Tape::new();
        let (total, vars) = self.batch_objective(&mut tape, batch, record)?;
        let terms = LossTerms::read(&tape, &vars, total)?;
        if !terms.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch: self.epoch + 1,
                batch: batch_index,
                terms: serde_json::to_string(&terms)?,
            });
        }
        self.store.zero_grad();
        tape.backward_into(total, &mut self.store)?;
        drop(tape);
        self.optim.step(&mut self.store);
        Ok(terms)
    }

    /// A shuffled pass over the training set, followed by the snapshot
    /// swap. Returns the mean of the per-batch terms.
    pub fn train_epoch(&mut self) -> Result<LossTerms> {
        let mut order: Vec<usize> = (0..self.train.len()).collect();
        order.shuffle(&mut self.rng);
        let mut builder = SnapshotBuilder::new(self.train.len());
        let mut sum = LossTerms::default();
        let mut batches = 0;
        for (b, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let terms = self.train_step(batch, b, Some(&mut builder))?;
            sum.accumulate(&terms);
            batches += 1;
        }
        self.snapshot = builder.finish(&self.snapshot)?;
        self.epoch += 1;
        Ok(sum.scaled(1.0 / batches.max(1) as f64))
    }

    pub fn evaluate(&self, data: &[Utterance]) -> Result<(EvalReport, f64)> {
        evaluate_with_loss(&self.model, &self.store, &self.vocab, data, self.cfg.label_smoothing)
    }

    /// Trains until `max_epochs` or until the dev loss fails to improve for
    /// `patience` epochs, then restores the parameters with the best dev
    /// overall accuracy. `on_epoch` sees every log line as it is produced.
    pub fn fit(
        &mut self,
        dev: &[Utterance],
        mut on_epoch: impl FnMut(&EpochLog) -> Result<()>,
    ) -> Result<TrainOutcome> {
        let mut best_loss = f64::INFINITY;
        let mut since_best_loss = 0;
        let mut best_overall = f64::NEG_INFINITY;
        let mut best_epoch = 0;
        let mut best_params: BTreeMap<String, Tensor> = self.store.to_named();
        let mut log = Vec::new();
        let mut stopped_early = false;
        while self.epoch < self.cfg.max_epochs {
            let train = self.train_epoch()?;
            let (report, dev_loss) = self.evaluate(dev)?;
            let line = EpochLog {
                epoch: self.epoch,
                train,
                dev_loss,
                dev_slot_f1: report.slot_f1,
                dev_intent_acc: report.intent_acc,
                dev_overall_acc: report.overall_acc,
            };
            log::info!(
                "epoch {} loss {:.4} dev loss {:.4} overall {:.4}",
                line.epoch,
                line.train.total,
                dev_loss,
                report.overall_acc
            );
            on_epoch(&line)?;
            log.push(line);
            if report.overall_acc > best_overall {
                best_overall = report.overall_acc;
                best_epoch = self.epoch;
                best_params = self.store.to_named();
            }
            if dev_loss < best_loss {
                best_loss = dev_loss;
                since_best_loss = 0;
            } else {
                since_best_loss += 1;
                if since_best_loss >= self.cfg.patience {
                    stopped_early = true;
                    break;
                }
            }
        }
        self.store.load_named(&best_params)?;
        Ok(TrainOutcome {
            best_epoch,
            best_dev_overall: best_overall,
            epochs_run: self.epoch,
            stopped_early,
            log,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::tests::tiny_corpus;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            embed_dim: 4,
            lstm_hidden: 3,
            decoder_hidden: 3,
            intent_head_dim: 4,
            heads: 2,
            dropout: 0.0,
            batch_size: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn uniform_slots_give_log_v() {
        let data = tiny_corpus();
        let vocab = Vocabulary::build(&data).unwrap();
        let ex = Example::new(&data[1], &vocab);
        let v = vocab.num_slots();
        let mut tape = Tape::new();
        let ip = tape.constant(Tensor::filled(&[6, vocab.num_intents()], 0.5));
        let sp = tape.constant(Tensor::filled(&[6, v], 1.0 / v as f64));
        let s = task_sums(&mut tape, ip, sp, &ex, 0.0).unwrap();
        let (li, ls) = task_losses(&mut tape, &[s]).unwrap();
        assert!((tape.scalar_value(ls).unwrap() - (v as f64).ln()).abs() < 1e-12);
        assert!((tape.scalar_value(li).unwrap() - 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn perfect_intents_give_zero_bce() {
        let data = tiny_corpus();
        let vocab = Vocabulary::build(&data).unwrap();
        let ex = Example::new(&data[1], &vocab);
        let rows: Vec<Vec<f64>> = (0..6)
            .map(|_| ex.intent_hot.iter().map(|&h| if h == 1.0 { 1.0 } else { 0.0 }).collect())
            .collect();
        let mut tape = Tape::new();
        let ip = tape.constant(Tensor::from_rows(&rows).unwrap());
        let sp = tape.constant(Tensor::filled(&[6, vocab.num_slots()], 0.2));
        let s = task_sums(&mut tape, ip, sp, &ex, 0.1).unwrap();
        let (li, _) = task_losses(&mut tape, &[s]).unwrap();
        assert!(tape.scalar_value(li).unwrap() < 1e-11);
    }

    #[test]
    fn smoothed_ce_three_classes() {
        let u = Utterance::parse_parts("w", "B-a", "x").unwrap();
        let train = vec![
            u.clone(),
            Utterance::parse_parts("v", "O", "x").unwrap(),
            Utterance::parse_parts("z", "B-b", "x").unwrap(),
        ];
        let vocab = Vocabulary::build(&train).unwrap();
        assert_eq!(vocab.num_slots(), 3);
        let ex = Example::new(&u, &vocab);
        let gold = vocab.slot_id("B-a").unwrap();
        let p: [f64; 3] = [0.2, 0.5, 0.3];
        let eps = 0.1;
        let want: f64 = (0..3)
            .map(|c| {
                let w = if c == gold { 1.0 - eps + eps / 3.0 } else { eps / 3.0 };
                -w * p[c].ln()
            })
            .sum();
        let mut tape = Tape::new();
        let ip = tape.constant(Tensor::filled(&[1, 1], 0.5));
        let sp = tape.constant(Tensor::new(vec![1, 3], p.to_vec()).unwrap());
        let s = task_sums(&mut tape, ip, sp, &ex, eps).unwrap();
        let (_, ls) = task_losses(&mut tape, &[s]).unwrap();
        assert!((tape.scalar_value(ls).unwrap() - want).abs() < 1e-12);
    }

    #[test]
    fn total_is_sum_of_enabled_terms() {
        let mut tape = Tape::new();
        let vals = [0.7, 1.3, 0.2, 0.4, 0.9, 1.1, 0.05, 0.6];
        let v: Vec<Var> = vals.iter().map(|&x| tape.constant(Tensor::scalar(x))).collect();
        let all = TermVars {
            intent: v[0],
            slot: v[1],
            cucl: Some(v[2]),
            fucl: Some(v[3]),
            scl: Some(v[4]),
            wcl: Some(v[5]),
            skl: Some(v[6]),
            ikl: Some(v[7]),
        };
        let w = LossWeights::default();
        let t = total_loss(&mut tape, &all, &w).unwrap();
        let mut want = 0.0;
        for x in vals {
            want += x;
        }
        assert_eq!(tape.scalar_value(t).unwrap(), want);
        let none = TermVars {
            cucl: None,
            fucl: None,
            scl: None,
            wcl: None,
            skl: None,
            ikl: None,
            ..all
        };
        let t = total_loss(&mut tape, &none, &w).unwrap();
        assert_eq!(tape.scalar_value(t).unwrap(), 0.7 + 1.3);
    }

    #[test]
    fn objective_decreases_on_tiny_corpus() {
        let data = tiny_corpus();
        let mut t = Trainer::new(tiny_cfg(), &data).unwrap();
        let first = t.train_epoch().unwrap();
        let mut last = first;
        for _ in 0..30 {
            last = t.train_epoch().unwrap();
        }
        assert!(last.intent + last.slot < first.intent + first.slot);
        assert_eq!(t.snapshot.epoch, 31);
    }

    #[test]
    fn disabled_terms_are_not_built() {
        let data = tiny_corpus();
        let mut cfg = tiny_cfg();
        cfg.toggles = LossToggles::NONE;
        let mut t = Trainer::new(cfg, &data).unwrap();
        let mut tape = Tape::new();
        let (total, vars) = t.batch_objective(&mut tape, &[0, 1, 2], None).unwrap();
        assert!(vars.cucl.is_none() && vars.skl.is_none());
        let terms = LossTerms::read(&tape, &vars, total).unwrap();
        assert_eq!(terms.total, terms.intent + terms.slot);
    }
}
