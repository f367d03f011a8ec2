//! Intent-conditioned slot decoding over a global intent/slot graph.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{starts, BiLstm, Linear, MASKED};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

pub const DEFAULT_WINDOW: usize = 2;
pub const GAT_LEAKY_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeKind {
    SlotSlot,
    IntentSlot,
    IntentIntent,
}

/// Nodes `0..n` are slot positions, nodes `n..n+m` the predicted intents.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GlobalGraph {
    pub slots: usize,
    pub intents: Vec<usize>,
    pub neighbors: Vec<Vec<usize>>,
}

impl GlobalGraph {
    pub fn build(n: usize, intents: &[usize], window: usize) -> Result<Self> {
        if n == 0 || intents.is_empty() {
            return Err(Error::Contract(format!(
                "graph needs at least one slot and one intent node, got n={n}, m={}",
                intents.len()
            )));
        }
        let m = intents.len();
        let mut neighbors = Vec::with_capacity(n + m);
        for t in 0..n {
            let mut adj: Vec<usize> = (t.saturating_sub(window)..=(t + window).min(n - 1)).collect();
            adj.extend(n..n + m);
            neighbors.push(adj);
        }
        for _ in 0..m {
            neighbors.push((0..n + m).collect());
        }
        Ok(Self {
            slots: n,
            intents: intents.to_vec(),
            neighbors,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_slot(&self, node: usize) -> bool {
        node < self.slots
    }

    pub fn edge_kind(&self, i: usize, j: usize) -> Option<EdgeKind> {
        if !self.neighbors.get(i)?.contains(&j) {
            return None;
        }
        Some(match (self.is_slot(i), self.is_slot(j)) {
            (true, true) => EdgeKind::SlotSlot,
            (false, false) => EdgeKind::IntentIntent,
            _ => EdgeKind::IntentSlot,
        })
    }

    /// Additive attention mask: 0 on edges, a large negative value elsewhere.
    pub fn mask(&self) -> Tensor {
        let size = self.num_nodes();
        let mut t = Tensor::filled(&[size, size], MASKED);
        for (i, adj) in self.neighbors.iter().enumerate() {
            for &j in adj {
                t.data_mut()[i * size + j] = 0.0;
            }
        }
        t
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum GatActivation {
    #[default]
    Sigmoid,
    Elu,
}

impl std::str::FromStr for GatActivation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigmoid" => Ok(Self::Sigmoid),
            "elu" => Ok(Self::Elu),
            other => Err(Error::Config(format!("unknown GAT activation {other:?}"))),
        }
    }
}

/// Single-head graph attention layer.
#[derive(Clone, Debug)]
pub struct GatLayer {
    pub w_g: ParamId,
    pub a_src: ParamId,
    pub a_dst: ParamId,
}

/// A layer's output together with its attention coefficients.
#[derive(Clone, Copy, Debug)]
pub struct GatOutput {
    pub g: Var,
    pub alpha: Var,
}

impl GatLayer {
    pub fn new<R: Rng>(store: &mut ParamStore, name: &str, dim: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            w_g: store.register_matrix(&format!("{name}.w_g"), dim, dim, rng)?,
            a_src: store.register_matrix(&format!("{name}.a_src"), dim, 1, rng)?,
            a_dst: store.register_matrix(&format!("{name}.a_dst"), dim, 1, rng)?,
        })
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: Var,
        graph: &GlobalGraph,
        act: GatActivation,
    ) -> Result<GatOutput> {
        self.forward_masked(tape, store, g, &graph.mask(), act)
    }

    /// One layer over any node set whose edges are given as an additive
    /// `[size x size]` mask.
    pub fn forward_masked(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        g: Var,
        mask: &Tensor,
        act: GatActivation,
    ) -> Result<GatOutput> {
        let size = mask.shape()[0];
        if tape.shape(g)[0] != size {
            return Err(Error::Dimension {
                op: "gat_layer",
                detail: format!("{} feature rows for {size} nodes", tape.shape(g)[0]),
            });
        }
        let w = tape.param(store, self.w_g);
        let z = tape.matmul(g, w)?;
        let a_src = tape.param(store, self.a_src);
        let a_dst = tape.param(store, self.a_dst);
        let s = tape.matmul(z, a_src)?;
        let t = tape.matmul(z, a_dst)?;
        let ones = tape.constant(Tensor::filled(&[1, size], 1.0));
        let ones_col = tape.constant(Tensor::filled(&[size, 1], 1.0));
        let tt = tape.transpose(t)?;
        let rows = tape.matmul(s, ones)?;
        let cols = tape.matmul(ones_col, tt)?;
        let scores = tape.add(rows, cols)?;
        let scores = tape.leaky_relu(scores, GAT_LEAKY_SLOPE)?;
        let mask = tape.constant(mask.clone());
        let scores = tape.add(scores, mask)?;
        let alpha = tape.softmax(scores, 1)?;
        let agg = tape.matmul(alpha, z)?;
        let g = match act {
            GatActivation::Sigmoid => tape.sigmoid(agg)?,
            GatActivation::Elu => tape.elu(agg, 1.0)?,
        };
        Ok(GatOutput { g, alpha })
    }
}

/// Row-wise argmax; the lowest index wins ties.
pub fn argmax_rows(probs: &Tensor) -> Result<Vec<usize>> {
    let (n, _) = probs.dims2()?;
    Ok((0..n)
        .map(|t| {
            let row = probs.row(t);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect())
}

#[derive(Clone, Debug)]
pub struct SlotDecoder {
    pub lstm: BiLstm,
    pub intent_embedding: ParamId,
    pub layers: Vec<GatLayer>,
    pub out: Linear,
    pub window: usize,
    pub activation: GatActivation,
}

/// Slot decoding for utterances stacked row-wise.
#[derive(Clone, Debug)]
pub struct SlotBatchOutput {
    /// Stacked `[N x |slots|]` slot distributions.
    pub probs: Var,
    pub graphs: Vec<GlobalGraph>,
    /// Per layer, attention over the union of all graphs: every slot node
    /// first, then every intent node, each in utterance order.
    pub alphas: Vec<Var>,
}

/// Mask for the disjoint union of `graphs`, laid out as in
/// [`SlotBatchOutput::alphas`].
pub fn union_mask(graphs: &[GlobalGraph]) -> Tensor {
    let slots: Vec<usize> = graphs.iter().map(|g| g.slots).collect();
    let intents: Vec<usize> = graphs.iter().map(|g| g.intents.len()).collect();
    let (slot_starts, intent_starts) = (starts(&slots), starts(&intents));
    let total_slots: usize = slots.iter().sum();
    let size = total_slots + intents.iter().sum::<usize>();
    let mut t = Tensor::filled(&[size, size], MASKED);
    for (u, graph) in graphs.iter().enumerate() {
        let global = |local: usize| {
            if local < graph.slots {
                slot_starts[u] + local
            } else {
                total_slots + intent_starts[u] + local - graph.slots
            }
        };
        for (i, adj) in graph.neighbors.iter().enumerate() {
            let gi = global(i);
            for &j in adj {
                t.data_mut()[gi * size + global(j)] = 0.0;
            }
        }
    }
    t
}

#[derive(Clone, Debug)]
pub struct SlotOutput {
    /// `[n x |slots|]` slot distributions.
    pub probs: Var,
    pub graph: GlobalGraph,
    pub alphas: Vec<Var>,
}

pub struct SlotDecoderConfig {
    pub input: usize,
    pub lstm_hidden: usize,
    pub num_intents: usize,
    pub num_slots: usize,
    pub gat_layers: usize,
    pub window: usize,
    pub activation: GatActivation,
}

impl SlotDecoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &SlotDecoderConfig, rng: &mut R) -> Result<Self> {
        let d = 2 * cfg.lstm_hidden;
        let lstm = BiLstm::new(
            store,
            "slot.lstm",
            cfg.num_intents + cfg.input,
            cfg.lstm_hidden,
            rng,
        )?;
        let intent_embedding =
            store.register_matrix("slot.intent_embedding", cfg.num_intents, d, rng)?;
        let layers = (0..cfg.gat_layers)
            .map(|l| GatLayer::new(store, &format!("slot.gat{l}"), d, rng))
            .collect::<Result<_>>()?;
        let out = Linear::new(store, "slot.w_s", d, cfg.num_slots, true, rng)?;
        Ok(Self {
            lstm,
            intent_embedding,
            layers,
            out,
            window: cfg.window,
            activation: cfg.activation,
        })
    }

    /// Slot distributions given encoder rows `e`, token intent
    /// probabilities, and the voted intent ids that become graph nodes.
    pub fn forward(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        intent_probs: Var,
        intents: &[usize],
    ) -> Result<SlotOutput> {
        let n = tape.shape(e)[0];
        let out = self.forward_batch(tape, store, e, intent_probs, &[n], &[intents.to_vec()])?;
        Ok(SlotOutput {
            probs: out.probs,
            graph: out.graphs.into_iter().next().unwrap(),
            alphas: out.alphas,
        })
    }

    /// [`SlotDecoder::forward`] for utterances stacked row-wise, with
    /// lengths `lens` and one voted intent set each. The graphs are
    /// disjoint, so each utterance is decoded as it would be alone.
    pub fn forward_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        e: Var,
        intent_probs: Var,
        lens: &[usize],
        intents: &[Vec<usize>],
    ) -> Result<SlotBatchOutput> {
        if lens.len() != intents.len() {
            return Err(Error::Contract(format!(
                "{} utterances with {} intent sets",
                lens.len(),
                intents.len()
            )));
        }
        let x = tape.concat(&[intent_probs, e], 1)?;
        let s = self.lstm.forward_packed(tape, store, x, lens)?;
        let graphs = lens
            .iter()
            .zip(intents)
            .map(|(&n, set)| GlobalGraph::build(n, set, self.window))
            .collect::<Result<Vec<_>>>()?;
        let mask = union_mask(&graphs);
        let table = tape.param(store, self.intent_embedding);
        let nodes = tape.embedding_lookup(table, &intents.concat())?;
        let mut g = tape.concat(&[s, nodes], 0)?;
        let mut alphas = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let out = layer.forward_masked(tape, store, g, &mask, self.activation)?;
            g = out.g;
            alphas.push(out.alpha);
        }
        let total: usize = lens.iter().sum();
        let slots = tape.slice(g, 0, 0, total)?;
        let logits = self.out.forward(tape, store, slots)?;
        let probs = tape.softmax(logits, 1)?;
        Ok(SlotBatchOutput {
            probs,
            graphs,
            alphas,
        })
    }
}
