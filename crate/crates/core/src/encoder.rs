//! Shared self-attentive encoder: word embeddings feed both a BiLSTM and a
//! multi-head scaled dot-product self-attention; their outputs are
//! concatenated per token.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{BiLstm, Mode};
use crate::params::{ParamId, ParamStore};
use rand::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub embed_dim: usize,
    /// Hidden units per LSTM direction.
    pub lstm_hidden: usize,
    pub heads: usize,
    /// Per-head query/key/value width.
    pub attn_dim: usize,
    pub dropout: f64,
}

impl EncoderConfig {
    /// Attention width equal to the BiLSTM output, split across heads.
    pub fn new(embed_dim: usize, lstm_hidden: usize, heads: usize, dropout: f64) -> Result<Self> {
        if heads == 0 || (2 * lstm_hidden) % heads != 0 {
            return Err(Error::Config(format!(
                "2 * lstm_hidden = {} is not divisible by {heads} heads",
                2 * lstm_hidden
            )));
        }
        Ok(Self {
            embed_dim,
            lstm_hidden,
            heads,
            attn_dim: 2 * lstm_hidden / heads,
            dropout,
        })
    }

    pub fn attn_total(&self) -> usize {
        self.heads * self.attn_dim
    }

    pub fn output_dim(&self) -> usize {
        2 * self.lstm_hidden + self.attn_total()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.lstm_hidden == 0 || self.heads == 0 || self.attn_dim == 0 {
            return Err(Error::Config("encoder dimensions must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// `e = h ‖ c` with the parts kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct EncoderOutput {
    pub e: Var,
    pub h: Var,
    pub c: Var,
}

/// Encodings of several utterances stacked row-wise.
#[derive(Clone, Debug)]
pub struct BatchEncoding {
    pub e: Var,
    pub h: Var,
    pub c: Var,
    pub lens: Vec<usize>,
    pub starts: Vec<usize>,
}

impl BatchEncoding {
    /// Rows of utterance `i`.
    pub fn utterance(&self, tape: &mut Tape, i: usize) -> Result<EncoderOutput> {
        if self.lens.len() == 1 {
            return Ok(EncoderOutput {
                e: self.e,
                h: self.h,
                c: self.c,
            });
        }
        let (s, l) = (self.starts[i], self.lens[i]);
        Ok(EncoderOutput {
            e: tape.slice(self.e, 0, s, l)?,
            h: tape.slice(self.h, 0, s, l)?,
            c: tape.slice(self.c, 0, s, l)?,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Attention {
    pub c: Var,
    /// Per-head `[n x n]` attention weights.
    pub weights: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct Encoder {
    pub cfg: EncoderConfig,
    pub embedding: ParamId,
    pub lstm: BiLstm,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
}

impl Encoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        vocab_size: usize,
        cfg: EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let embedding = store.register_matrix("encoder.embedding", vocab_size, cfg.embed_dim, rng)?;
        let lstm = BiLstm::new(store, "encoder.lstm", cfg.embed_dim, cfg.lstm_hidden, rng)?;
        let a = cfg.attn_total();
        let w_q = store.register_matrix("encoder.attn.w_q", cfg.embed_dim, a, rng)?;
        let w_k = store.register_matrix("encoder.attn.w_k", cfg.embed_dim, a, rng)?;
        let w_v = store.register_matrix("encoder.attn.w_v", cfg.embed_dim, a, rng)?;
        Ok(Self {
            cfg,
            embedding,
            lstm,
            w_q,
            w_k,
            w_v,
        })
    }

    pub fn embed(&self, tape: &mut Tape, store: &ParamStore, ids: &[usize]) -> Result<Var> {
        let table = tape.param(store, self.embedding);
        tape.embedding_lookup(table, ids)
    }

    pub fn self_attention(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Attention> {
        self.masked_attention(tape, store, x, None)
    }

    /// Self-attention with an additive score mask, used to keep stacked
    /// utterances from attending to each other.
    pub fn masked_attention(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        mask: Option<Var>,
    ) -> Result<Attention> {
        let dk = self.cfg.attn_dim;
        let wq = tape.param(store, self.w_q);
        let wk = tape.param(store, self.w_k);
        let wv = tape.param(store, self.w_v);
        let q = tape.matmul(x, wq)?;
        let k = tape.matmul(x, wk)?;
        let v = tape.matmul(x, wv)?;
        let mut heads = Vec::with_capacity(self.cfg.heads);
        let mut weights = Vec::with_capacity(self.cfg.heads);
        let scale = 1.0 / (dk as f64).sqrt();
        for hd in 0..self.cfg.heads {
            let qh = tape.slice(q, 1, hd * dk, dk)?;
            let kh = tape.slice(k, 1, hd * dk, dk)?;
            let vh = tape.slice(v, 1, hd * dk, dk)?;
            let kt = tape.transpose(kh)?;
            let scores = tape.matmul(qh, kt)?;
            let mut scaled = tape.scale(scores, scale)?;
            if let Some(m) = mask {
                scaled = tape.add(scaled, m)?;
            }
            let a = tape.softmax(scaled, 1)?;
            weights.push(a);
            heads.push(tape.matmul(a, vh)?);
        }
        let c = tape.concat(&heads, 1)?;
        Ok(Attention { c, weights })
    }

    pub fn encode(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        ids: &[usize],
        mode: &mut Mode,
    ) -> Result<EncoderOutput> {
        let batch = self.encode_batch(tape, store, &[ids], mode)?;
        batch.utterance(tape, 0)
    }

    /// Encodes several utterances in one pass. Each is encoded exactly as
    /// on its own; stacking only shares the weight products.
    pub fn encode_batch(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        seqs: &[&[usize]],
        mode: &mut Mode,
    ) -> Result<BatchEncoding> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Contract("cannot encode an empty utterance".into()));
        }
        let lens: Vec<usize> = seqs.iter().map(|s| s.len()).collect();
        let starts = crate::nn::starts(&lens);
        let ids: Vec<usize> = seqs.concat();
        let emb = self.embed(tape, store, &ids)?;
        let emb = mode.dropout(tape, emb, self.cfg.dropout)?;
        let h = self.lstm.forward_packed(tape, store, emb, &lens)?;
        let h = mode.dropout(tape, h, self.cfg.dropout)?;
        let mask = if lens.len() > 1 {
            Some(tape.constant(crate::nn::block_mask(&lens)))
        } else {
            None
        };
        let c = self.masked_attention(tape, store, emb, mask)?.c;
        let e = tape.concat(&[h, c], 1)?;
        Ok(BatchEncoding {
            e,
            h,
            c,
            lens,
            starts,
        })
    }
}
