//! Reusable layers built from tape primitives.

use crate::autodiff::{Tape, Var};
use crate::error::Result;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

/// Dropout is applied only when a generator is supplied.
pub enum Mode<'a> {
    Eval,
    Train(&'a mut dyn rand::RngCore),
}

impl Mode<'_> {
    pub fn is_train(&self) -> bool {
        matches!(self, Mode::Train(_))
    }

    pub fn dropout(&mut self, tape: &mut Tape, x: Var, p: f64) -> Result<Var> {
        match self {
            Mode::Eval => Ok(x),
            Mode::Train(rng) => tape.dropout(x, p, rng),
        }
    }
}

/// Score added where attention is not allowed; `exp` of it is exactly 0.
pub const MASKED: f64 = -1e30;

/// First row of each of the stacked sequences with lengths `lens`.
pub fn starts(lens: &[usize]) -> Vec<usize> {
    lens.iter()
        .scan(0, |acc, &l| {
            let s = *acc;
            *acc += l;
            Some(s)
        })
        .collect()
}

/// `[n x n]` additive mask that is 0 within each stacked sequence and
/// [`MASKED`] across sequences.
pub fn block_mask(lens: &[usize]) -> Tensor {
    let n: usize = lens.iter().sum();
    let mut m = Tensor::filled(&[n, n], MASKED);
    for (&s, &l) in starts(lens).iter().zip(lens) {
        for r in s..s + l {
            m.data_mut()[r * n + s..r * n + s + l].fill(0.0);
        }
    }
    m
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        let weight = store.register_matrix(&format!("{name}.weight"), fan_in, fan_out, rng)?;
        let bias = if bias {
            Some(store.register(format!("{name}.bias"), Tensor::zeros(&[fan_out]))?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.linear(x, w, b)
    }
}

/// One direction of an LSTM. Gate layout in the fused weights is
/// input, forget, cell candidate, output.
#[derive(Clone, Debug)]
pub struct LstmCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub bias: ParamId,
    pub hidden: usize,
}

impl LstmCell {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let w_ih = store.register_matrix(&format!("{name}.w_ih"), input, 4 * hidden, rng)?;
        let w_hh = store.register_matrix(&format!("{name}.w_hh"), hidden, 4 * hidden, rng)?;
        let mut b = Tensor::zeros(&[4 * hidden]);
        b.data_mut()[hidden..2 * hidden].fill(1.0);
        let bias = store.register(format!("{name}.bias"), b)?;
        Ok(Self {
            w_ih,
            w_hh,
            bias,
            hidden,
        })
    }

    /// Hidden states `[n x h]` for rows of `x` (`[n x d]`), indexed by
    /// position. `reverse` processes right to left.
    pub fn run(&self, tape: &mut Tape, store: &ParamStore, x: Var, reverse: bool) -> Result<Var> {
        let n = tape.shape(x).first().copied().unwrap_or(0);
        self.run_packed(tape, store, x, &[n], reverse)
    }

    /// [`LstmCell::run`] over sequences stacked row-wise with lengths
    /// `lens`.
    pub fn run_packed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        lens: &[usize],
        reverse: bool,
    ) -> Result<Var> {
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b = tape.param(store, self.bias);
        let proj = tape.linear(x, w_ih, Some(b))?;
        tape.lstm_packed(proj, w_hh, lens, reverse)
    }

    /// Step-by-step composition of tape primitives; the reference for the
    /// fused op.
    #[cfg(test)]
    fn run_unfused(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        order: impl Iterator<Item = usize>,
    ) -> Result<Vec<Option<Var>>> {
        let n = tape.value(x).dims2()?.0;
        let h_dim = self.hidden;
        let w_ih = tape.param(store, self.w_ih);
        let w_hh = tape.param(store, self.w_hh);
        let b = tape.param(store, self.bias);
        let proj = tape.linear(x, w_ih, Some(b))?;
        let mut out = vec![None; n];
        let mut state: Option<(Var, Var)> = None;
        for t in order {
            let xt = tape.row(proj, t)?;
            let gates = match state {
                Some((h, _)) => {
                    let rec = tape.matmul(h, w_hh)?;
                    tape.add(xt, rec)?
                }
                None => xt,
            };
            let gi = tape.slice(gates, 1, 0, h_dim)?;
            let gf = tape.slice(gates, 1, h_dim, h_dim)?;
            let gg = tape.slice(gates, 1, 2 * h_dim, h_dim)?;
            let go = tape.slice(gates, 1, 3 * h_dim, h_dim)?;
            let i = tape.sigmoid(gi)?;
            let o = tape.sigmoid(go)?;
            let g = tape.tanh(gg)?;
            let ig = tape.mul(i, g)?;
            let c = match state {
                Some((_, c_prev)) => {
                    let f = tape.sigmoid(gf)?;
                    let fc = tape.mul(f, c_prev)?;
                    tape.add(fc, ig)?
                }
                None => ig,
            };
            let tc = tape.tanh(c)?;
            let h = tape.mul(o, tc)?;
            out[t] = Some(h);
            state = Some((h, c));
        }
        Ok(out)
    }
}

/// Bidirectional LSTM with zero initial states; row `t` of the output is
/// `[forward_t ; backward_t]`.
#[derive(Clone, Debug)]
pub struct BiLstm {
    pub forward: LstmCell,
    pub backward: LstmCell,
}

impl BiLstm {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            forward: LstmCell::new(store, &format!("{name}.fwd"), input, hidden, rng)?,
            backward: LstmCell::new(store, &format!("{name}.bwd"), input, hidden, rng)?,
        })
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.shape(x).first().copied().unwrap_or(0);
        self.forward_packed(tape, store, x, &[n])
    }

    /// Independent passes over sequences stacked row-wise.
    pub fn forward_packed(
        &self,
        tape: &mut Tape,
        store: &ParamStore,
        x: Var,
        lens: &[usize],
    ) -> Result<Var> {
        let f = self.forward.run_packed(tape, store, x, lens, false)?;
        let b = self.backward.run_packed(tape, store, x, lens, true)?;
        tape.concat(&[f, b], 1)
    }
}
