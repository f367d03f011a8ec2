//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its output value and the handles
//! of its inputs. [`Tape::backward`] walks the nodes in reverse insertion
//! order, which is a valid reverse topological order because a node can only
//! reference nodes created before it.

use crate::error::{dim_err, Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;
use std::collections::HashMap;
use std::sync::Arc;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Sqrt,
    LeakyRelu(f64),
    Elu(f64),
    Scale(f64),
    AddScalar(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

/// The primitive set, for callers that dispatch on an op kind at runtime.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    MatMul,
    Add,
    Mul,
    ConcatLastAxis,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    LeakyRelu(f64),
    MeanPool(usize),
    Slice { axis: usize, start: usize, len: usize },
    EmbeddingLookup(Vec<usize>),
    Softmax(usize),
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    MeanPool { x: Var, axis: usize },
    Sum(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Gather { table: Var, ids: Vec<usize> },
    Reshape(Var),
    SparseLinear { x: Var, terms: Vec<Vec<(usize, f64)>> },
    Lstm(Box<LstmTrace>),
}

/// Saved activations of a fused LSTM pass over packed sequences.
#[derive(Debug)]
struct LstmTrace {
    proj: Var,
    w_hh: Var,
    /// Row `t` of sequence `u` at step `s` for every step, sequences
    /// ordered longest first so the active ones form a prefix.
    steps: Vec<Vec<usize>>,
    /// Per row: gates i, f, g, o (post-activation), then c and tanh(c).
    cache: Vec<f64>,
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
    param_order: Vec<(Var, ParamId)>,
    recording: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], retained for leaf nodes.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            param_order: Vec::new(),
            recording: true,
        }
    }

    /// When recording is off, new nodes are constants: values are computed
    /// but no gradient flows through them.
    pub fn set_recording(&mut self, on: bool) {
        self.recording = on;
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node created at or after `len`, invalidating their
    /// handles. Used to bound memory in long no-grad loops.
    pub fn truncate(&mut self, len: usize) {
        self.nodes.truncate(len);
        self.param_vars.retain(|_, v| v.0 < len);
        self.param_order.retain(|(v, _)| v.0 < len);
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let (op, requires_grad) = if self.recording && requires_grad {
            (op, true)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn req(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable input.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Arc::new(t),
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter leaf; one node per parameter per tape, sharing the store's
    /// buffer.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Leaf,
            requires_grad: p.trainable && self.recording,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        self.param_order.push((v, id));
        v
    }

    // ---------------------------------------------------------------
    // primitives

    pub fn unary(&mut self, kind: Unary, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let out = match kind {
            Unary::Sigmoid => xv.map(sigmoid),
            Unary::Tanh => xv.map(f64::tanh),
            Unary::Exp => xv.map(f64::exp),
            Unary::Log => {
                if let Some(bad) = xv.data().iter().find(|&&v| v.is_nan() || v <= 0.0) {
                    return Err(Error::Domain {
                        op: "log",
                        detail: format!("non-positive argument {bad}"),
                    });
                }
                xv.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(bad) = xv.data().iter().find(|&&v| v.is_nan() || v < 0.0) {
                    return Err(Error::Domain {
                        op: "sqrt",
                        detail: format!("negative argument {bad}"),
                    });
                }
                xv.map(f64::sqrt)
            }
            Unary::LeakyRelu(s) => xv.map(|v| if v > 0.0 { v } else { s * v }),
            Unary::Elu(a) => xv.map(|v| if v > 0.0 { v } else { a * v.exp_m1() }),
            Unary::Scale(c) => xv.map(|v| c * v),
            Unary::AddScalar(c) => xv.map(|v| v + c),
            Unary::Clamp(lo, hi) => xv.map(|v| v.clamp(lo, hi)),
        };
        let r = self.req(x);
        Ok(self.push(out, Op::Unary(kind, x), r))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Log, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn elu(&mut self, x: Var, alpha: f64) -> Result<Var> {
        self.unary(Unary::Elu(alpha), x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(Unary::Scale(-1.0), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary(Unary::AddScalar(c), x)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    /// Elementwise binary op. `b` may equal `a` in shape, be a single
    /// element, or match a trailing suffix of `a`'s shape (row broadcast).
    pub fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        if !broadcastable(av.shape(), bv.shape()) {
            return dim_err(
                name,
                format!("cannot combine {:?} with {:?}", av.shape(), bv.shape()),
            );
        }
        let bl = bv.len();
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<f64> = match kind {
            Binary::Add => ad.iter().enumerate().map(|(i, x)| x + bd[i % bl]).collect(),
            Binary::Sub => ad.iter().enumerate().map(|(i, x)| x - bd[i % bl]).collect(),
            Binary::Mul => ad.iter().enumerate().map(|(i, x)| x * bd[i % bl]).collect(),
            Binary::Div => ad.iter().enumerate().map(|(i, x)| x / bd[i % bl]).collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let r = self.req(a) || self.req(b);
        Ok(self.push(out, Op::Binary(kind, a, b), r))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    /// `[m x k] @ [k x n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = match av.dims2() {
            Ok(d) => d,
            Err(_) => return dim_err("matmul", format!("lhs {:?} is not a matrix", av.shape())),
        };
        let (k2, n) = match bv.dims2() {
            Ok(d) => d,
            Err(_) => return dim_err("matmul", format!("rhs {:?} is not a matrix", bv.shape())),
        };
        if k != k2 {
            return dim_err(
                "matmul",
                format!("inner dims differ: {:?} @ {:?}", av.shape(), bv.shape()),
            );
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), false, &mut out, 0.0);
        let r = self.req(a) || self.req(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), r))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (r, c) = xv.dims2()?;
        let d = xv.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        let rq = self.req(x);
        Ok(self.push(Tensor::new(vec![c, r], out)?, Op::Transpose(x), rq))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return dim_err("concat", format!("axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let ok = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return dim_err("concat", format!("shape {s:?} incompatible with {base:?}"));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = Tensor::axis_split(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let pv = self.value(p);
                let block = pv.shape()[axis] * inner;
                out.extend_from_slice(&pv.data()[o * block..(o + 1) * block]);
            }
        }
        let r = parts.iter().any(|&p| self.req(p));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            r,
        ))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return dim_err("concat", "no inputs");
        };
        let axis = self.value(first).rank() - 1;
        self.concat(parts, axis)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return dim_err(
                "slice",
                format!("[{start}, {}) along axis {axis} of {shape:?}", start + len),
            );
        }
        let (outer, alen, inner) = Tensor::axis_split(shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * alen + start) * inner;
            out.extend_from_slice(&xv.data()[from..from + len * inner]);
        }
        let mut oshape = shape.to_vec();
        oshape[axis] = len;
        let r = self.req(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::Slice { x, axis, start }, r))
    }

    /// Row `i` of a matrix as a `[1 x d]` matrix.
    pub fn row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice(x, 0, i, 1)
    }

    /// Mean along `axis`, dropping that axis (a rank-1 input gives `[1]`).
    pub fn mean_pool(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        if axis >= shape.len() {
            return dim_err("mean_pool", format!("axis {axis} out of range for {shape:?}"));
        }
        let (outer, alen, inner) = Tensor::axis_split(shape, axis);
        let mut out = vec![0.0; outer * inner];
        let d = xv.data();
        for o in 0..outer {
            for a in 0..alen {
                let src = &d[(o * alen + a) * inner..(o * alen + a + 1) * inner];
                for (dst, s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let inv = 1.0 / alen as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut oshape: Vec<usize> = shape.to_vec();
        oshape.remove(axis);
        if oshape.is_empty() {
            oshape.push(1);
        }
        let r = self.req(x);
        Ok(self.push(Tensor::new(oshape, out)?, Op::MeanPool { x, axis }, r))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        let r = self.req(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), r))
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, "softmax", false)?;
        let r = self.req(x);
        Ok(self.push(out, Op::Softmax { x, axis }, r))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let out = self.softmax_values(x, axis, "log_softmax", true)?;
        let r = self.req(x);
        Ok(self.push(out, Op::LogSoftmax { x, axis }, r))
    }

    fn softmax_values(&self, x: Var, axis: usize, op: &'static str, log: bool) -> Result<Tensor> {
        let xv = self.value(x);
        if axis >= xv.rank() {
            return dim_err(op, format!("axis {axis} out of range for {:?}", xv.shape()));
        }
        if !xv.all_finite() {
            return Err(Error::Numeric {
                op,
                detail: "non-finite input".into(),
            });
        }
        let (outer, alen, inner) = Tensor::axis_split(xv.shape(), axis);
        let d = xv.data();
        let mut out = vec![0.0; d.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * alen + a) * inner + i;
                let max = (0..alen).map(|a| d[at(a)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for a in 0..alen {
                    let e = (d[at(a)] - max).exp();
                    out[at(a)] = e;
                    total += e;
                }
                if log {
                    let lse = total.ln();
                    for a in 0..alen {
                        out[at(a)] = d[at(a)] - max - lse;
                    }
                } else {
                    for a in 0..alen {
                        out[at(a)] /= total;
                    }
                }
            }
        }
        Tensor::new(xv.shape().to_vec(), out)
    }

    /// Row gather from a `[V x d]` table.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = match tv.dims2() {
            Ok(x) => x,
            Err(_) => return dim_err("embedding_lookup", format!("table {:?}", tv.shape())),
        };
        if ids.is_empty() {
            return dim_err("embedding_lookup", "empty id list");
        }
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Index {
                    op: "embedding_lookup",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tv.row(id));
        }
        let r = self.req(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            r,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = (*self.nodes[x.0].value).clone().reshaped(shape.to_vec())?;
        let r = self.req(x);
        Ok(self.push(out, Op::Reshape(x), r))
    }

    /// `out[i] = sum_j coef_ij * x.flat[idx_ij]`: a sparse linear readout,
    /// used to assemble similarity scores from a similarity matrix.
    pub fn sparse_linear(&mut self, x: Var, terms: Vec<Vec<(usize, f64)>>) -> Result<Var> {
        let xv = self.value(x);
        if terms.is_empty() {
            return dim_err("sparse_linear", "no outputs");
        }
        let mut out = Vec::with_capacity(terms.len());
        for row in &terms {
            let mut s = 0.0;
            for &(idx, c) in row {
                if idx >= xv.len() {
                    return Err(Error::Index {
                        op: "sparse_linear",
                        index: idx,
                        bound: xv.len(),
                    });
                }
                s += c * xv.data()[idx];
            }
            out.push(s);
        }
        let r = self.req(x);
        Ok(self.push(Tensor::vector(out), Op::SparseLinear { x, terms }, r))
    }

    /// Dispatch by primitive kind.
    pub fn apply(&mut self, kind: &Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match kind {
            Primitive::MatMul | Primitive::Add | Primitive::Mul => 2,
            Primitive::ConcatLastAxis => inputs.len().max(1),
            _ => 1,
        };
        if inputs.len() != arity {
            return Err(Error::Contract(format!(
                "{kind:?} takes {arity} inputs, got {}",
                inputs.len()
            )));
        }
        match kind {
            Primitive::MatMul => self.matmul(inputs[0], inputs[1]),
            Primitive::Add => self.add(inputs[0], inputs[1]),
            Primitive::Mul => self.mul(inputs[0], inputs[1]),
            Primitive::ConcatLastAxis => self.concat_last(inputs),
            Primitive::Sigmoid => self.sigmoid(inputs[0]),
            Primitive::Tanh => self.tanh(inputs[0]),
            Primitive::Exp => self.exp(inputs[0]),
            Primitive::Log => self.log(inputs[0]),
            Primitive::LeakyRelu(s) => self.leaky_relu(inputs[0], *s),
            Primitive::MeanPool(axis) => self.mean_pool(inputs[0], *axis),
            Primitive::Slice { axis, start, len } => self.slice(inputs[0], *axis, *start, *len),
            Primitive::EmbeddingLookup(ids) => self.embedding_lookup(inputs[0], ids),
            Primitive::Softmax(axis) => self.softmax(inputs[0], *axis),
        }
    }

    // ---------------------------------------------------------------
    // composites

    /// `x @ w (+ b)` with `b` broadcast over rows.
    /// One LSTM direction over precomputed input projections `proj`
    /// (`[n x 4h]`, gate order input, forget, cell, output) with recurrent
    /// weights `w_hh` (`[h x 4h]`) and zero initial state. Steps run
    /// right to left when `reverse`. Returns hidden states `[n x h]`
    /// indexed by position.
    pub fn lstm(&mut self, proj: Var, w_hh: Var, reverse: bool) -> Result<Var> {
        let n = self.value(proj).shape().first().copied().unwrap_or(0);
        self.lstm_packed(proj, w_hh, &[n], reverse)
    }

    /// [`Tape::lstm`] over independent sequences stacked row-wise, with
    /// `lens` giving their lengths in order. Each sequence starts from a
    /// zero state; the recurrent product is shared across sequences at
    /// each step.
    pub fn lstm_packed(&mut self, proj: Var, w_hh: Var, lens: &[usize], reverse: bool) -> Result<Var> {
        let (n, g4) = self.value(proj).dims2()?;
        let (h, g4w) = self.value(w_hh).dims2()?;
        if g4 != 4 * h || g4w != 4 * h {
            return dim_err(
                "lstm",
                format!(
                    "projections {:?} with recurrent weights {:?}",
                    self.value(proj).shape(),
                    self.value(w_hh).shape()
                ),
            );
        }
        if lens.iter().sum::<usize>() != n || lens.contains(&0) {
            return dim_err("lstm", format!("sequence lengths {lens:?} for {n} rows"));
        }
        let mut starts = Vec::with_capacity(lens.len());
        let mut acc = 0;
        for &l in lens {
            starts.push(acc);
            acc += l;
        }
        let mut by_len: Vec<usize> = (0..lens.len()).collect();
        by_len.sort_by(|&a, &b| lens[b].cmp(&lens[a]));
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let steps: Vec<Vec<usize>> = (0..max_len)
            .map(|s| {
                by_len
                    .iter()
                    .take_while(|&&u| lens[u] > s)
                    .map(|&u| {
                        if reverse {
                            starts[u] + lens[u] - 1 - s
                        } else {
                            starts[u] + s
                        }
                    })
                    .collect()
            })
            .collect();

        let pv = self.value(proj).data();
        let wv = self.value(w_hh).data();
        let mut out = vec![0.0; n * h];
        let mut cache = vec![0.0; n * 6 * h];
        let batch = lens.len();
        let mut state = vec![0.0; batch * h];
        let mut gates = vec![0.0; batch * 4 * h];
        for (s, rows) in steps.iter().enumerate() {
            let b = rows.len();
            if s > 0 {
                gemm(b, h, 4 * h, &state[..b * h], false, wv, false, &mut gates[..b * 4 * h], 0.0);
            }
            for (k, &t) in rows.iter().enumerate() {
                let gk = &mut gates[k * 4 * h..(k + 1) * 4 * h];
                let pt = &pv[t * 4 * h..(t + 1) * 4 * h];
                if s > 0 {
                    for (g, p) in gk.iter_mut().zip(pt) {
                        *g += p;
                    }
                } else {
                    gk.copy_from_slice(pt);
                }
                let prev = if s > 0 {
                    Some(steps[s - 1][k])
                } else {
                    None
                };
                for j in 0..h {
                    let i = sigmoid(gk[j]);
                    let f = sigmoid(gk[h + j]);
                    let g = gk[2 * h + j].tanh();
                    let o = sigmoid(gk[3 * h + j]);
                    let c_prev = prev.map_or(0.0, |p| cache[p * 6 * h + 4 * h + j]);
                    let cell = f * c_prev + i * g;
                    let tc = cell.tanh();
                    let c = &mut cache[t * 6 * h..(t + 1) * 6 * h];
                    c[j] = i;
                    c[h + j] = f;
                    c[2 * h + j] = g;
                    c[3 * h + j] = o;
                    c[4 * h + j] = cell;
                    c[5 * h + j] = tc;
                    state[k * h + j] = o * tc;
                }
                out[t * h..(t + 1) * h].copy_from_slice(&state[k * h..(k + 1) * h]);
            }
        }
        let r = self.req(proj) || self.req(w_hh);
        Ok(self.push(
            Tensor::new(vec![n, h], out)?,
            Op::Lstm(Box::new(LstmTrace {
                proj,
                w_hh,
                steps,
                cache,
            })),
            r,
        ))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add(y, b),
            None => Ok(y),
        }
    }

    /// Inverted dropout with a constant mask; identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Result<Var> {
        if p <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - p;
        let mask = self
            .value(x)
            .map(|_| if rng.gen::<f64>() < keep { 1.0 / keep } else { 0.0 });
        let m = self.constant(mask);
        self.mul(x, m)
    }

    // ---------------------------------------------------------------
    // reverse pass

    /// Propagates `d loss / d node` to every differentiable leaf.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(lv.shape(), 1.0));
        let mut outer = OuterProducts::default();
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads, &mut outer)?;
        }
        for (v, o) in outer.0 {
            let rows = o.lhs.len() / o.k;
            self.accum_with(&mut grads, Var(v), |dw| {
                gemm(o.k, rows, o.n, &o.lhs, true, &o.rhs, false, dw, 1.0)
            });
        }
        Ok(Gradients { grads })
    }

    /// Runs [`Tape::backward`] and adds parameter gradients into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for &(v, id) in &self.param_order {
            if let Some(g) = grads.get(v) {
                store.get_mut(id).grad.add_assign(g);
            }
        }
        Ok(grads)
    }

    /// Hands `f` the gradient buffer of `v`, creating it zeroed if needed.
    fn accum_with(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = grads[v.0].get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape()));
        f(buf.data_mut());
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn lstm_backward(
        &self,
        trace: &LstmTrace,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        outer: &mut OuterProducts,
    ) -> Result<()> {
        let (n, h) = g.dims2()?;
        let wv = self.value(trace.w_hh).data();
        let cache = &trace.cache;
        let gd = g.data();
        let batch = trace.steps.first().map_or(0, Vec::len);
        // pre-activation gate gradients, indexed by row
        let mut dgates = vec![0.0; n * 4 * h];
        let mut dh = vec![0.0; batch * h];
        let mut dc = vec![0.0; batch * h];
        let mut packed = vec![0.0; batch * 4 * h];
        for (s, rows) in trace.steps.iter().enumerate().rev() {
            let b = rows.len();
            for (k, &t) in rows.iter().enumerate() {
                let c = &cache[t * 6 * h..(t + 1) * 6 * h];
                let prev = if s > 0 {
                    Some(trace.steps[s - 1][k])
                } else {
                    None
                };
                let row = &mut dgates[t * 4 * h..(t + 1) * 4 * h];
                for j in 0..h {
                    let (i, f, gg, o, tc) = (c[j], c[h + j], c[2 * h + j], c[3 * h + j], c[5 * h + j]);
                    let dhj = dh[k * h + j] + gd[t * h + j];
                    let dcj = dc[k * h + j] + dhj * o * (1.0 - tc * tc);
                    let c_prev = prev.map_or(0.0, |p| cache[p * 6 * h + 4 * h + j]);
                    row[j] = dcj * gg * i * (1.0 - i);
                    row[h + j] = dcj * c_prev * f * (1.0 - f);
                    row[2 * h + j] = dcj * i * (1.0 - gg * gg);
                    row[3 * h + j] = dhj * tc * o * (1.0 - o);
                    dc[k * h + j] = dcj * f;
                }
                packed[k * 4 * h..(k + 1) * 4 * h].copy_from_slice(row);
            }
            if s > 0 {
                // dh_prev = dG @ W_hh^T
                gemm(b, 4 * h, h, &packed[..b * 4 * h], false, wv, true, &mut dh[..b * h], 0.0);
            }
        }
        if self.req(trace.proj) {
            self.accum_with(grads, trace.proj, |dp| {
                for (d, s) in dp.iter_mut().zip(&dgates) {
                    *d += s;
                }
            });
        }
        if self.req(trace.w_hh) && trace.steps.len() > 1 {
            // dW_hh += H_prev^T @ dG over every step with a predecessor
            let mut h_prev = Vec::new();
            let mut dg = Vec::new();
            for (s, rows) in trace.steps.iter().enumerate().skip(1) {
                for (k, &t) in rows.iter().enumerate() {
                    let p = &cache[trace.steps[s - 1][k] * 6 * h..];
                    h_prev.extend((0..h).map(|j| p[3 * h + j] * p[5 * h + j]));
                    dg.extend_from_slice(&dgates[t * 4 * h..(t + 1) * 4 * h]);
                }
            }
            if matches!(self.nodes[trace.w_hh.0].op, Op::Leaf) {
                outer.push(self, trace.w_hh, &h_prev, &dg, h, 4 * h);
            } else {
                let rows = h_prev.len() / h;
                self.accum_with(grads, trace.w_hh, |dw| {
                    gemm(h, rows, 4 * h, &h_prev, true, &dg, false, dw, 1.0)
                });
            }
        }
        Ok(())
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        outer: &mut OuterProducts,
    ) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Unary(kind, x) => {
                let xv = self.value(*x);
                let gd = g.data();
                let yd = y.data();
                let xd = xv.data();
                let data: Vec<f64> = match *kind {
                    Unary::Sigmoid => (0..gd.len()).map(|i| gd[i] * yd[i] * (1.0 - yd[i])).collect(),
                    Unary::Tanh => (0..gd.len()).map(|i| gd[i] * (1.0 - yd[i] * yd[i])).collect(),
                    Unary::Exp => (0..gd.len()).map(|i| gd[i] * yd[i]).collect(),
                    Unary::Log => (0..gd.len()).map(|i| gd[i] / xd[i]).collect(),
                    Unary::Sqrt => (0..gd.len()).map(|i| gd[i] * 0.5 / yd[i]).collect(),
                    Unary::LeakyRelu(s) => (0..gd.len())
                        .map(|i| if xd[i] > 0.0 { gd[i] } else { s * gd[i] })
                        .collect(),
                    Unary::Elu(a) => (0..gd.len())
                        .map(|i| if xd[i] > 0.0 { gd[i] } else { gd[i] * (yd[i] + a) })
                        .collect(),
                    Unary::Scale(c) => gd.iter().map(|v| v * c).collect(),
                    Unary::AddScalar(_) => gd.to_vec(),
                    Unary::Clamp(lo, hi) => (0..gd.len())
                        .map(|i| if xd[i] >= lo && xd[i] <= hi { gd[i] } else { 0.0 })
                        .collect(),
                };
                self.accum(grads, *x, Tensor::new(xv.shape().to_vec(), data)?);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                let bl = bd.len();
                if self.req(*a) {
                    let da: Vec<f64> = match kind {
                        Binary::Add | Binary::Sub => gd.to_vec(),
                        Binary::Mul => (0..gd.len()).map(|i| gd[i] * bd[i % bl]).collect(),
                        Binary::Div => (0..gd.len()).map(|i| gd[i] / bd[i % bl]).collect(),
                    };
                    self.accum(grads, *a, Tensor::new(av.shape().to_vec(), da)?);
                }
                if self.req(*b) {
                    let mut db = vec![0.0; bl];
                    for i in 0..gd.len() {
                        let j = i % bl;
                        db[j] += match kind {
                            Binary::Add => gd[i],
                            Binary::Sub => -gd[i],
                            Binary::Mul => gd[i] * ad[i],
                            Binary::Div => -gd[i] * ad[i] / (bd[j] * bd[j]),
                        };
                    }
                    self.accum(grads, *b, Tensor::new(bv.shape().to_vec(), db)?);
                }
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = av.dims2()?;
                let n = bv.dims2()?.1;
                // dA += dC @ B^T, dB += A^T @ dC
                self.accum_with(grads, *a, |da| {
                    gemm(m, n, k, g.data(), false, bv.data(), true, da, 1.0)
                });
                if matches!(self.nodes[b.0].op, Op::Leaf) {
                    outer.push(self, *b, av.data(), g.data(), k, n);
                } else {
                    self.accum_with(grads, *b, |db| {
                        gemm(k, m, n, av.data(), true, g.data(), false, db, 1.0)
                    });
                }
            }
            Op::Transpose(x) => {
                let (r, c) = g.dims2()?;
                let gd = g.data();
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        out[j * r + i] = gd[i * c + j];
                    }
                }
                self.accum(grads, *x, Tensor::new(vec![c, r], out)?);
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = Tensor::axis_split(g.shape(), *axis);
                let total_block = g.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let ps = self.value(p).shape().to_vec();
                    let block = ps[*axis] * inner;
                    if self.req(p) {
                        let mut out = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let from = o * total_block + offset;
                            out.extend_from_slice(&g.data()[from..from + block]);
                        }
                        self.accum(grads, p, Tensor::new(ps, out)?);
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, alen, inner) = Tensor::axis_split(&xs, *axis);
                let len = g.shape()[*axis];
                self.accum_with(grads, *x, |out| {
                    for o in 0..outer {
                        let to = (o * alen + start) * inner;
                        let src = &g.data()[o * len * inner..(o + 1) * len * inner];
                        for (d, s) in out[to..to + len * inner].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                });
            }
            Op::MeanPool { x, axis } => {
                let xs = self.value(*x).shape().to_vec();
                let (outer, alen, inner) = Tensor::axis_split(&xs, *axis);
                let inv = 1.0 / alen as f64;
                let mut out = vec![0.0; xs.iter().product()];
                for o in 0..outer {
                    for a in 0..alen {
                        for i in 0..inner {
                            out[(o * alen + a) * inner + i] = g.data()[o * inner + i] * inv;
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(xs, out)?);
            }
            Op::Sum(x) => {
                let gv = g.data()[0];
                let xs = self.value(*x).shape();
                self.accum(grads, *x, Tensor::filled(xs, gv));
            }
            Op::Softmax { x, axis } | Op::LogSoftmax { x, axis } => {
                let is_log = matches!(node.op, Op::LogSoftmax { .. });
                let (outer, alen, inner) = Tensor::axis_split(y.shape(), *axis);
                let (yd, gd) = (y.data(), g.data());
                let mut out = vec![0.0; yd.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * alen + a) * inner + i;
                        if is_log {
                            let gsum: f64 = (0..alen).map(|a| gd[at(a)]).sum();
                            for a in 0..alen {
                                out[at(a)] = gd[at(a)] - yd[at(a)].exp() * gsum;
                            }
                        } else {
                            let dot: f64 = (0..alen).map(|a| gd[at(a)] * yd[at(a)]).sum();
                            for a in 0..alen {
                                out[at(a)] = yd[at(a)] * (gd[at(a)] - dot);
                            }
                        }
                    }
                }
                self.accum(grads, *x, Tensor::new(y.shape().to_vec(), out)?);
            }
            Op::Gather { table, ids } => {
                let d = self.value(*table).shape()[1];
                self.accum_with(grads, *table, |out| {
                    for (r, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[id * d + j] += g.data()[r * d + j];
                        }
                    }
                });
            }
            Op::Reshape(x) => {
                let xs = self.value(*x).shape().to_vec();
                self.accum(grads, *x, g.clone().reshaped(xs)?);
            }
            Op::SparseLinear { x, terms } => {
                self.accum_with(grads, *x, |out| {
                    for (row, gv) in terms.iter().zip(g.data()) {
                        for &(idx, c) in row {
                            out[idx] += c * gv;
                        }
                    }
                });
            }
            Op::Lstm(trace) => self.lstm_backward(trace, g, grads, outer)?,
        }
        Ok(())
    }
}

fn broadcastable(a: &[usize], b: &[usize]) -> bool {
    let bl: usize = b.iter().product();
    a == b || bl == 1 || (b.len() <= a.len() && a[a.len() - b.len()..] == *b)
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `c = op(a) @ op(b) + beta * c` where `op(a)` is `[m x k]`, `op(b)` is
/// `[k x n]`, and a transposed operand is stored in its untransposed layout.
#[allow(clippy::too_many_arguments)]
/// Pending `lhs^T @ rhs` contributions to leaf gradients. A weight shared
/// by many products gets one gemm over all of their rows instead of one
/// full-size update per product.
#[derive(Default)]
struct OuterProducts(std::collections::BTreeMap<usize, Outer>);

struct Outer {
    k: usize,
    n: usize,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
}

impl OuterProducts {
    fn push(&mut self, tape: &Tape, v: Var, lhs: &[f64], rhs: &[f64], k: usize, n: usize) {
        if !tape.nodes[v.0].requires_grad {
            return;
        }
        let o = self.0.entry(v.0).or_insert_with(|| Outer {
            k,
            n,
            lhs: Vec::new(),
            rhs: Vec::new(),
        });
        o.lhs.extend_from_slice(lhs);
        o.rhs.extend_from_slice(rhs);
    }
}

/// `out += v @ W` for a row vector `v` (`[k]`) and `W` (`[k x n]`).
fn vec_mat_acc(v: &[f64], w: &[f64], out: &mut [f64]) {
    let n = out.len();
    for (r, &a) in v.iter().enumerate() {
        if a == 0.0 {
            continue;
        }
        for (o, &b) in out.iter_mut().zip(&w[r * n..(r + 1) * n]) {
            *o += a * b;
        }
    }
}

/// `out += W @ v` for `W` (`[k x n]`) and `v` (`[n]`).
fn mat_vec_acc(w: &[f64], v: &[f64], out: &mut [f64]) {
    let n = v.len();
    for (r, o) in out.iter_mut().enumerate() {
        *o += w[r * n..(r + 1) * n].iter().zip(v).map(|(a, b)| a * b).sum::<f64>();
    }
}

fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_t: bool,
    b: &[f64],
    b_t: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    assert_eq!(c.len(), m * n);
    // packing dominates for a single row; use plain loops
    if m == 1 && beta == 1.0 {
        if !b_t {
            vec_mat_acc(a, b, c);
        } else {
            mat_vec_acc(b, a, c);
        }
        return;
    }
    if m == 1 && beta == 0.0 {
        c.fill(0.0);
        if !b_t {
            vec_mat_acc(a, b, c);
        } else {
            mat_vec_acc(b, a, c);
        }
        return;
    }
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches for
    // the given dims and strides; `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
