//! Margin-based similarity and the InfoNCE-style losses at coarse
//! utterance, fine utterance, slot and word level.
//!
//! The margin similarity subtracts from `cos(x, y)` the mean cosine of each
//! argument to its `k` nearest neighbours in a pool (the pool never contains
//! `x` or `y`), halved per side:
//!
//! ```text
//! sim(x, y) = cos(x, y) - (Σ_{z ∈ NN_k(x)} cos(x, z) + Σ_{z ∈ NN_k(y)} cos(y, z)) / 2k
//! ```
//!
//! On the tape all four levels share one pass: the cosine matrix over the
//! level's rows is built once and each score is a sparse linear readout of
//! it, so gradients reach every cosine that entered a score (neighbour
//! selection itself is piecewise constant).

use crate::augment::{ChunkRef, ContrastiveBatch, FineTarget, TokenRef, UttRef};
use crate::autodiff::{Tape, Var};
use crate::corpus::SlotSpan;
use crate::error::{dim_err, Error, Result};
use crate::tensor::Tensor;
use std::collections::HashMap;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum PoolScope {
    #[default]
    Batch,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SimilarityConfig {
    pub k: usize,
    pub tau: f64,
    pub pool_scope: PoolScope,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            k: 4,
            tau: 2.0,
            pool_scope: PoolScope::Batch,
        }
    }
}

impl SimilarityConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn cosine(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() {
        return dim_err("cosine", format!("lengths {} and {}", x.len(), y.len()));
    }
    let nx = x.iter().map(|v| v * v).sum::<f64>().sqrt();
    let ny = y.iter().map(|v| v * v).sum::<f64>().sqrt();
    if nx == 0.0 || ny == 0.0 {
        return Err(Error::Degenerate("cosine of a zero vector".into()));
    }
    let dot: f64 = x.iter().zip(y).map(|(a, b)| a * b).sum();
    Ok((dot / (nx * ny)).clamp(-1.0, 1.0))
}

/// Neighbour count actually usable given `pool_size` candidates.
fn effective_k(k: usize, pool_size: usize) -> usize {
    if k > pool_size {
        log::trace!("k = {k} clamped to pool size {pool_size}");
    }
    k.min(pool_size)
}

fn knn_mean_part(x: &[f64], pool: &[&[f64]], k: usize) -> Result<f64> {
    let mut sims = pool
        .iter()
        .map(|z| cosine(x, z))
        .collect::<Result<Vec<_>>>()?;
    sims.sort_by(|a, b| b.total_cmp(a));
    Ok(sims[..k].iter().sum::<f64>())
}

/// Margin similarity of `x` and `y` against `pool` (which must not contain
/// `x` or `y`). `k` larger than the pool is clamped.
pub fn margin_similarity(
    x: &[f64],
    y: &[f64],
    pool: &[&[f64]],
    cfg: &SimilarityConfig,
) -> Result<f64> {
    let base = cosine(x, y)?;
    let k = effective_k(cfg.k, pool.len());
    if k == 0 {
        return Ok(base);
    }
    let corr = knn_mean_part(x, pool, k)? + knn_mean_part(y, pool, k)?;
    Ok(base - corr / (2 * k) as f64)
}

/// `-log(e^{s+/τ} / (e^{s+/τ} + Σ e^{s_k/τ}))`, evaluated as a log-sum-exp.
pub fn info_nce_scores(positive: f64, negatives: &[f64], tau: f64) -> f64 {
    let scaled = std::iter::once(positive)
        .chain(negatives.iter().copied())
        .map(|s| s / tau);
    let max = scaled.clone().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + scaled.map(|s| (s - max).exp()).sum::<f64>().ln();
    lse - positive / tau
}

pub fn info_nce<F>(
    anchor: &[f64],
    positive: &[f64],
    negatives: &[&[f64]],
    cfg: &SimilarityConfig,
    sim: F,
) -> Result<f64>
where
    F: Fn(&[f64], &[f64]) -> Result<f64>,
{
    let sp = sim(anchor, positive)?;
    let sn = negatives
        .iter()
        .map(|n| sim(anchor, n))
        .collect::<Result<Vec<_>>>()?;
    Ok(info_nce_scores(sp, &sn, cfg.tau))
}

/// One level's anchors in row-index form.
#[derive(Clone, Debug, PartialEq)]
pub struct RowPair {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Row-wise cosine matrix `[M x M]` of `rows` on the tape.
pub fn cosine_matrix(tape: &mut Tape, rows: Var) -> Result<Var> {
    let (m, d) = tape.value(rows).dims2()?;
    for i in 0..m {
        if tape.value(rows).row(i).iter().all(|&v| v == 0.0) {
            return Err(Error::Degenerate(format!("representation row {i} is zero")));
        }
    }
    let rt = tape.transpose(rows)?;
    let dots = tape.matmul(rows, rt)?;
    let sq = tape.mul(rows, rows)?;
    let ms = tape.mean_pool(sq, 1)?;
    let ss = tape.scale(ms, d as f64)?;
    let norms = tape.sqrt(ss)?;
    let col = tape.reshape(norms, &[m, 1])?;
    let rowv = tape.reshape(norms, &[1, m])?;
    let outer = tape.matmul(col, rowv)?;
    tape.div(dots, outer)
}

/// Mean InfoNCE over `pairs`, with margin similarities read from the cosine
/// matrix `cos` (`[M x M]`); `pool[z]` marks rows eligible as neighbours.
/// Returns a constant zero when there are no pairs.
pub fn level_loss(
    tape: &mut Tape,
    cos: Var,
    pool: &[bool],
    pairs: &[RowPair],
    cfg: &SimilarityConfig,
) -> Result<Var> {
    if pairs.is_empty() {
        return Ok(tape.constant(Tensor::scalar(0.0)));
    }
    let (m, m2) = tape.value(cos).dims2()?;
    if m != m2 || pool.len() != m {
        return dim_err("level_loss", format!("cosine {m}x{m2} with pool {}", pool.len()));
    }
    let cv = tape.value(cos).clone();
    let mut ranked: HashMap<usize, Vec<usize>> = HashMap::new();
    let mut ranking = |x: usize| -> Vec<usize> {
        ranked
            .entry(x)
            .or_insert_with(|| {
                let mut idx: Vec<usize> = (0..m).filter(|&z| pool[z] && z != x).collect();
                idx.sort_by(|&a, &b| cv.get2(x, b).total_cmp(&cv.get2(x, a)).then(a.cmp(&b)));
                idx
            })
            .clone()
    };
    let pool_total = pool.iter().filter(|&&p| p).count();

    let mut terms = Vec::new();
    let mut segments = Vec::with_capacity(pairs.len());
    for p in pairs {
        let start = terms.len();
        for &y in std::iter::once(&p.positive).chain(&p.negatives) {
            let x = p.anchor;
            if x >= m || y >= m {
                return Err(Error::Index {
                    op: "level_loss",
                    index: x.max(y),
                    bound: m,
                });
            }
            let excluded = usize::from(pool[x]) + usize::from(pool[y] && y != x);
            let k = effective_k(cfg.k, pool_total - excluded);
            let mut row = vec![(x * m + y, 1.0)];
            if k > 0 {
                let w = -1.0 / (2 * k) as f64;
                for (a, b) in [(x, y), (y, x)] {
                    row.extend(
                        ranking(a)
                            .into_iter()
                            .filter(|&z| z != b)
                            .take(k)
                            .map(|z| (a * m + z, w)),
                    );
                }
            }
            terms.push(row);
        }
        segments.push((start, terms.len() - start));
    }
    let scores = tape.sparse_linear(cos, terms)?;
    let mut per_anchor = Vec::with_capacity(pairs.len());
    for (start, len) in segments {
        let seg = tape.slice(scores, 0, start, len)?;
        let scaled = tape.scale(seg, 1.0 / cfg.tau)?;
        let ls = tape.log_softmax(scaled, 0)?;
        per_anchor.push(tape.slice(ls, 0, 0, 1)?);
    }
    let all = tape.concat(&per_anchor, 0)?;
    let mean = tape.mean_all(all)?;
    tape.neg(mean)
}

/// Encoder-output rows for one batch: base utterances first, then their
/// positives, with utterance and chunk means derived from them.
#[derive(Debug)]
pub struct RepresentationSet {
    /// All token rows `[T x d]`.
    pub tokens: Var,
    /// Utterance means `[2B x d]`: bases `0..B`, positives `B..2B`.
    pub utterances: Var,
    /// Chunk means `[C x d]`, or `None` when the batch has no chunks.
    pub chunks: Option<Var>,
    batch: usize,
    token_offset: HashMap<UttRef, usize>,
    chunk_row: HashMap<ChunkRef, usize>,
    num_tokens: usize,
}

impl RepresentationSet {
    /// `base_e[i]` and `pos_e[i]` are `[n x d]` encoder outputs; spans give
    /// the chunks of each utterance.
    pub fn build(
        tape: &mut Tape,
        base_e: &[Var],
        pos_e: &[Var],
        base_spans: &[Vec<SlotSpan>],
        pos_spans: &[Vec<SlotSpan>],
    ) -> Result<Self> {
        let b = base_e.len();
        if pos_e.len() != b || base_spans.len() != b || pos_spans.len() != b {
            return Err(Error::Contract("representation inputs disagree in length".into()));
        }
        let mut token_offset = HashMap::new();
        let mut lens = Vec::with_capacity(2 * b);
        let mut offset = 0;
        for (i, &e) in base_e.iter().enumerate() {
            token_offset.insert(UttRef::Base(i), offset);
            let n = tape.value(e).dims2()?.0;
            lens.push((offset, n));
            offset += n;
        }
        for (i, &e) in pos_e.iter().enumerate() {
            token_offset.insert(UttRef::Positive(i), offset);
            let n = tape.value(e).dims2()?.0;
            lens.push((offset, n));
            offset += n;
        }
        let total = offset;
        let all: Vec<Var> = base_e.iter().chain(pos_e).copied().collect();
        let tokens = tape.concat(&all, 0)?;

        let mut avg = vec![0.0; 2 * b * total];
        for (r, &(off, n)) in lens.iter().enumerate() {
            for t in off..off + n {
                avg[r * total + t] = 1.0 / n as f64;
            }
        }
        let a = tape.constant(Tensor::new(vec![2 * b, total], avg)?);
        let utterances = tape.matmul(a, tokens)?;

        let mut chunk_row = HashMap::new();
        let mut chunk_avg: Vec<Vec<f64>> = Vec::new();
        for (which, spans) in [(0usize, base_spans), (1, pos_spans)] {
            for (i, ss) in spans.iter().enumerate() {
                let u = if which == 0 {
                    UttRef::Base(i)
                } else {
                    UttRef::Positive(i)
                };
                let off = token_offset[&u];
                for (c, s) in ss.iter().enumerate() {
                    let mut row = vec![0.0; total];
                    for t in s.start..=s.end {
                        row[off + t] = 1.0 / s.len() as f64;
                    }
                    chunk_row.insert(ChunkRef { utt: u, chunk: c }, chunk_avg.len());
                    chunk_avg.push(row);
                }
            }
        }
        let chunks = if chunk_avg.is_empty() {
            None
        } else {
            let a = tape.constant(Tensor::from_rows(&chunk_avg)?);
            Some(tape.matmul(a, tokens)?)
        };
        Ok(Self {
            tokens,
            utterances,
            chunks,
            batch: b,
            token_offset,
            chunk_row,
            num_tokens: total,
        })
    }

    pub fn utterance_row(&self, u: UttRef) -> usize {
        match u {
            UttRef::Base(i) => i,
            UttRef::Positive(i) => self.batch + i,
        }
    }

    pub fn token_row(&self, t: TokenRef) -> Result<usize> {
        self.token_offset
            .get(&t.utt)
            .map(|o| o + t.pos)
            .ok_or_else(|| Error::Contract(format!("unknown utterance {:?}", t.utt)))
    }

    pub fn chunk_row(&self, c: ChunkRef) -> Result<usize> {
        self.chunk_row
            .get(&c)
            .copied()
            .ok_or_else(|| Error::Contract(format!("unknown chunk {c:?}")))
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_chunks(&self) -> usize {
        self.chunk_row.len()
    }
}

/// Which contrastive levels to compute.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LevelToggles {
    pub coarse: bool,
    pub fine: bool,
    pub slot: bool,
    pub word: bool,
}

impl LevelToggles {
    pub const ALL: Self = Self {
        coarse: true,
        fine: true,
        slot: true,
        word: true,
    };
}

/// The four contrastive losses; a disabled or empty level is a constant 0.
#[derive(Clone, Copy, Debug)]
pub struct LevelLosses {
    pub slot: Var,
    pub word: Var,
    pub coarse: Var,
    pub fine: Var,
}

pub fn level_losses(
    tape: &mut Tape,
    reps: &RepresentationSet,
    pairs: &ContrastiveBatch,
    cfg: &SimilarityConfig,
    on: LevelToggles,
) -> Result<LevelLosses> {
    cfg.validate()?;
    let zero = |tape: &mut Tape| tape.constant(Tensor::scalar(0.0));

    let coarse = if on.coarse && !pairs.coarse_utt.is_empty() {
        let cos = cosine_matrix(tape, reps.utterances)?;
        let rows: Vec<RowPair> = pairs
            .coarse_utt
            .iter()
            .map(|p| RowPair {
                anchor: reps.utterance_row(p.anchor),
                positive: reps.utterance_row(p.positive),
                negatives: p.negatives.iter().map(|&n| reps.utterance_row(n)).collect(),
            })
            .collect();
        let pool = vec![true; 2 * reps.batch];
        level_loss(tape, cos, &pool, &rows, cfg)?
    } else {
        zero(tape)
    };

    let need_tokens = (on.fine && !pairs.fine_utt.is_empty())
        || (on.word && !pairs.word.is_empty())
        || (on.slot && !pairs.slot.is_empty());
    let (mut fine, mut slot, mut word) = (zero(tape), zero(tape), zero(tape));
    if need_tokens {
        // token rows, then chunk-mean rows
        let t = reps.num_tokens;
        let rows = match reps.chunks {
            Some(c) => tape.concat(&[reps.tokens, c], 0)?,
            None => reps.tokens,
        };
        let m = tape.value(rows).dims2()?.0;
        let cos = cosine_matrix(tape, rows)?;

        if on.fine && !pairs.fine_utt.is_empty() {
            let pool: Vec<bool> = (0..m).map(|r| r < t).collect();
            let rp = pairs
                .fine_utt
                .iter()
                .map(|p| {
                    Ok(RowPair {
                        anchor: reps.token_row(p.anchor)?,
                        positive: match p.positive {
                            FineTarget::Token(tr) => reps.token_row(tr)?,
                            FineTarget::ChunkMean(c) => t + reps.chunk_row(c)?,
                        },
                        negatives: p
                            .negatives
                            .iter()
                            .map(|&n| reps.token_row(n))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            fine = level_loss(tape, cos, &pool, &rp, cfg)?;
        }
        if on.slot && !pairs.slot.is_empty() {
            let pool: Vec<bool> = (0..m).map(|r| r >= t).collect();
            let rp = pairs
                .slot
                .iter()
                .map(|p| {
                    Ok(RowPair {
                        anchor: t + reps.chunk_row(p.anchor)?,
                        positive: t + reps.chunk_row(p.positive)?,
                        negatives: p
                            .negatives
                            .iter()
                            .map(|&n| Ok(t + reps.chunk_row(n)?))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            slot = level_loss(tape, cos, &pool, &rp, cfg)?;
        }
        if on.word && !pairs.word.is_empty() {
            let mut pool = vec![false; m];
            for &r in &pairs.word_pool {
                pool[reps.token_row(r)?] = true;
            }
            let rp = pairs
                .word
                .iter()
                .map(|p| {
                    Ok(RowPair {
                        anchor: reps.token_row(p.anchor)?,
                        positive: reps.token_row(p.positive)?,
                        negatives: p
                            .negatives
                            .iter()
                            .map(|&n| reps.token_row(n))
                            .collect::<Result<_>>()?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            word = level_loss(tape, cos, &pool, &rp, cfg)?;
        }
    }
    Ok(LevelLosses {
        slot,
        word,
        coarse,
        fine,
    })
}
