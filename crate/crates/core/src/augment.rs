//! Positive-example generation by slot substitution, and pair enumeration
//! for the four contrastive levels.

use crate::corpus::{parse_tag, SlotDictionary, Tag, Utterance};
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

/// An utterance with every slot phrase swapped for a dictionary phrase of
/// the same type.
#[derive(Clone, Debug, PartialEq)]
pub struct PositiveUtterance {
    pub base: Utterance,
    pub utterance: Utterance,
    /// (base chunk index, positive chunk index), in chunk order.
    pub chunk_map: Vec<(usize, usize)>,
    /// (base position, positive position) for every `O` token.
    pub outside_map: Vec<(usize, usize)>,
    /// Whether each base chunk was actually substituted.
    pub replaced: Vec<bool>,
}

/// Replaces each chunk of `u` with a phrase drawn uniformly (multiplicity
/// counts) from the dictionary entry of its type. Chunks whose type is
/// missing from the dictionary are kept as they are.
pub fn generate_positive<R: Rng>(
    u: &Utterance,
    dict: &SlotDictionary,
    rng: &mut R,
) -> Result<PositiveUtterance> {
    let spans = u.spans()?;
    let mut tokens = Vec::with_capacity(u.len());
    let mut tags = Vec::with_capacity(u.len());
    let mut chunk_map = Vec::with_capacity(spans.len());
    let mut outside_map = Vec::new();
    let mut replaced = Vec::with_capacity(spans.len());
    let mut next = spans.iter().enumerate().peekable();
    let mut i = 0;
    while i < u.len() {
        match next.peek() {
            Some(&(c, span)) if span.start == i => {
                let phrase = match dict.phrases(&span.slot_type) {
                    Some(p) if !p.is_empty() => {
                        replaced.push(true);
                        &p[rng.gen_range(0..p.len())]
                    }
                    _ => {
                        log::debug!("slot type {} not in dictionary; chunk kept", span.slot_type);
                        replaced.push(false);
                        &span.surface
                    }
                };
                chunk_map.push((c, c));
                for (k, w) in phrase.iter().enumerate() {
                    let prefix = if k == 0 { "B" } else { "I" };
                    tokens.push(w.clone());
                    tags.push(format!("{prefix}-{}", span.slot_type));
                }
                i = span.end + 1;
                next.next();
            }
            _ => {
                outside_map.push((i, tokens.len()));
                tokens.push(u.tokens[i].clone());
                tags.push(u.slot_tags[i].clone());
                i += 1;
            }
        }
    }
    Ok(PositiveUtterance {
        base: u.clone(),
        utterance: Utterance::new(tokens, tags, u.intents.clone())?,
        chunk_map,
        outside_map,
        replaced,
    })
}

/// Which utterance of a batch a reference points into.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum UttRef {
    Base(usize),
    Positive(usize),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct TokenRef {
    pub utt: UttRef,
    pub pos: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub struct ChunkRef {
    pub utt: UttRef,
    pub chunk: usize,
}

/// Fine-grained positive: an aligned token, or the mean of a substituted
/// chunk whose length differs from the original.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize)]
pub enum FineTarget {
    Token(TokenRef),
    ChunkMean(ChunkRef),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Pair<A, P = A> {
    pub anchor: A,
    pub positive: P,
    pub negatives: Vec<A>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct ContrastiveBatch {
    pub coarse_utt: Vec<Pair<UttRef>>,
    pub fine_utt: Vec<Pair<TokenRef, FineTarget>>,
    pub slot: Vec<Pair<ChunkRef>>,
    pub word: Vec<Pair<TokenRef>>,
    /// Every non-`O` base token: the neighbour pool for word-level scores.
    pub word_pool: Vec<TokenRef>,
}

#[derive(Serialize)]
struct ManifestRecord<'a, A: Serialize, P: Serialize> {
    level: &'static str,
    anchor: &'a A,
    positive: &'a P,
    negatives: &'a [A],
}

impl ContrastiveBatch {
    /// One JSON object per pair.
    pub fn manifest_lines(&self) -> Result<Vec<String>> {
        fn emit<A: Serialize, P: Serialize>(
            out: &mut Vec<String>,
            level: &'static str,
            pairs: &[Pair<A, P>],
        ) -> Result<()> {
            for p in pairs {
                out.push(serde_json::to_string(&ManifestRecord {
                    level,
                    anchor: &p.anchor,
                    positive: &p.positive,
                    negatives: &p.negatives,
                })?);
            }
            Ok(())
        }
        let mut out = Vec::new();
        emit(&mut out, "coarse_utterance", &self.coarse_utt)?;
        emit(&mut out, "fine_utterance", &self.fine_utt)?;
        emit(&mut out, "slot", &self.slot)?;
        emit(&mut out, "word", &self.word)?;
        Ok(out)
    }
}

fn pick<T: Copy, R: Rng>(pool: &[T], k: usize, rng: &mut R) -> Vec<T> {
    if pool.len() <= k {
        return pool.to_vec();
    }
    sample(rng, pool.len(), k).iter().map(|i| pool[i]).collect()
}

fn suffix(tag: &str) -> Result<Option<&str>> {
    Ok(match parse_tag(tag)? {
        Tag::Outside => None,
        Tag::Begin(t) | Tag::Inside(t) => Some(t),
    })
}

/// Enumerates anchors, positives and negatives at all four levels for a
/// batch of base utterances and their positives.
pub fn build_batch_pairs<R: Rng>(
    bases: &[Utterance],
    positives: &[PositiveUtterance],
    rng: &mut R,
    negatives_per_anchor: usize,
) -> Result<ContrastiveBatch> {
    if bases.len() < 2 || bases.len() != positives.len() {
        return Err(Error::Contract(format!(
            "pair construction needs >= 2 bases each with one positive, got {} and {}",
            bases.len(),
            positives.len()
        )));
    }
    let k = negatives_per_anchor;
    let b = bases.len();
    let base_spans = bases
        .iter()
        .map(Utterance::spans)
        .collect::<Result<Vec<_>>>()?;
    let pos_spans = positives
        .iter()
        .map(|p| p.utterance.spans())
        .collect::<Result<Vec<_>>>()?;

    let coarse_utt = (0..b)
        .map(|i| Pair {
            anchor: UttRef::Base(i),
            positive: UttRef::Positive(i),
            negatives: (0..b).filter(|&j| j != i).map(UttRef::Base).collect(),
        })
        .collect();

    let mut fine_utt = Vec::new();
    for i in 0..b {
        let others: Vec<TokenRef> = (0..b)
            .filter(|&j| j != i)
            .flat_map(|j| {
                (0..bases[j].len()).map(move |pos| TokenRef {
                    utt: UttRef::Base(j),
                    pos,
                })
            })
            .collect();
        let p = &positives[i];
        let mut target = vec![None; bases[i].len()];
        for &(from, to) in &p.outside_map {
            target[from] = Some(FineTarget::Token(TokenRef {
                utt: UttRef::Positive(i),
                pos: to,
            }));
        }
        for &(bc, pc) in &p.chunk_map {
            let (src, dst) = (&base_spans[i][bc], &pos_spans[i][pc]);
            for (off, slot) in target[src.start..=src.end].iter_mut().enumerate() {
                *slot = Some(if src.len() == dst.len() {
                    FineTarget::Token(TokenRef {
                        utt: UttRef::Positive(i),
                        pos: dst.start + off,
                    })
                } else {
                    FineTarget::ChunkMean(ChunkRef {
                        utt: UttRef::Positive(i),
                        chunk: pc,
                    })
                });
            }
        }
        for (pos, t) in target.into_iter().enumerate() {
            let Some(positive) = t else { continue };
            fine_utt.push(Pair {
                anchor: TokenRef {
                    utt: UttRef::Base(i),
                    pos,
                },
                positive,
                negatives: pick(&others, k, rng),
            });
        }
    }

    let all_chunks: Vec<(ChunkRef, &str)> = (0..b)
        .flat_map(|i| {
            let base = base_spans[i].iter().enumerate().map(move |(c, s)| {
                (
                    ChunkRef {
                        utt: UttRef::Base(i),
                        chunk: c,
                    },
                    s.slot_type.as_str(),
                )
            });
            let pos = pos_spans[i].iter().enumerate().map(move |(c, s)| {
                (
                    ChunkRef {
                        utt: UttRef::Positive(i),
                        chunk: c,
                    },
                    s.slot_type.as_str(),
                )
            });
            base.chain(pos)
        })
        .collect();
    let mut slot = Vec::new();
    for i in 0..b {
        for &(bc, pc) in &positives[i].chunk_map {
            if !positives[i].replaced[bc] {
                continue;
            }
            let ty = base_spans[i][bc].slot_type.as_str();
            let pool: Vec<ChunkRef> = all_chunks
                .iter()
                .filter(|(_, t)| *t != ty)
                .map(|(c, _)| *c)
                .collect();
            slot.push(Pair {
                anchor: ChunkRef {
                    utt: UttRef::Base(i),
                    chunk: bc,
                },
                positive: ChunkRef {
                    utt: UttRef::Positive(i),
                    chunk: pc,
                },
                negatives: pick(&pool, k, rng),
            });
        }
    }

    let mut labelled: Vec<(TokenRef, &str)> = Vec::new();
    for (i, u) in bases.iter().enumerate() {
        for (pos, tag) in u.slot_tags.iter().enumerate() {
            if let Some(s) = suffix(tag)? {
                labelled.push((
                    TokenRef {
                        utt: UttRef::Base(i),
                        pos,
                    },
                    s,
                ));
            }
        }
    }
    let mut word = Vec::new();
    for &(anchor, ty) in &labelled {
        let same: Vec<TokenRef> = labelled
            .iter()
            .filter(|(r, t)| *t == ty && *r != anchor)
            .map(|(r, _)| *r)
            .collect();
        if same.is_empty() {
            continue;
        }
        let positive = same[rng.gen_range(0..same.len())];
        let diff: Vec<TokenRef> = labelled
            .iter()
            .filter(|(_, t)| *t != ty)
            .map(|(r, _)| *r)
            .collect();
        word.push(Pair {
            anchor,
            positive,
            negatives: pick(&diff, k, rng),
        });
    }

    Ok(ContrastiveBatch {
        coarse_utt,
        fine_utt,
        slot,
        word,
        word_pool: labelled.iter().map(|(r, _)| *r).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn utt(tokens: &str, tags: &str, intents: &str) -> Utterance {
        Utterance::parse_parts(tokens, tags, intents).unwrap()
    }

    fn dict_of(entries: &[(&str, &[&str])]) -> SlotDictionary {
        let mut us = Vec::new();
        for (ty, phrases) in entries {
            for p in *phrases {
                let n = p.split_whitespace().count();
                let tags: Vec<String> = (0..n)
                    .map(|k| format!("{}-{ty}", if k == 0 { "B" } else { "I" }))
                    .collect();
                us.push(utt(p, &tags.join(" "), "x"));
            }
        }
        SlotDictionary::from_utterances(&us).unwrap()
    }

    #[test]
    fn single_phrase_substitution() {
        let u = utt("fly to boston", "O O B-city", "flight");
        let d = dict_of(&[("city", &["denver"])]);
        let p = generate_positive(&u, &d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.utterance.tokens, ["fly", "to", "denver"]);
        assert_eq!(p.utterance.slot_tags, ["O", "O", "B-city"]);
        assert_eq!(p.utterance.intents, ["flight"]);
    }

    #[test]
    fn longer_phrase_reemits_bio() {
        let u = utt("fly to boston", "O O B-city", "flight");
        let d = dict_of(&[("city", &["new york"])]);
        let p = generate_positive(&u, &d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.utterance.slot_tags, ["O", "O", "B-city", "I-city"]);
        assert_eq!(p.utterance.len(), u.len() + 1);
    }

    #[test]
    fn missing_type_keeps_chunk() {
        let u = utt("fly delta", "O B-airline", "flight");
        let d = dict_of(&[("city", &["denver"])]);
        let p = generate_positive(&u, &d, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(p.utterance, u);
        assert_eq!(p.replaced, [false]);
    }

    #[test]
    fn multiplicity_weighted_sampling() {
        let u = utt("to boston", "O B-city", "flight");
        let d = dict_of(&[("city", &["a", "a", "b"])]);
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let hits = (0..1000)
            .filter(|_| generate_positive(&u, &d, &mut rng).unwrap().utterance.tokens[1] == "a")
            .count();
        let freq = hits as f64 / 1000.0;
        assert!((freq - 2.0 / 3.0).abs() < 0.05, "{freq}");
    }

    #[test]
    fn two_utterances_one_negative_each() {
        let a = utt("fly to boston", "O O B-city", "flight");
        let b = utt("weather today", "O B-date", "weather");
        let d = SlotDictionary::from_utterances(&[a.clone(), b.clone()]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![
            generate_positive(&a, &d, &mut rng).unwrap(),
            generate_positive(&b, &d, &mut rng).unwrap(),
        ];
        let batch = build_batch_pairs(&[a, b], &ps, &mut rng, 8).unwrap();
        assert_eq!(batch.coarse_utt.len(), 2);
        assert!(batch.coarse_utt.iter().all(|p| p.negatives.len() == 1));
    }

    #[test]
    fn word_level_suffix_rule() {
        let a = utt("to boston", "O B-city", "flight");
        let b = utt("from denver", "O B-city", "flight");
        let c = utt("on delta", "O B-airline", "flight");
        let us = vec![a, b, c];
        let d = SlotDictionary::from_utterances(&us).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let ps: Vec<_> = us
            .iter()
            .map(|u| generate_positive(u, &d, &mut rng).unwrap())
            .collect();
        let batch = build_batch_pairs(&us, &ps, &mut rng, 8).unwrap();
        let boston = TokenRef {
            utt: UttRef::Base(0),
            pos: 1,
        };
        let pair = batch.word.iter().find(|p| p.anchor == boston).unwrap();
        assert_eq!(
            pair.positive,
            TokenRef {
                utt: UttRef::Base(1),
                pos: 1
            }
        );
        assert_eq!(
            pair.negatives,
            [TokenRef {
                utt: UttRef::Base(2),
                pos: 1
            }]
        );
        // delta has no same-suffix partner
        assert!(!batch.word.iter().any(|p| p.anchor.utt == UttRef::Base(2)));
    }

    #[test]
    fn batch_of_one_rejected() {
        let a = utt("x", "O", "i");
        let d = SlotDictionary::default();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = generate_positive(&a, &d, &mut rng).unwrap();
        assert!(build_batch_pairs(&[a], &[p], &mut rng, 4).is_err());
    }
}
