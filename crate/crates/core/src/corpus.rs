//! Multi-intent SLU datasets: parsing, BIO chunking, vocabularies, and the
//! slot dictionary.
//!
//! Dataset files hold one utterance per block. Each block is a run of
//! `token<space>tag` lines followed by a single line of `#`-joined intent
//! labels; blocks are separated by blank lines.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub tokens: Vec<String>,
    pub slot_tags: Vec<String>,
    pub intents: Vec<String>,
}

impl Utterance {
    pub fn new(tokens: Vec<String>, slot_tags: Vec<String>, intents: Vec<String>) -> Result<Self> {
        if tokens.is_empty() || tokens.len() != slot_tags.len() {
            return Err(Error::Contract(format!(
                "utterance needs matching non-empty tokens/tags, got {} and {}",
                tokens.len(),
                slot_tags.len()
            )));
        }
        if intents.is_empty() {
            return Err(Error::Contract("utterance without intents".into()));
        }
        let unique: BTreeSet<&String> = intents.iter().collect();
        if unique.len() != intents.len() {
            return Err(Error::Contract(format!("duplicate intents in {intents:?}")));
        }
        Ok(Self {
            tokens,
            slot_tags,
            intents,
        })
    }

    /// Convenience constructor from whitespace-separated strings.
    pub fn parse_parts(tokens: &str, tags: &str, intents: &str) -> Result<Self> {
        let split = |s: &str| s.split_whitespace().map(str::to_string).collect::<Vec<_>>();
        Self::new(
            split(tokens),
            split(tags),
            intents.split('#').map(str::to_string).collect(),
        )
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn spans(&self) -> Result<Vec<SlotSpan>> {
        Ok(extract_chunks(&self.slot_tags)?
            .into_iter()
            .map(|c| SlotSpan {
                surface: self.tokens[c.start..=c.end].to_vec(),
                slot_type: c.slot_type,
                start: c.start,
                end: c.end,
            })
            .collect())
    }

    pub fn intent_set(&self) -> BTreeSet<&str> {
        self.intents.iter().map(String::as_str).collect()
    }
}

/// A maximal typed phrase: `tokens[start..=end]`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chunk {
    pub slot_type: String,
    pub start: usize,
    pub end: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotSpan {
    pub slot_type: String,
    pub start: usize,
    pub end: usize,
    pub surface: Vec<String>,
}

impl SlotSpan {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Tag<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

pub fn parse_tag(tag: &str) -> Result<Tag<'_>> {
    if tag == "O" {
        return Ok(Tag::Outside);
    }
    match tag.split_once('-') {
        Some(("B", t)) if !t.is_empty() => Ok(Tag::Begin(t)),
        Some(("I", t)) if !t.is_empty() => Ok(Tag::Inside(t)),
        _ => Err(Error::Tag(tag.to_string())),
    }
}

/// Maximal spans under the conlleval convention: a chunk opens at `B-x` or
/// at an `I-x` that does not continue an open `x` chunk.
pub fn extract_chunks<S: AsRef<str>>(tags: &[S]) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let tag = parse_tag(tag.as_ref())?;
        let continues = matches!((&open, tag), (Some((t, _)), Tag::Inside(x)) if t == x);
        if continues {
            continue;
        }
        if let Some((t, s)) = open.take() {
            out.push(Chunk {
                slot_type: t,
                start: s,
                end: i - 1,
            });
        }
        if let Tag::Begin(x) | Tag::Inside(x) = tag {
            open = Some((x.to_string(), i));
        }
    }
    if let Some((t, s)) = open {
        out.push(Chunk {
            slot_type: t,
            start: s,
            end: tags.len() - 1,
        });
    }
    Ok(out)
}

/// Re-emits B/I/O tags for a sequence of length `len`.
pub fn tags_from_chunks(len: usize, chunks: &[Chunk]) -> Vec<String> {
    let mut tags = vec!["O".to_string(); len];
    for c in chunks {
        tags[c.start] = format!("B-{}", c.slot_type);
        for t in &mut tags[c.start + 1..=c.end] {
            *t = format!("I-{}", c.slot_type);
        }
    }
    tags
}

pub fn parse_dataset(text: &str) -> Result<Vec<Utterance>> {
    let mut out = Vec::new();
    let mut block: Vec<(usize, &str)> = Vec::new();
    let lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    for (no, line) in lines.chain(std::iter::once((0, ""))) {
        if !line.is_empty() {
            block.push((no, line));
            continue;
        }
        if block.is_empty() {
            continue;
        }
        out.push(parse_block(&block)?);
        block.clear();
    }
    Ok(out)
}

fn parse_block(block: &[(usize, &str)]) -> Result<Utterance> {
    let (last_no, last) = *block.last().unwrap();
    if last.split_whitespace().count() != 1 {
        return Err(Error::Parse {
            line: last_no,
            message: "block does not end with an intent line".into(),
        });
    }
    if block.len() < 2 {
        return Err(Error::Parse {
            line: last_no,
            message: "block has no tokens".into(),
        });
    }
    let mut tokens = Vec::with_capacity(block.len() - 1);
    let mut tags = Vec::with_capacity(block.len() - 1);
    for &(no, line) in &block[..block.len() - 1] {
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 2 {
            return Err(Error::Parse {
                line: no,
                message: format!("expected `token tag`, got {} fields", fields.len()),
            });
        }
        tokens.push(fields[0].to_string());
        tags.push(fields[1].to_string());
    }
    let mut intents: Vec<String> = Vec::new();
    for i in last.split('#').filter(|s| !s.is_empty()) {
        if !intents.iter().any(|x| x == i) {
            intents.push(i.to_string());
        }
    }
    Utterance::new(tokens, tags, intents).map_err(|e| Error::Parse {
        line: last_no,
        message: e.to_string(),
    })
}

/// Token-only input: one token per line (extra fields are ignored), blank
/// lines between utterances.
pub fn parse_token_blocks(text: &str) -> Vec<Vec<String>> {
    let mut out = Vec::new();
    let mut cur: Vec<String> = Vec::new();
    for line in text.lines() {
        match line.split_whitespace().next() {
            Some(tok) => cur.push(tok.to_string()),
            None if !cur.is_empty() => out.push(std::mem::take(&mut cur)),
            None => {}
        }
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    out
}

/// Inverse of [`parse_dataset`].
pub fn format_dataset(utterances: &[Utterance]) -> String {
    let mut s = String::new();
    for (i, u) in utterances.iter().enumerate() {
        if i > 0 {
            s.push('\n');
        }
        for (tok, tag) in u.tokens.iter().zip(&u.slot_tags) {
            s.push_str(tok);
            s.push(' ');
            s.push_str(tag);
            s.push('\n');
        }
        s.push_str(&u.intents.join("#"));
        s.push('\n');
    }
    s
}

/// Slot type → every surface phrase observed under it, with multiplicity.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SlotDictionary {
    entries: BTreeMap<String, Vec<Vec<String>>>,
}

impl SlotDictionary {
    pub fn from_utterances(utterances: &[Utterance]) -> Result<Self> {
        let mut entries: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
        for u in utterances {
            for span in u.spans()? {
                entries.entry(span.slot_type).or_default().push(span.surface);
            }
        }
        Ok(Self { entries })
    }

    /// Keeps the first occurrence of each phrase per type.
    pub fn deduplicated(&self) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(k, v)| {
                let mut seen = BTreeSet::new();
                let kept = v.iter().filter(|p| seen.insert(*p)).cloned().collect();
                (k.clone(), kept)
            })
            .collect();
        Self { entries }
    }

    pub fn phrases(&self, slot_type: &str) -> Option<&[Vec<String>]> {
        self.entries.get(slot_type).map(Vec::as_slice)
    }

    pub fn slot_types(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[Vec<String>])> {
        self.entries.iter().map(|(k, v)| (k.as_str(), v.as_slice()))
    }
}

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;

/// Dense bijections for words, slot tags and intents.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyLists", into = "VocabularyLists")]
pub struct Vocabulary {
    words: Vec<String>,
    slots: Vec<String>,
    intents: Vec<String>,
    word_ids: HashMap<String, usize>,
    slot_ids: HashMap<String, usize>,
    intent_ids: HashMap<String, usize>,
}

#[derive(Clone, Serialize, Deserialize)]
struct VocabularyLists {
    words: Vec<String>,
    slots: Vec<String>,
    intents: Vec<String>,
}

impl From<VocabularyLists> for Vocabulary {
    fn from(l: VocabularyLists) -> Self {
        let index = |v: &[String]| v.iter().enumerate().map(|(i, s)| (s.clone(), i)).collect();
        Self {
            word_ids: index(&l.words),
            slot_ids: index(&l.slots),
            intent_ids: index(&l.intents),
            words: l.words,
            slots: l.slots,
            intents: l.intents,
        }
    }
}

impl From<Vocabulary> for VocabularyLists {
    fn from(v: Vocabulary) -> Self {
        Self {
            words: v.words,
            slots: v.slots,
            intents: v.intents,
        }
    }
}

impl Vocabulary {
    /// Words in first-occurrence order after the reserved entries; labels
    /// sorted.
    pub fn build(train: &[Utterance]) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Contract("vocabulary needs training data".into()));
        }
        let mut words = vec![PAD.to_string(), UNK.to_string()];
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        let mut slots = BTreeSet::new();
        let mut intents = BTreeSet::new();
        for u in train {
            for w in &u.tokens {
                if w != PAD && w != UNK && seen.insert(w) {
                    words.push(w.clone());
                }
            }
            slots.extend(u.slot_tags.iter().cloned());
            intents.extend(u.intents.iter().cloned());
        }
        Ok(VocabularyLists {
            words,
            slots: slots.into_iter().collect(),
            intents: intents.into_iter().collect(),
        }
        .into())
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.word_ids.get(w).copied().unwrap_or(UNK_ID)
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.word_id(t)).collect()
    }

    pub fn word(&self, id: usize) -> Option<&str> {
        self.words.get(id).map(String::as_str)
    }

    pub fn slot_id(&self, tag: &str) -> Option<usize> {
        self.slot_ids.get(tag).copied()
    }

    pub fn slot_tag(&self, id: usize) -> Option<&str> {
        self.slots.get(id).map(String::as_str)
    }

    pub fn intent_id(&self, intent: &str) -> Option<usize> {
        self.intent_ids.get(intent).copied()
    }

    pub fn intent(&self, id: usize) -> Option<&str> {
        self.intents.get(id).map(String::as_str)
    }

    pub fn num_words(&self) -> usize {
        self.words.len()
    }

    pub fn num_slots(&self) -> usize {
        self.slots.len()
    }

    pub fn num_intents(&self) -> usize {
        self.intents.len()
    }

    pub fn slot_tags(&self) -> &[String] {
        &self.slots
    }

    pub fn intents(&self) -> &[String] {
        &self.intents
    }
}
