//! A small seeded multi-intent corpus for smoke tests and demos.

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const INTENTS: [&str; 4] = ["book_flight", "get_weather", "play_music", "find_restaurant"];
pub const SLOT_TYPES: [&str; 6] = ["city", "date", "airline", "artist", "cuisine", "genre"];

const VALUES: [(&str, &[&str]); 6] = [
    ("city", &["boston", "denver", "new york", "paris", "san jose"]),
    ("date", &["tomorrow", "today", "next friday", "monday"]),
    ("airline", &["delta", "united", "air canada"]),
    ("artist", &["adele", "the beatles", "queen", "drake"]),
    ("cuisine", &["thai", "sushi", "italian", "korean bbq"]),
    ("genre", &["jazz", "rock", "hip hop", "blues"]),
];

const TEMPLATES: [(&str, &[&str]); 4] = [
    (
        "book_flight",
        &[
            "book a {airline} flight to {city}",
            "fly to {city} {date}",
            "flights from {city}",
        ],
    ),
    (
        "get_weather",
        &["weather in {city} {date}", "is it cold in {city}", "forecast for {date}"],
    ),
    (
        "play_music",
        &["play {artist}", "play some {genre}", "put on {genre} by {artist}"],
    ),
    (
        "find_restaurant",
        &["find {cuisine} food in {city}", "{cuisine} near me", "book a table for {cuisine}"],
    ),
];

fn values(ty: &str) -> &'static [&'static str] {
    VALUES.iter().find(|(t, _)| *t == ty).map(|(_, v)| *v).unwrap()
}

fn realize<R: Rng>(template: &str, rng: &mut R, tokens: &mut Vec<String>, tags: &mut Vec<String>) {
    for word in template.split_whitespace() {
        if let Some(ty) = word.strip_prefix('{').and_then(|w| w.strip_suffix('}')) {
            let phrase = values(ty).choose(rng).unwrap();
            for (k, w) in phrase.split_whitespace().enumerate() {
                tokens.push(w.to_string());
                tags.push(format!("{}-{ty}", if k == 0 { "B" } else { "I" }));
            }
        } else {
            tokens.push(word.to_string());
            tags.push("O".to_string());
        }
    }
}

/// `size` distinct utterances of at most `max_len` tokens, roughly a third
/// of them carrying two intents joined by "and".
pub fn corpus(size: usize, max_len: usize, seed: u64) -> Result<Vec<Utterance>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<Utterance> = Vec::with_capacity(size);
    let mut attempts = 0;
    while out.len() < size {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::Contract(format!(
                "cannot draw {size} distinct utterances of at most {max_len} tokens"
            )));
        }
        let multi = out.len() % 3 == 2;
        let mut order: Vec<usize> = (0..INTENTS.len()).collect();
        order.shuffle(&mut rng);
        let chosen = if multi { &order[..2] } else { &order[..1] };
        let (mut tokens, mut tags) = (Vec::new(), Vec::new());
        for (c, &i) in chosen.iter().enumerate() {
            if c > 0 {
                tokens.push("and".to_string());
                tags.push("O".to_string());
            }
            let template = TEMPLATES[i].1.choose(&mut rng).unwrap();
            realize(template, &mut rng, &mut tokens, &mut tags);
        }
        if tokens.len() > max_len {
            continue;
        }
        let intents = chosen.iter().map(|&i| INTENTS[i].to_string()).collect();
        let u = Utterance::new(tokens, tags, intents)?;
        if !out.iter().any(|o| o.tokens == u.tokens) {
            out.push(u);
        }
    }
    Ok(out)
}

/// The 32-utterance training corpus used by the overfit check.
pub fn overfit_corpus(seed: u64) -> Result<Vec<Utterance>> {
    corpus(32, 9, seed)
}
