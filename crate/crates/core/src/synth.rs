//! A small synthetic English-like grammar used as a stand-in corpus.
//!
//! Function words all come from the built-in stopword list, so every
//! content word is an eligible seed. Sentences are one to three clauses and
//! their length grows with the number of content words.

use rand::seq::IndexedRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::rng::{keyed_rng, label_hash};
use crate::textproc::{is_eligible_seed, tokenize_words, StopwordPolicy};

const NOUNS: &[&str] = &[
    "farmer", "doctor", "teacher", "river", "garden", "window", "letter", "bridge", "market",
    "village", "horse", "engine", "painter", "student", "kitchen", "forest", "lamp", "ship",
    "soldier", "table", "mountain", "library", "baker", "candle", "harbor", "council", "report",
    "budget", "meadow", "tower", "wagon", "sailor", "museum", "orchard", "clock", "stranger",
    "island", "lantern", "teapot", "castle",
];

const TRANSITIVE: &[&str] = &[
    "repaired", "painted", "visited", "opened", "carried", "watched", "followed", "cleaned",
    "found", "built", "sold", "moved", "described", "noticed", "admired", "approved", "checked",
    "carved", "rejected", "guarded",
];

const INTRANSITIVE: &[&str] = &[
    "slept", "laughed", "waited", "smiled", "arrived", "vanished", "rested", "wandered",
    "shivered", "sang",
];

const ADJECTIVES: &[&str] = &[
    "old", "broken", "quiet", "green", "tall", "small", "bright", "heavy", "ancient", "narrow",
    "cheerful", "dusty", "famous", "wooden", "strange", "gentle", "empty", "golden",
];

const ADVERBS: &[&str] = &[
    "quietly", "slowly", "carefully", "suddenly", "happily", "rarely", "gladly", "eagerly",
    "calmly", "patiently",
];

const NAMES: &[&str] = &["Anna", "Peter", "Maria", "Jonas", "Clara", "Victor", "Elena", "Tomas"];

const DETERMINERS: &[&str] = &["the", "a", "the", "the", "some", "each"];
const PREPOSITIONS: &[&str] = &[
    "through", "behind", "in", "on", "under", "over", "beyond", "across", "into", "from",
];
const CONJUNCTIONS: &[&str] = &["and", "but", "while", "because", "so", "after", "before"];
// Noun phrases made of function words alone.
const FILLERS: &[&str] = &["some", "all", "both", "these", "those", "this", "that"];

/// Token band of generated sentences. Shorter than the usual corpus band
/// because grammar sentences carry fewer function words.
pub const MIN_TOKENS: usize = 5;
pub const MAX_TOKENS: usize = 25;

struct Builder {
    words: Vec<String>,
}

impl Builder {
    fn push(&mut self, w: &str) {
        self.words.push(w.to_string());
    }

    /// Pushes a content word not yet used in this sentence, if one is left.
    fn push_new(&mut self, rng: &mut ChaCha8Rng, list: &[&str]) {
        let unused: Vec<&str> = list
            .iter()
            .copied()
            .filter(|w| !self.words.iter().any(|u| u.eq_ignore_ascii_case(w)))
            .collect();
        let pool = if unused.is_empty() { list } else { &unused[..] };
        self.push(pool.choose(rng).unwrap());
    }

    fn noun_phrase(&mut self, rng: &mut ChaCha8Rng, allow_name: bool) {
        let roll: f64 = rng.random();
        if allow_name && roll < 0.15 {
            self.push_new(rng, NAMES);
            return;
        }
        if allow_name && roll < 0.4 {
            self.push(FILLERS.choose(rng).unwrap());
            return;
        }
        let det = *DETERMINERS.choose(rng).unwrap();
        self.push(det);
        if rng.random::<f64>() < 0.45 {
            self.push_new(rng, ADJECTIVES);
        }
        self.push_new(rng, NOUNS);
    }

    fn clause(&mut self, rng: &mut ChaCha8Rng) {
        self.noun_phrase(rng, true);
        if rng.random::<f64>() < 0.25 {
            self.push_new(rng, ADVERBS);
        }
        if rng.random::<f64>() < 0.7 {
            self.push_new(rng, TRANSITIVE);
            self.noun_phrase(rng, true);
        } else {
            self.push_new(rng, INTRANSITIVE);
        }
        if rng.random::<f64>() < 0.4 {
            self.push(PREPOSITIONS.choose(rng).unwrap());
            self.noun_phrase(rng, false);
        }
    }

    fn finish(mut self) -> String {
        if let Some(first) = self.words.first_mut() {
            let mut cs = first.chars();
            if let Some(c) = cs.next() {
                *first = c.to_uppercase().chain(cs).collect();
            }
        }
        let mut out = String::new();
        for (i, w) in self.words.iter().enumerate() {
            if i > 0 && w != "," {
                out.push(' ');
            }
            out.push_str(w);
        }
        out.push('.');
        out
    }
}

fn sentence(rng: &mut ChaCha8Rng) -> String {
    let mut b = Builder { words: Vec::new() };
    if rng.random::<f64>() < 0.1 {
        b.push_new(rng, ADVERBS);
        b.push(",");
    }
    let roll: f64 = rng.random();
    let clauses = if roll < 0.7 {
        1
    } else if roll < 0.95 {
        2
    } else {
        3
    };
    for c in 0..clauses {
        if c > 0 {
            b.push(",");
            b.push(CONJUNCTIONS.choose(rng).unwrap());
        }
        b.clause(rng);
    }
    b.finish()
}

/// Number of distinct eligible word types in a sentence.
pub fn eligible_types(sentence: &str, policy: &StopwordPolicy) -> usize {
    let mut seen = std::collections::HashSet::new();
    tokenize_words(sentence)
        .into_iter()
        .filter(|t| is_eligible_seed(t, policy) && seen.insert(t.clone()))
        .count()
}

/// Thins out sentences with many content words so that most sentences
/// carry about four.
fn acceptance(content: usize) -> f64 {
    match content {
        0..=4 => 1.0,
        5 => 0.45,
        6 => 0.35,
        _ => 0.3,
    }
}

/// `n` sentences of 5 to 25 tokens, each with at least four eligible seed
/// types. The same seed always yields the same corpus.
pub fn generate_corpus(n: usize, seed: u64) -> Vec<String> {
    let policy = StopwordPolicy::builtin();
    let mut rng = keyed_rng(&[seed, label_hash("synthetic-corpus")]);
    let mut out = Vec::with_capacity(n);
    while out.len() < n {
        let s = sentence(&mut rng);
        let len = tokenize_words(&s).len();
        let content = eligible_types(&s, &policy);
        if (MIN_TOKENS..=MAX_TOKENS).contains(&len)
            && content >= 4
            && rng.random::<f64>() < acceptance(content)
        {
            out.push(s);
        }
    }
    out
}

/// Every content word of the grammar, in a fixed order.
pub fn content_words() -> Vec<&'static str> {
    [NOUNS, TRANSITIVE, INTRANSITIVE, ADJECTIVES, ADVERBS, NAMES].concat()
}
