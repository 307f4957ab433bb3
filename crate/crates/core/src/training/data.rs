//! Tokenization, train/validation split and the built-in synthetic corpus.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use super::rng::XorShift64Star;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum TokenizerKind {
    #[default]
    Bytes,
    Chars,
}

impl fmt::Display for TokenizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Bytes => "bytes",
            Self::Chars => "chars",
        })
    }
}

impl FromStr for TokenizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "bytes" | "byte" => Ok(Self::Bytes),
            "chars" | "char" => Ok(Self::Chars),
            other => Err(Error::Config(format!(
                "tokenizer must be bytes or chars, got '{other}'"
            ))),
        }
    }
}

/// Byte-level (`V = 256`) or a sorted character vocabulary built from a corpus.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Tokenizer {
    Bytes,
    Chars {
        vocab: Vec<char>,
        index: BTreeMap<char, usize>,
    },
}

impl Tokenizer {
    pub fn chars_of(text: &str) -> Self {
        let mut vocab: Vec<char> = text.chars().collect();
        vocab.sort_unstable();
        vocab.dedup();
        let index = vocab.iter().enumerate().map(|(i, &c)| (c, i)).collect();
        Self::Chars { vocab, index }
    }

    pub fn kind(&self) -> TokenizerKind {
        match self {
            Self::Bytes => TokenizerKind::Bytes,
            Self::Chars { .. } => TokenizerKind::Chars,
        }
    }

    pub fn vocab_size(&self) -> usize {
        match self {
            Self::Bytes => 256,
            Self::Chars { vocab, .. } => vocab.len(),
        }
    }

    pub fn encode(&self, bytes: &[u8]) -> Result<Vec<usize>> {
        match self {
            Self::Bytes => Ok(bytes.iter().map(|&b| b as usize).collect()),
            Self::Chars { index, .. } => utf8(bytes)?
                .chars()
                .map(|c| {
                    index
                        .get(&c)
                        .copied()
                        .ok_or_else(|| Error::InvalidArgument(format!("character {c:?} not in vocabulary")))
                })
                .collect(),
        }
    }

    pub fn decode(&self, tokens: &[usize]) -> Result<Vec<u8>> {
        let oob = |t: usize, v: usize| Error::TargetOutOfRange { index: t, vocab: v };
        match self {
            Self::Bytes => tokens
                .iter()
                .map(|&t| u8::try_from(t).map_err(|_| oob(t, 256)))
                .collect(),
            Self::Chars { vocab, .. } => {
                let mut s = String::new();
                for &t in tokens {
                    s.push(*vocab.get(t).ok_or_else(|| oob(t, vocab.len()))?);
                }
                Ok(s.into_bytes())
            }
        }
    }
}

fn utf8(bytes: &[u8]) -> Result<&str> {
    std::str::from_utf8(bytes).map_err(|e| Error::InvalidArgument(format!("corpus is not UTF-8: {e}")))
}

/// Tokenizes a non-empty corpus; character mode builds its vocabulary from it.
pub fn tokenize_corpus(bytes: &[u8], kind: TokenizerKind) -> Result<(Vec<usize>, Tokenizer)> {
    if bytes.is_empty() {
        return Err(Error::InvalidArgument("empty corpus".into()));
    }
    let tok = match kind {
        TokenizerKind::Bytes => Tokenizer::Bytes,
        TokenizerKind::Chars => Tokenizer::chars_of(utf8(bytes)?),
    };
    Ok((tok.encode(bytes)?, tok))
}

/// First `round(len·train_fraction)` tokens train, the rest validate.
pub fn split(tokens: &[usize], train_fraction: f64) -> Result<(&[usize], &[usize])> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(Error::InvalidArgument(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n = (tokens.len() as f64 * train_fraction).round() as usize;
    Ok(tokens.split_at(n))
}

/// Entropy of the token frequency distribution, in nats.
pub fn unigram_entropy(tokens: &[usize]) -> f64 {
    let mut counts: BTreeMap<usize, u64> = BTreeMap::new();
    for &t in tokens {
        *counts.entry(t).or_default() += 1;
    }
    let n = tokens.len() as f64;
    counts
        .values()
        .map(|&c| {
            let p = c as f64 / n;
            -p * p.ln()
        })
        .sum()
}

const NAMES: &[&str] = &[
    "Ada", "Bruno", "Clara", "Dmitri", "Elena", "Farid", "Greta", "Hugo", "Ines", "Jonas", "Kira", "Lars", "Mira",
    "Nadia", "Oskar", "Priya", "Quentin", "Rosa", "Sami", "Tilde",
];
const ADJECTIVES: &[&str] = &[
    "old", "quiet", "small", "bright", "cold", "narrow", "green", "heavy", "early", "distant", "careful", "patient",
    "broken", "hidden", "silver", "warm", "empty", "crowded", "simple", "strange", "gentle", "sudden", "wooden",
    "hollow", "steady", "pale", "golden", "restless", "tired", "clever",
];
const NOUNS: &[&str] = &[
    "house", "river", "garden", "letter", "window", "road", "teacher", "village", "market", "bridge", "lamp", "train",
    "forest", "kitchen", "painter", "harbor", "station", "winter", "door", "mountain", "child", "book", "table",
    "field", "stone", "boat", "mill", "tower", "clock", "farmer", "song", "map", "storm", "wall", "sister", "engine",
    "island", "street", "baker", "story",
];
const VERBS: &[&str] = &[
    "watched",
    "found",
    "carried",
    "opened",
    "followed",
    "painted",
    "remembered",
    "crossed",
    "repaired",
    "visited",
    "lost",
    "built",
    "heard",
    "left",
    "reached",
    "closed",
    "cleaned",
    "noticed",
    "described",
    "passed",
    "moved",
    "counted",
    "answered",
    "kept",
    "sold",
];
const ADVERBS: &[&str] = &[
    "slowly",
    "quietly",
    "again",
    "carefully",
    "at last",
    "once more",
    "without a word",
    "before dawn",
    "every morning",
    "in silence",
    "twice",
    "later",
];
const PREPOSITIONS: &[&str] = &[
    "near", "behind", "across", "under", "beside", "beyond", "along", "through", "above", "toward",
];
const CONNECTIVES: &[&str] = &["and", "but", "so", "while", "because", "until"];

struct Grammar {
    rng: XorShift64Star,
}

impl Grammar {
    /// Index skewed toward the front of the list.
    fn pick<'a>(&mut self, words: &[&'a str]) -> &'a str {
        let u = self.rng.unit();
        words[((u * u) * words.len() as f64) as usize]
    }

    fn chance(&mut self, p: f64) -> bool {
        self.rng.unit() < p
    }

    fn noun_phrase(&mut self) -> String {
        if self.chance(0.2) {
            return self.pick(NAMES).to_string();
        }
        let det = if self.chance(0.7) { "the" } else { "a" };
        let noun = self.pick(NOUNS);
        if self.chance(0.5) {
            let adj = self.pick(ADJECTIVES);
            let det = if det == "a" && adj.starts_with(['a', 'e', 'i', 'o', 'u']) {
                "an"
            } else {
                det
            };
            format!("{det} {adj} {noun}")
        } else {
            let det = if det == "a" && noun.starts_with(['a', 'e', 'i', 'o', 'u']) {
                "an"
            } else {
                det
            };
            format!("{det} {noun}")
        }
    }

    fn clause(&mut self) -> String {
        let mut s = format!("{} {} {}", self.noun_phrase(), self.pick(VERBS), self.noun_phrase());
        if self.chance(0.4) {
            s = format!("{s} {} {}", self.pick(PREPOSITIONS), self.noun_phrase());
        }
        if self.chance(0.3) {
            s = format!("{s} {}", self.pick(ADVERBS));
        }
        s
    }

    fn sentence(&mut self) -> String {
        let mut s = self.clause();
        if self.chance(0.35) {
            s = format!("{s}, {} {}", self.pick(CONNECTIVES), self.clause());
        }
        let mut first = s.chars();
        let s = match first.next() {
            Some(c) => c.to_uppercase().chain(first).collect(),
            None => s,
        };
        if self.chance(0.12) {
            let who = self.pick(NAMES);
            format!("\"{s},\" said {who}.")
        } else if self.chance(0.08) {
            format!("{s}?")
        } else {
            format!("{s}.")
        }
    }
}

/// Deterministic English-like text of exactly `len` ASCII bytes, in
/// paragraphs of three to seven sentences.
pub fn synthetic_corpus(len: usize, seed: u64) -> Vec<u8> {
    let mut g = Grammar {
        rng: XorShift64Star::new(seed),
    };
    let mut out = String::with_capacity(len + 256);
    while out.len() < len {
        let sentences = 3 + g.rng.below(5);
        for i in 0..sentences {
            if i > 0 {
                out.push(' ');
            }
            out.push_str(&g.sentence());
        }
        out.push_str("\n\n");
    }
    out.truncate(len);
    out.into_bytes()
}

/// Size of the built-in corpus.
pub const DEFAULT_CORPUS_BYTES: usize = 1_000_000;
