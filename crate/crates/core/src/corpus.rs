//! Seeded generator of Python-like source text.
//!
//! The output has the texture that matters for infilling experiments: long
//! snake_case identifiers, keywords, operators, indentation and newlines, so
//! random cut points land inside words at a realistic rate.

use std::sync::OnceLock;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tokenizer::{SpecialTokens, TokenizerError, Vocabulary};

const NOUNS: &[&str] = &[
    "data", "value", "item", "index", "count", "total", "result", "config", "buffer", "node", "user", "request",
    "cache", "token", "block", "score", "name", "path", "state", "size", "offset", "limit", "batch", "query",
    "model", "layer", "weight", "entry", "record", "prefix", "suffix", "session", "handler", "stream", "parser",
    "matrix", "vector", "queue", "key", "label",
];

const VERBS: &[&str] = &[
    "get", "set", "compute", "update", "load", "parse", "build", "process", "check", "render", "fetch", "merge",
    "split", "encode", "decode", "apply", "collect", "filter", "resolve", "validate",
];

const MODULES: &[&str] = &["os", "sys", "json", "math", "re", "time", "random", "itertools", "collections", "typing"];

/// Vocabulary size of [`default_vocabulary`].
pub const DEFAULT_VOCAB_SIZE: usize = 640;

/// Bytes of synthetic text used to train [`default_vocabulary`].
const DEFAULT_VOCAB_CORPUS_BYTES: usize = 24_000;

/// Seed of the default vocabulary's training corpus.
const DEFAULT_VOCAB_SEED: u64 = 0x5eed_c0de;

fn ident<R: Rng>(rng: &mut R) -> String {
    let parts = rng.random_range(1..=3);
    let mut words: Vec<&str> = (0..parts).map(|_| *NOUNS.choose(rng).unwrap()).collect();
    words.dedup();
    words.join("_")
}

fn func<R: Rng>(rng: &mut R) -> String {
    format!("{}_{}", VERBS.choose(rng).unwrap(), NOUNS.choose(rng).unwrap())
}

fn expr<R: Rng>(rng: &mut R) -> String {
    match rng.random_range(0..7) {
        0 => format!("{} + {}", ident(rng), ident(rng)),
        1 => format!("{}({})", func(rng), ident(rng)),
        2 => format!("{}[{}]", ident(rng), rng.random_range(0..16)),
        3 => rng.random_range(0..1000).to_string(),
        4 => format!("len({})", ident(rng)),
        5 => format!("{} * {}", ident(rng), rng.random_range(2..64)),
        _ => format!("self.{}", ident(rng)),
    }
}

/// Appends code lines to `out` until it holds at least `min_len` bytes.
pub fn extend_code<R: Rng>(rng: &mut R, out: &mut String, min_len: usize) {
    let mut indent: usize = 0;
    while out.len() < min_len {
        let line = if indent == 0 {
            match rng.random_range(0..6) {
                0 => format!("import {}", MODULES.choose(rng).unwrap()),
                1 => format!("{} = {}", ident(rng).to_uppercase(), expr(rng)),
                _ => {
                    let args: Vec<String> = (0..rng.random_range(0..4)).map(|_| ident(rng)).collect();
                    format!("def {}({}):", func(rng), args.join(", "))
                }
            }
        } else {
            match rng.random_range(0..10) {
                0 => format!("if {} > {}:", ident(rng), expr(rng)),
                1 => format!("for {} in {}:", ident(rng), ident(rng)),
                2 => format!("while {} < {}:", ident(rng), rng.random_range(1..100)),
                3 => format!("{}.append({})", ident(rng), expr(rng)),
                4 => format!("print({})", expr(rng)),
                5 => format!("return {}", expr(rng)),
                _ => format!("{} = {}", ident(rng), expr(rng)),
            }
        };
        for _ in 0..indent {
            out.push_str("    ");
        }
        out.push_str(&line);
        out.push('\n');
        if line.ends_with(':') {
            indent += 1;
        } else if line.starts_with("return") {
            indent = indent.saturating_sub(1);
        } else if indent > 1 && rng.random_bool(0.25) {
            indent -= 1;
        }
        if indent > 4 {
            indent = 1;
        }
        if indent == 1 && rng.random_bool(0.08) {
            out.push('\n');
            indent = 0;
        }
    }
}

/// A fresh code string of at least `min_len` bytes.
pub fn synthetic_code<R: Rng>(rng: &mut R, min_len: usize) -> String {
    let mut s = String::with_capacity(min_len + 80);
    extend_code(rng, &mut s, min_len);
    s
}

/// `docs` documents of roughly `approx_len` bytes each, from one seed.
pub fn synthetic_corpus(seed: u64, docs: usize, approx_len: usize) -> Vec<String> {
    (0..docs)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            let len = rng.random_range(approx_len / 2..=approx_len * 3 / 2).max(1);
            synthetic_code(&mut rng, len)
        })
        .collect()
}

/// The default vocabulary's training run with other special tokens.
pub fn train_default_vocabulary(specials: SpecialTokens) -> Result<Vocabulary, TokenizerError> {
    let corpus = synthetic_corpus(DEFAULT_VOCAB_SEED, 8, DEFAULT_VOCAB_CORPUS_BYTES / 8);
    Vocabulary::train(&corpus, DEFAULT_VOCAB_SIZE, specials)
}

/// Vocabulary trained on synthetic code with the default special tokens.
/// Built once per process.
pub fn default_vocabulary() -> &'static Vocabulary {
    static VOCAB: OnceLock<Vocabulary> = OnceLock::new();
    VOCAB.get_or_init(|| train_default_vocabulary(SpecialTokens::default()).expect("default vocabulary parameters are valid"))
}
