//! Closed-loop multi-user infilling workloads.
//!
//! A workload is a set of [`UserScript`]s. Each script is the sequence of
//! (prefix, suffix) pairs one user sends; the simulator issues round `r + 1`
//! when round `r` completes, so scripts carry no timestamps.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::synthetic_code;
use crate::tokenizer::is_word_interior_boundary;

#[derive(Debug, Error)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    InvalidSpec(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("user {user_id:?} has round {round} twice")]
    DuplicateRound { user_id: String, round: usize },
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

/// Integer distribution with positive support.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Dist {
    Fixed(u64),
    Uniform { min: u64, max: u64 },
}

impl Dist {
    pub fn sample<R: Rng>(&self, rng: &mut R) -> u64 {
        match *self {
            Dist::Fixed(v) => v,
            Dist::Uniform { min, max } => rng.random_range(min..=max),
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            Dist::Fixed(v) => v as f64,
            Dist::Uniform { min, max } => (min + max) as f64 / 2.0,
        }
    }

    fn validate(&self, name: &str) -> Result<(), WorkloadError> {
        let ok = match *self {
            Dist::Fixed(v) => v >= 1,
            Dist::Uniform { min, max } => min >= 1 && min <= max,
        };
        if ok {
            Ok(())
        } else {
            Err(WorkloadError::InvalidSpec(format!("{name}: support must be positive and min <= max")))
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditMix {
    pub prefix_tail_growth: f64,
    pub suffix_head_growth: f64,
}

impl Default for EditMix {
    fn default() -> Self {
        Self {
            prefix_tail_growth: 1.0,
            suffix_head_growth: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WorkloadSpec {
    pub num_users: usize,
    pub rounds: usize,
    pub initial_prefix_chars: Dist,
    pub suffix_chars: Dist,
    /// Characters appended (or prepended, for suffix growth) per round.
    pub inc_chars: Dist,
    pub output_tokens: Dist,
    /// Chance that a prefix increment stops inside a word.
    pub subtoken_split_probability: f64,
    pub edit_mix: EditMix,
    pub seed: u64,
}

impl Default for WorkloadSpec {
    /// 16 users, 5 rounds, 128 output tokens, about 2355 input tokens per
    /// request under the default vocabulary, half of them suffix.
    fn default() -> Self {
        Self {
            num_users: 16,
            rounds: 5,
            initial_prefix_chars: Dist::Uniform { min: 4_850, max: 6_700 },
            suffix_chars: Dist::Uniform { min: 5_500, max: 7_300 },
            inc_chars: Dist::Uniform { min: 100, max: 500 },
            output_tokens: Dist::Fixed(128),
            subtoken_split_probability: 0.5,
            edit_mix: EditMix::default(),
            seed: 0,
        }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<(), WorkloadError> {
        if self.num_users == 0 || self.rounds == 0 {
            return Err(WorkloadError::InvalidSpec("num_users and rounds must be positive".into()));
        }
        self.initial_prefix_chars.validate("initial_prefix_chars")?;
        self.suffix_chars.validate("suffix_chars")?;
        self.inc_chars.validate("inc_chars")?;
        self.output_tokens.validate("output_tokens")?;
        if !(0.0..=1.0).contains(&self.subtoken_split_probability) {
            return Err(WorkloadError::InvalidSpec("subtoken_split_probability must be in [0, 1]".into()));
        }
        let mix = self.edit_mix;
        if mix.prefix_tail_growth < 0.0
            || mix.suffix_head_growth < 0.0
            || (mix.prefix_tail_growth + mix.suffix_head_growth - 1.0).abs() > 1e-9
        {
            return Err(WorkloadError::InvalidSpec("edit_mix fractions must be nonnegative and sum to 1".into()));
        }
        Ok(())
    }

    /// Expected prefix+suffix characters per request, averaged over rounds.
    pub fn expected_mean_input_chars(&self) -> f64 {
        let growth = self.inc_chars.mean() * (self.rounds as f64 - 1.0) / 2.0;
        self.initial_prefix_chars.mean() + self.suffix_chars.mean() + growth
    }

    /// Mean suffix share of the input, assuming prefix-only growth.
    pub fn expected_suffix_share(&self) -> f64 {
        self.suffix_chars.mean() / self.expected_mean_input_chars()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoundEvent {
    pub prefix: String,
    pub suffix: String,
    pub expected_output_tokens: u32,
}

impl RoundEvent {
    pub fn input_chars(&self) -> usize {
        self.prefix.len() + self.suffix.len()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserScript {
    pub user_id: String,
    pub rounds: Vec<RoundEvent>,
}

pub fn user_id(index: usize) -> String {
    format!("user-{index:03}")
}

/// Generates one script per user. User `i` draws from its own ChaCha stream
/// of `seed`, so its script does not depend on how many users there are.
pub fn generate(spec: &WorkloadSpec, seed: u64) -> Result<Vec<UserScript>, WorkloadError> {
    spec.validate()?;
    Ok((0..spec.num_users).map(|i| generate_user(spec, seed, i)).collect())
}

#[derive(Clone, Copy)]
enum Edit {
    PrefixTail { chars: usize, interior: bool },
    SuffixHead { chars: usize },
}

fn generate_user(spec: &WorkloadSpec, seed: u64, index: usize) -> UserScript {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);

    let initial_prefix = spec.initial_prefix_chars.sample(&mut rng) as usize;
    let initial_suffix = spec.suffix_chars.sample(&mut rng) as usize;
    let outputs: Vec<u32> = (0..spec.rounds)
        .map(|_| spec.output_tokens.sample(&mut rng).min(u32::MAX as u64) as u32)
        .collect();
    let edits: Vec<Edit> = (1..spec.rounds)
        .map(|_| {
            let chars = spec.inc_chars.sample(&mut rng) as usize;
            if rng.random_bool(spec.edit_mix.prefix_tail_growth.clamp(0.0, 1.0)) {
                Edit::PrefixTail {
                    chars,
                    interior: rng.random_bool(spec.subtoken_split_probability),
                }
            } else {
                Edit::SuffixHead { chars }
            }
        })
        .collect();
    let prefix_budget: usize = edits
        .iter()
        .map(|e| match e {
            Edit::PrefixTail { chars, .. } => *chars,
            Edit::SuffixHead { .. } => 0,
        })
        .sum();
    let suffix_budget: usize = edits
        .iter()
        .map(|e| match e {
            Edit::SuffixHead { chars } => *chars,
            Edit::PrefixTail { .. } => 0,
        })
        .sum();

    // The prefix grows rightwards through `before`; the suffix grows
    // leftwards through `after`.
    let before = synthetic_code(&mut rng, initial_prefix + prefix_budget + 64 * spec.rounds + 256);
    let after = synthetic_code(&mut rng, initial_suffix + suffix_budget + 1);
    let mut cut = initial_prefix.min(before.len());
    let mut suffix_start = after.len() - initial_suffix;

    let mut rounds = Vec::with_capacity(spec.rounds);
    for r in 0..spec.rounds {
        if r > 0 {
            match edits[r - 1] {
                Edit::PrefixTail { chars, interior } => {
                    cut = place_cut(before.as_bytes(), cut + chars.max(1), interior);
                }
                Edit::SuffixHead { chars } => {
                    suffix_start = suffix_start.saturating_sub(chars.max(1));
                }
            }
        }
        rounds.push(RoundEvent {
            prefix: before[..cut].to_string(),
            suffix: after[suffix_start..].to_string(),
            expected_output_tokens: outputs[r],
        });
    }
    UserScript {
        user_id: user_id(index),
        rounds,
    }
}

/// First offset at or after `target` whose word-interior status matches
/// `interior`; falls back to `target` clamped to the text.
fn place_cut(text: &[u8], target: usize, interior: bool) -> usize {
    let target = target.min(text.len());
    (target..=text.len())
        .find(|&p| is_word_interior_boundary(text, p) == interior)
        .unwrap_or(target)
}

#[derive(Debug, Serialize, Deserialize)]
struct TraceRecord {
    user_id: String,
    round: usize,
    prefix: String,
    suffix: String,
    output_tokens: u32,
}

/// Writes scripts as JSONL, one object per (user, round).
pub fn write_jsonl<W: Write>(scripts: &[UserScript], mut out: W) -> Result<(), WorkloadError> {
    for script in scripts {
        for (round, ev) in script.rounds.iter().enumerate() {
            let rec = TraceRecord {
                user_id: script.user_id.clone(),
                round,
                prefix: ev.prefix.clone(),
                suffix: ev.suffix.clone(),
                output_tokens: ev.expected_output_tokens,
            };
            serde_json::to_writer(&mut out, &rec).map_err(std::io::Error::from)?;
            out.write_all(b"\n")?;
        }
    }
    Ok(())
}

/// Reads a JSONL trace. Records are grouped by user (users ordered by id)
/// and rounds sorted by number. Non-growing prefixes are accepted as-is.
pub fn read_jsonl<R: BufRead>(input: R) -> Result<Vec<UserScript>, WorkloadError> {
    let mut users: BTreeMap<String, BTreeMap<usize, RoundEvent>> = BTreeMap::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: TraceRecord = serde_json::from_str(&line).map_err(|e| WorkloadError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        let rounds = users.entry(rec.user_id.clone()).or_default();
        let ev = RoundEvent {
            prefix: rec.prefix,
            suffix: rec.suffix,
            expected_output_tokens: rec.output_tokens,
        };
        if rounds.insert(rec.round, ev).is_some() {
            return Err(WorkloadError::DuplicateRound {
                user_id: rec.user_id,
                round: rec.round,
            });
        }
    }
    Ok(users
        .into_iter()
        .map(|(user_id, rounds)| UserScript {
            user_id,
            rounds: rounds.into_values().collect(),
        })
        .collect())
}

pub fn from_jsonl(path: impl AsRef<Path>) -> Result<Vec<UserScript>, WorkloadError> {
    read_jsonl(BufReader::new(File::open(path)?))
}
