//! Per-user session pool that rewrites FIM requests into EFIM prompts.
//!
//! Each session remembers the last request of a user together with the
//! *anchor*: the prefix that was last sent to the engine in PSM position.
//! While the user only appends to the prefix tail, requests are rendered as
//! `<P>anchor<S>suffix<M>inc` where `inc` is everything typed since the
//! anchor, so the engine sees a prompt that extends the previous one token
//! for token. Any other edit re-anchors the session with a PSM prompt.

use std::sync::atomic::{AtomicU64, Ordering};

use dashmap::DashMap;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::prompt::PromptLayout;
use crate::tokenizer::{is_word_byte, SpecialTokens, TokenSeq, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GatewayError {
    #[error("request has an empty user_id")]
    EmptyUserId,
    #[error("max_new_tokens must be positive")]
    ZeroMaxTokens,
    #[error("{field} contains the special token {token:?}")]
    SpecialTokenInContent { field: &'static str, token: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InfillRequest {
    pub user_id: String,
    pub prefix: String,
    pub suffix: String,
    pub max_new_tokens: u32,
}

impl InfillRequest {
    pub fn new(user_id: impl Into<String>, prefix: impl Into<String>, suffix: impl Into<String>) -> Self {
        Self {
            user_id: user_id.into(),
            prefix: prefix.into(),
            suffix: suffix.into(),
            max_new_tokens: 16,
        }
    }

    pub fn validate(&self, specials: &SpecialTokens) -> Result<(), GatewayError> {
        if self.user_id.is_empty() {
            return Err(GatewayError::EmptyUserId);
        }
        if self.max_new_tokens == 0 {
            return Err(GatewayError::ZeroMaxTokens);
        }
        for (field, text) in [("prefix", &self.prefix), ("suffix", &self.suffix)] {
            if let Some(role) = specials.find_in(text.as_bytes()) {
                return Err(GatewayError::SpecialTokenInContent {
                    field,
                    token: specials.display(role).to_string(),
                });
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    NewSessionPsm,
    PrefixGrowthEfim,
    SuffixGrowthPsm,
    UnchangedPsm,
    ResetPsm,
}

impl Outcome {
    pub fn as_str(self) -> &'static str {
        match self {
            Outcome::NewSessionPsm => "NEW_SESSION_PSM",
            Outcome::PrefixGrowthEfim => "PREFIX_GROWTH_EFIM",
            Outcome::SuffixGrowthPsm => "SUFFIX_GROWTH_PSM",
            Outcome::UnchangedPsm => "UNCHANGED_PSM",
            Outcome::ResetPsm => "RESET_PSM",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PrefixDiff {
    pub common_prefix_len: usize,
    pub inc_len: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GatewayDecision {
    pub outcome: Outcome,
    pub layout: PromptLayout,
    pub diff: PrefixDiff,
    /// Offsets inside `layout.inc` where earlier rounds' increments ended.
    pub inc_breaks: Vec<usize>,
}

impl GatewayDecision {
    /// Token sequence the engine receives for this decision.
    pub fn encode(&self, vocab: &Vocabulary) -> TokenSeq {
        self.layout.encode(vocab, &self.inc_breaks)
    }

    /// The increment stops on a word character, so the completion may have
    /// to start with the rest of a word.
    pub fn inc_ends_in_word(&self) -> bool {
        self.layout.inc.last().is_some_and(|&b| is_word_byte(b))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Session {
    pub user_id: String,
    /// Prefix of the most recent request.
    pub prefix: Vec<u8>,
    pub suffix: Vec<u8>,
    /// Length of the prefix portion last sent in PSM position.
    pub anchor_len: usize,
    /// Ends of earlier increments, relative to the anchor.
    pub inc_breaks: Vec<usize>,
    pub last_used: u64,
}

/// Length of the longest common byte prefix.
pub fn longest_common_prefix(a: &[u8], b: &[u8]) -> usize {
    a.iter().zip(b).take_while(|(x, y)| x == y).count()
}

/// Session store keyed by user id. Operations on one user are serialized by
/// the map's entry lock; distinct users proceed in parallel.
#[derive(Debug, Default)]
pub struct SessionPool {
    sessions: DashMap<String, Session>,
    clock: AtomicU64,
}

impl SessionPool {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.sessions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sessions.is_empty()
    }

    pub fn get(&self, user_id: &str) -> Option<Session> {
        self.sessions.get(user_id).map(|s| s.clone())
    }

    /// Seeds a session directly, as if `prefix`/`suffix` had been sent in PSM.
    pub fn insert(&self, user_id: &str, prefix: &str, suffix: &str) {
        let now = self.tick();
        self.sessions.insert(
            user_id.to_string(),
            Session {
                user_id: user_id.to_string(),
                prefix: prefix.as_bytes().to_vec(),
                suffix: suffix.as_bytes().to_vec(),
                anchor_len: prefix.len(),
                inc_breaks: Vec::new(),
                last_used: now,
            },
        );
    }

    fn tick(&self) -> u64 {
        self.clock.fetch_add(1, Ordering::Relaxed) + 1
    }

    /// Classifies the request against the user's session, builds the prompt
    /// layout and updates the session, all under the user's entry lock.
    pub fn handle_request(&self, req: &InfillRequest, specials: &SpecialTokens) -> Result<GatewayDecision, GatewayError> {
        req.validate(specials)?;
        let prefix = req.prefix.as_bytes();
        let suffix = req.suffix.as_bytes();
        let mut entry = self.sessions.entry(req.user_id.clone()).or_insert_with(|| Session {
            user_id: req.user_id.clone(),
            prefix: Vec::new(),
            suffix: Vec::new(),
            anchor_len: 0,
            inc_breaks: Vec::new(),
            last_used: 0,
        });
        let session = entry.value_mut();
        let is_new = session.last_used == 0;
        session.last_used = self.tick();

        let decision = if is_new {
            psm_decision(Outcome::NewSessionPsm, prefix, suffix, 0)
        } else {
            classify(session, prefix, suffix)
        };

        if decision.outcome == Outcome::PrefixGrowthEfim {
            session.inc_breaks = decision.inc_breaks.clone();
        } else {
            session.anchor_len = prefix.len();
            session.inc_breaks.clear();
        }
        session.prefix = prefix.to_vec();
        session.suffix = suffix.to_vec();
        Ok(decision)
    }

    /// Drops least-recently-used sessions until at most `max_sessions` remain.
    pub fn evict_idle(&self, max_sessions: usize) -> usize {
        let excess = self.sessions.len().saturating_sub(max_sessions);
        if excess == 0 {
            return 0;
        }
        let mut by_age: Vec<(u64, String)> = self
            .sessions
            .iter()
            .map(|s| (s.last_used, s.user_id.clone()))
            .collect();
        by_age.sort();
        by_age
            .into_iter()
            .take(excess)
            .filter(|(_, id)| self.sessions.remove(id).is_some())
            .count()
    }
}

fn psm_decision(outcome: Outcome, prefix: &[u8], suffix: &[u8], common: usize) -> GatewayDecision {
    GatewayDecision {
        outcome,
        layout: PromptLayout::psm(prefix, suffix),
        diff: PrefixDiff {
            common_prefix_len: common,
            inc_len: 0,
        },
        inc_breaks: Vec::new(),
    }
}

fn classify(old: &Session, prefix: &[u8], suffix: &[u8]) -> GatewayDecision {
    let common = longest_common_prefix(&old.prefix, prefix);
    let same_prefix = prefix == old.prefix.as_slice();
    let same_suffix = suffix == old.suffix.as_slice();
    let prefix_grew = common == old.prefix.len() && prefix.len() > old.prefix.len();

    if same_prefix && same_suffix {
        return psm_decision(Outcome::UnchangedPsm, prefix, suffix, common);
    }
    if same_suffix && prefix_grew {
        let anchor = old.anchor_len.min(old.prefix.len());
        let mut breaks = old.inc_breaks.clone();
        let previous_inc_end = old.prefix.len() - anchor;
        if previous_inc_end > 0 {
            breaks.push(previous_inc_end);
        }
        return GatewayDecision {
            outcome: Outcome::PrefixGrowthEfim,
            layout: PromptLayout::efim(&prefix[..anchor], suffix, &prefix[anchor..]),
            diff: PrefixDiff {
                common_prefix_len: anchor,
                inc_len: prefix.len() - anchor,
            },
            inc_breaks: breaks,
        };
    }
    if same_prefix && suffix.ends_with(&old.suffix) {
        return psm_decision(Outcome::SuffixGrowthPsm, prefix, suffix, common);
    }
    psm_decision(Outcome::ResetPsm, prefix, suffix, common)
}
