//! Byte-level vocabulary with greedy longest-match encoding.
//!
//! Ids `0..=255` are the single-byte fallback tokens, the four FIM special
//! tokens follow, and learned merges come after that. Every byte string is
//! encodable, so `encode` is total and `decode(encode(x)) == x` always holds.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub type TokenId = u32;

pub type TokenSeq = Vec<TokenId>;

/// Merges below this pair frequency are not worth a vocabulary slot.
const MIN_MERGE_FREQUENCY: usize = 2;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("target vocabulary size {target} is below the minimum of {minimum}")]
    TargetTooSmall { target: usize, minimum: usize },
    #[error("invalid token id {0}")]
    InvalidToken(TokenId),
    #[error("invalid special tokens: {0}")]
    InvalidSpecials(String),
    #[error("invalid vocabulary file: {0}")]
    InvalidVocabulary(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

/// The four FIM markers.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SpecialRole {
    Prefix,
    Suffix,
    Middle,
    End,
}

impl SpecialRole {
    pub const ALL: [SpecialRole; 4] = [
        SpecialRole::Prefix,
        SpecialRole::Suffix,
        SpecialRole::Middle,
        SpecialRole::End,
    ];

    /// Single-letter key used in vocabulary files.
    pub fn key(self) -> &'static str {
        match self {
            SpecialRole::Prefix => "P",
            SpecialRole::Suffix => "S",
            SpecialRole::Middle => "M",
            SpecialRole::End => "E",
        }
    }

    fn from_key(key: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|r| r.key() == key)
    }
}

/// Display strings of the special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpecialTokens {
    pub prefix: String,
    pub suffix: String,
    pub middle: String,
    pub end: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            prefix: "<P>".into(),
            suffix: "<S>".into(),
            middle: "<M>".into(),
            end: "<E>".into(),
        }
    }
}

impl SpecialTokens {
    pub fn display(&self, role: SpecialRole) -> &str {
        match role {
            SpecialRole::Prefix => &self.prefix,
            SpecialRole::Suffix => &self.suffix,
            SpecialRole::Middle => &self.middle,
            SpecialRole::End => &self.end,
        }
    }

    /// Display strings must be nonempty and no one may contain another,
    /// otherwise prompts cannot be parsed unambiguously.
    pub fn validate(&self) -> Result<(), TokenizerError> {
        for a in SpecialRole::ALL {
            let da = self.display(a);
            if da.is_empty() {
                return Err(TokenizerError::InvalidSpecials(format!(
                    "display string for {} is empty",
                    a.key()
                )));
            }
            for b in SpecialRole::ALL {
                if a != b && self.display(b).contains(da) {
                    return Err(TokenizerError::InvalidSpecials(format!(
                        "{:?} contains {:?}",
                        self.display(b),
                        da
                    )));
                }
            }
        }
        Ok(())
    }

    /// Returns the first special token whose display string occurs in `text`.
    pub fn find_in(&self, text: &[u8]) -> Option<SpecialRole> {
        SpecialRole::ALL
            .into_iter()
            .find(|&r| find_subslice(text, self.display(r).as_bytes()).is_some())
    }
}

pub(crate) fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    if needle.is_empty() {
        return Some(0);
    }
    haystack.windows(needle.len()).position(|w| w == needle)
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Entry {
    Content(Vec<u8>),
    Special(SpecialRole),
}

#[derive(Debug, Clone, Default)]
struct TrieNode {
    next: HashMap<u8, u32>,
    token: Option<TokenId>,
}

/// Byte trie over content tokens, used for longest-match lookup.
#[derive(Debug, Clone)]
struct ByteTrie {
    nodes: Vec<TrieNode>,
}

impl ByteTrie {
    fn new() -> Self {
        Self {
            nodes: vec![TrieNode::default()],
        }
    }

    fn insert(&mut self, bytes: &[u8], id: TokenId) {
        let mut node = 0usize;
        for &b in bytes {
            node = match self.nodes[node].next.get(&b) {
                Some(&n) => n as usize,
                None => {
                    self.nodes.push(TrieNode::default());
                    let n = self.nodes.len() - 1;
                    self.nodes[node].next.insert(b, n as u32);
                    n
                }
            };
        }
        self.nodes[node].token = Some(id);
    }

    /// Longest token matching at the start of `text`, as (id, byte length).
    fn longest_match(&self, text: &[u8]) -> Option<(TokenId, usize)> {
        let mut node = 0usize;
        let mut best = None;
        for (i, b) in text.iter().enumerate() {
            match self.nodes[node].next.get(b) {
                Some(&n) => {
                    node = n as usize;
                    if let Some(t) = self.nodes[node].token {
                        best = Some((t, i + 1));
                    }
                }
                None => break,
            }
        }
        best
    }
}

/// An immutable token vocabulary.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    entries: Vec<Entry>,
    specials: SpecialTokens,
    special_ids: [TokenId; 4],
    trie: ByteTrie,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.entries == other.entries && self.specials == other.specials
    }
}

impl Vocabulary {
    /// The 256 byte tokens plus the specials; no merges.
    pub fn byte_level(specials: SpecialTokens) -> Result<Self, TokenizerError> {
        let mut entries: Vec<Entry> = (0..=255u8).map(|b| Entry::Content(vec![b])).collect();
        entries.extend(SpecialRole::ALL.into_iter().map(Entry::Special));
        Self::from_entries(entries, specials)
    }

    fn from_entries(entries: Vec<Entry>, specials: SpecialTokens) -> Result<Self, TokenizerError> {
        specials.validate()?;
        let mut trie = ByteTrie::new();
        let mut seen: HashMap<&[u8], TokenId> = HashMap::new();
        let mut special_ids = [None; 4];
        for (id, entry) in entries.iter().enumerate() {
            let id = id as TokenId;
            match entry {
                Entry::Content(bytes) => {
                    if bytes.is_empty() {
                        return Err(TokenizerError::InvalidVocabulary(format!("token {id} is empty")));
                    }
                    if seen.insert(bytes, id).is_some() {
                        return Err(TokenizerError::InvalidVocabulary(format!(
                            "duplicate byte string for token {id}"
                        )));
                    }
                    if let Some(role) = specials.find_in(bytes) {
                        return Err(TokenizerError::InvalidVocabulary(format!(
                            "token {id} contains the display string of special {}",
                            role.key()
                        )));
                    }
                    trie.insert(bytes, id);
                }
                Entry::Special(role) => {
                    let slot = &mut special_ids[*role as usize];
                    if slot.is_some() {
                        return Err(TokenizerError::InvalidVocabulary(format!(
                            "special {} defined twice",
                            role.key()
                        )));
                    }
                    *slot = Some(id);
                }
            }
        }
        for b in 0..=255u8 {
            if !seen.contains_key(&[b][..]) {
                return Err(TokenizerError::InvalidVocabulary(format!("missing byte token {b:#04x}")));
            }
        }
        let mut ids = [0; 4];
        for role in SpecialRole::ALL {
            ids[role as usize] = special_ids[role as usize].ok_or_else(|| {
                TokenizerError::InvalidVocabulary(format!("missing special {}", role.key()))
            })?;
        }
        Ok(Self {
            entries,
            specials,
            special_ids: ids,
            trie,
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn specials(&self) -> &SpecialTokens {
        &self.specials
    }

    pub fn special_id(&self, role: SpecialRole) -> TokenId {
        self.special_ids[role as usize]
    }

    /// The role of `id` if it is a special token.
    pub fn special_role(&self, id: TokenId) -> Option<SpecialRole> {
        match self.entries.get(id as usize) {
            Some(Entry::Special(role)) => Some(*role),
            _ => None,
        }
    }

    /// Bytes of a content token, `None` for specials and unknown ids.
    pub fn token_bytes(&self, id: TokenId) -> Option<&[u8]> {
        match self.entries.get(id as usize) {
            Some(Entry::Content(bytes)) => Some(bytes),
            _ => None,
        }
    }

    pub fn contains_bytes(&self, bytes: &[u8]) -> bool {
        self.entries
            .iter()
            .any(|e| matches!(e, Entry::Content(b) if b == bytes))
    }

    /// Greedy longest-match segmentation. Never emits special ids.
    pub fn encode(&self, text: &[u8]) -> TokenSeq {
        let mut out = Vec::with_capacity(text.len() / 2 + 1);
        self.encode_into(text, &mut out);
        out
    }

    pub fn encode_into(&self, text: &[u8], out: &mut TokenSeq) {
        let mut pos = 0;
        while pos < text.len() {
            let (id, len) = self
                .trie
                .longest_match(&text[pos..])
                .expect("byte fallback covers every byte");
            out.push(id);
            pos += len;
        }
    }

    /// Concatenates token bytes; specials render as their display strings.
    pub fn decode(&self, tokens: &[TokenId]) -> Result<Vec<u8>, TokenizerError> {
        let mut out = Vec::new();
        for &id in tokens {
            match self.entries.get(id as usize) {
                Some(Entry::Content(bytes)) => out.extend_from_slice(bytes),
                Some(Entry::Special(role)) => {
                    out.extend_from_slice(self.specials.display(*role).as_bytes())
                }
                None => return Err(TokenizerError::InvalidToken(id)),
            }
        }
        Ok(out)
    }

    /// Byte-pair merge training. The result has exactly `target_size` entries
    /// unless the corpus runs out of pairs seen at least twice.
    ///
    /// Ties in pair frequency go to the lexicographically smallest merged
    /// byte string, so the output depends only on the corpus contents and order.
    pub fn train<I, B>(corpus: I, target_size: usize, specials: SpecialTokens) -> Result<Self, TokenizerError>
    where
        I: IntoIterator<Item = B>,
        B: AsRef<[u8]>,
    {
        let minimum = 256 + SpecialRole::ALL.len();
        if target_size < minimum {
            return Err(TokenizerError::TargetTooSmall {
                target: target_size,
                minimum,
            });
        }
        let base = Self::byte_level(specials.clone())?;
        let mut entries = base.entries;
        let mut by_bytes: HashMap<Vec<u8>, TokenId> = (0..=255u8).map(|b| (vec![b], b as TokenId)).collect();
        let mut seqs: Vec<Vec<TokenId>> = corpus
            .into_iter()
            .map(|doc| doc.as_ref().iter().map(|&b| b as TokenId).collect())
            .filter(|s: &Vec<TokenId>| s.len() >= 2)
            .collect();

        let bytes_of = |entries: &[Entry], id: TokenId| -> Vec<u8> {
            match &entries[id as usize] {
                Entry::Content(b) => b.clone(),
                Entry::Special(_) => unreachable!("training sequences hold content ids only"),
            }
        };

        while entries.len() < target_size {
            let mut counts: HashMap<(TokenId, TokenId), usize> = HashMap::new();
            for seq in &seqs {
                for w in seq.windows(2) {
                    *counts.entry((w[0], w[1])).or_default() += 1;
                }
            }
            let mut best: Option<(usize, Vec<u8>, (TokenId, TokenId))> = None;
            for (&pair, &count) in &counts {
                if count < MIN_MERGE_FREQUENCY {
                    continue;
                }
                if let Some((best_count, _, _)) = &best {
                    if count < *best_count {
                        continue;
                    }
                }
                let mut merged = bytes_of(&entries, pair.0);
                merged.extend(bytes_of(&entries, pair.1));
                if specials.find_in(&merged).is_some() {
                    continue;
                }
                let better = match &best {
                    None => true,
                    Some((bc, bm, _)) => count > *bc || (count == *bc && merged < *bm),
                };
                if better {
                    best = Some((count, merged, pair));
                }
            }
            let Some((_, merged, pair)) = best else { break };
            let new_id = match by_bytes.get(&merged) {
                Some(&existing) => existing,
                None => {
                    let id = entries.len() as TokenId;
                    entries.push(Entry::Content(merged.clone()));
                    by_bytes.insert(merged, id);
                    id
                }
            };
            for seq in &mut seqs {
                merge_pair(seq, pair, new_id);
            }
            seqs.retain(|s| s.len() >= 2);
        }
        Self::from_entries(entries, specials)
    }

    pub fn to_json(&self) -> Result<String, TokenizerError> {
        let mut specials = BTreeMap::new();
        let mut tokens = Vec::new();
        for (id, entry) in self.entries.iter().enumerate() {
            match entry {
                Entry::Content(bytes) => tokens.push(TokenRecord {
                    id: id as TokenId,
                    hex: hex::encode(bytes),
                }),
                Entry::Special(role) => {
                    specials.insert(
                        role.key().to_string(),
                        SpecialRecord {
                            id: id as TokenId,
                            text: self.specials.display(*role).to_string(),
                        },
                    );
                }
            }
        }
        Ok(serde_json::to_string_pretty(&VocabFile { specials, tokens })?)
    }

    pub fn from_json(json: &str) -> Result<Self, TokenizerError> {
        let file: VocabFile = serde_json::from_str(json)?;
        let total = file.tokens.len() + file.specials.len();
        let mut slots: Vec<Option<Entry>> = vec![None; total];
        let mut place = |id: TokenId, entry: Entry| -> Result<(), TokenizerError> {
            let slot = slots
                .get_mut(id as usize)
                .ok_or_else(|| TokenizerError::InvalidVocabulary(format!("id {id} out of dense range 0..{total}")))?;
            if slot.is_some() {
                return Err(TokenizerError::InvalidVocabulary(format!("id {id} used twice")));
            }
            *slot = Some(entry);
            Ok(())
        };
        let mut specials = SpecialTokens::default();
        for (key, rec) in &file.specials {
            let role = SpecialRole::from_key(key)
                .ok_or_else(|| TokenizerError::InvalidVocabulary(format!("unknown special key {key:?}")))?;
            match role {
                SpecialRole::Prefix => specials.prefix = rec.text.clone(),
                SpecialRole::Suffix => specials.suffix = rec.text.clone(),
                SpecialRole::Middle => specials.middle = rec.text.clone(),
                SpecialRole::End => specials.end = rec.text.clone(),
            }
            place(rec.id, Entry::Special(role))?;
        }
        for rec in &file.tokens {
            let bytes = hex::decode(&rec.hex)
                .map_err(|e| TokenizerError::InvalidVocabulary(format!("token {}: {e}", rec.id)))?;
            place(rec.id, Entry::Content(bytes))?;
        }
        // Every slot is filled: `total` ids were placed without collision.
        let entries = slots.into_iter().map(|e| e.expect("dense ids")).collect();
        Self::from_entries(entries, specials)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_json()?)?;
        Ok(())
    }
}

fn merge_pair(seq: &mut Vec<TokenId>, pair: (TokenId, TokenId), new_id: TokenId) {
    let mut write = 0;
    let mut read = 0;
    while read < seq.len() {
        if read + 1 < seq.len() && seq[read] == pair.0 && seq[read + 1] == pair.1 {
            seq[write] = new_id;
            read += 2;
        } else {
            seq[write] = seq[read];
            read += 1;
        }
        write += 1;
    }
    seq.truncate(write);
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct VocabFile {
    specials: BTreeMap<String, SpecialRecord>,
    tokens: Vec<TokenRecord>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SpecialRecord {
    id: TokenId,
    text: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TokenRecord {
    id: TokenId,
    hex: String,
}

/// ASCII alphanumerics and underscore.
pub fn is_word_byte(b: u8) -> bool {
    b.is_ascii_alphanumeric() || b == b'_'
}

/// True when a split at `pos` lands inside a word, e.g. "pri|nt".
pub fn is_word_interior_boundary(text: &[u8], pos: usize) -> bool {
    pos > 0 && pos < text.len() && is_word_byte(text[pos - 1]) && is_word_byte(text[pos])
}
