//! Training-data processing: the classic FIM transformation and fragment
//! tokenization.
//!
//! Fragment tokenization cuts a document into segments of random length,
//! tokenizes each one on its own and concatenates the results. Segment
//! boundaries that fall inside a word leave subtokens in the token stream,
//! far from any special token.

use std::io::{BufRead, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;
use walkdir::WalkDir;

use crate::tokenizer::{is_word_interior_boundary, SpecialRole, TokenSeq, TokenizerError, Vocabulary};

#[derive(Debug, Error)]
pub enum FragmentError {
    #[error("document {id:?} is empty")]
    EmptyDocument { id: String },
    #[error("document of {len} bytes is too short for a three-way split")]
    TooShort { len: usize },
    #[error("invalid segment range [{min_len}, {max_len}]")]
    InvalidSegmentRange { min_len: usize, max_len: usize },
    #[error("split points ({0}, {1}) out of order or out of range")]
    InvalidSplits(usize, usize),
    #[error("invalid option: {0}")]
    InvalidOption(String),
    #[error("malformed sample: {0}")]
    Malformed(String),
    #[error("sample stats need at least one sample")]
    NoSamples,
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Document {
    pub id: String,
    pub text: Vec<u8>,
}

impl Document {
    pub fn new(id: impl Into<String>, text: impl Into<Vec<u8>>) -> Result<Self, FragmentError> {
        let doc = Self {
            id: id.into(),
            text: text.into(),
        };
        if doc.text.is_empty() {
            return Err(FragmentError::EmptyDocument { id: doc.id });
        }
        Ok(doc)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum FimMode {
    Psm,
    Spm,
}

/// Inclusive bounds on fragment length in bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentRange {
    pub min_len: usize,
    pub max_len: usize,
}

impl Default for SegmentRange {
    fn default() -> Self {
        Self { min_len: 1, max_len: 200 }
    }
}

impl SegmentRange {
    pub fn validate(&self) -> Result<(), FragmentError> {
        if self.min_len == 0 || self.max_len < self.min_len {
            return Err(FragmentError::InvalidSegmentRange {
                min_len: self.min_len,
                max_len: self.max_len,
            });
        }
        Ok(())
    }
}

/// A byte range of the source document that was tokenized on its own.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
    /// The drawn length ran past the end of the text or part.
    pub truncated: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SampleLayout {
    /// Content tokens in document order, no specials.
    Plain,
    /// Document split at `prefix_end <= middle_end`, reordered with specials
    /// and terminated by the end token.
    Fim {
        mode: FimMode,
        prefix_end: usize,
        middle_end: usize,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProcessedSample {
    pub id: String,
    pub tokens: TokenSeq,
    /// Document offsets where tokenization restarted, ascending.
    pub boundary_offsets: Vec<usize>,
    pub word_interior_boundaries: usize,
    pub segments: Vec<Segment>,
    pub layout: SampleLayout,
}

impl ProcessedSample {
    fn finish(id: &str, text: &[u8], tokens: TokenSeq, boundary_offsets: Vec<usize>, segments: Vec<Segment>, layout: SampleLayout) -> Self {
        let word_interior_boundaries = boundary_offsets
            .iter()
            .filter(|&&o| is_word_interior_boundary(text, o))
            .count();
        Self {
            id: id.to_string(),
            tokens,
            boundary_offsets,
            word_interior_boundaries,
            segments,
            layout,
        }
    }

    /// Decodes the content tokens and undoes the FIM reordering.
    pub fn reconstruct(&self, vocab: &Vocabulary) -> Result<Vec<u8>, FragmentError> {
        let SampleLayout::Fim { mode, .. } = self.layout else {
            if self.tokens.iter().any(|&t| vocab.special_role(t).is_some()) {
                return Err(FragmentError::Malformed("special token in plain sample".into()));
            }
            return Ok(vocab.decode(&self.tokens)?);
        };
        let order = match mode {
            FimMode::Psm => [SpecialRole::Prefix, SpecialRole::Suffix, SpecialRole::Middle, SpecialRole::End],
            FimMode::Spm => [SpecialRole::Suffix, SpecialRole::Prefix, SpecialRole::Middle, SpecialRole::End],
        };
        let mut parts: [Vec<u8>; 3] = Default::default();
        let mut expected = order.iter();
        let mut current: Option<SpecialRole> = None;
        let mut run_start = 0;
        for (i, &t) in self.tokens.iter().enumerate() {
            let Some(role) = vocab.special_role(t) else { continue };
            if expected.next() != Some(&role) {
                return Err(FragmentError::Malformed(format!("unexpected {role:?} at token {i}")));
            }
            if let Some(prev) = current {
                parts[prev as usize] = vocab.decode(&self.tokens[run_start..i])?;
            } else if i != 0 {
                return Err(FragmentError::Malformed("content before the first special".into()));
            }
            current = Some(role);
            run_start = i + 1;
        }
        if current != Some(SpecialRole::End) || run_start != self.tokens.len() {
            return Err(FragmentError::Malformed("sample does not end with the end token".into()));
        }
        let [prefix, suffix, middle] = parts;
        Ok([prefix, middle, suffix].concat())
    }
}

/// Two uniform split points over `0..=len`, sorted.
pub fn draw_splits<R: Rng>(rng: &mut R, len: usize) -> (usize, usize) {
    let a = rng.random_range(0..=len);
    let b = rng.random_range(0..=len);
    (a.min(b), a.max(b))
}

/// Uniform segment lengths covering `len` bytes; the last one may be cut.
pub fn draw_segments<R: Rng>(rng: &mut R, start: usize, len: usize, range: SegmentRange) -> Vec<Segment> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < len {
        let drawn = rng.random_range(range.min_len..=range.max_len);
        let take = drawn.min(len - pos);
        out.push(Segment {
            start: start + pos,
            len: take,
            truncated: take < drawn,
        });
        pos += take;
    }
    out
}

fn fim_sample(doc: &Document, vocab: &Vocabulary, mode: FimMode, splits: (usize, usize), segments: Vec<Segment>) -> ProcessedSample {
    let (a, b) = splits;
    let text = &doc.text;
    let mut tokens = TokenSeq::new();
    let emit_part = |role: SpecialRole, range: std::ops::Range<usize>, tokens: &mut TokenSeq| {
        tokens.push(vocab.special_id(role));
        for s in segments.iter().filter(|s| range.contains(&s.start)) {
            vocab.encode_into(&text[s.start..s.start + s.len], tokens);
        }
    };
    match mode {
        FimMode::Psm => {
            emit_part(SpecialRole::Prefix, 0..a, &mut tokens);
            emit_part(SpecialRole::Suffix, b..text.len(), &mut tokens);
        }
        FimMode::Spm => {
            emit_part(SpecialRole::Suffix, b..text.len(), &mut tokens);
            emit_part(SpecialRole::Prefix, 0..a, &mut tokens);
        }
    }
    emit_part(SpecialRole::Middle, a..b, &mut tokens);
    tokens.push(vocab.special_id(SpecialRole::End));

    let mut boundaries: Vec<usize> = segments
        .iter()
        .map(|s| s.start)
        .filter(|&o| o != 0 && o != a && o != b)
        .chain([a, b])
        .collect();
    boundaries.sort_unstable();
    ProcessedSample::finish(
        &doc.id,
        text,
        tokens,
        boundaries,
        segments,
        SampleLayout::Fim {
            mode,
            prefix_end: a,
            middle_end: b,
        },
    )
}

fn check_fim_len(doc: &Document) -> Result<(), FragmentError> {
    if doc.text.len() < 3 {
        return Err(FragmentError::TooShort { len: doc.text.len() });
    }
    Ok(())
}

/// Classic FIM: one prefix/middle/suffix split, each part tokenized whole.
/// Both split points count as boundaries, even when they coincide with
/// each other or with an end of the text.
pub fn fim_transform<R: Rng>(doc: &Document, vocab: &Vocabulary, rng: &mut R, mode: FimMode) -> Result<ProcessedSample, FragmentError> {
    check_fim_len(doc)?;
    let splits = draw_splits(rng, doc.text.len());
    fim_transform_at(doc, vocab, splits, mode)
}

/// [`fim_transform`] at given split points.
pub fn fim_transform_at(doc: &Document, vocab: &Vocabulary, splits: (usize, usize), mode: FimMode) -> Result<ProcessedSample, FragmentError> {
    let (a, b) = splits;
    if a > b || b > doc.text.len() {
        return Err(FragmentError::InvalidSplits(a, b));
    }
    let len = doc.text.len();
    let segments = [(0, a), (a, b - a), (b, len - b)]
        .into_iter()
        .filter(|&(_, l)| l > 0)
        .map(|(start, len)| Segment {
            start,
            len,
            truncated: false,
        })
        .collect();
    Ok(fim_sample(doc, vocab, mode, splits, segments))
}

/// Fragment tokenization of the whole document, without reordering.
pub fn fragment_tokenize<R: Rng>(doc: &Document, vocab: &Vocabulary, rng: &mut R, range: SegmentRange) -> Result<ProcessedSample, FragmentError> {
    range.validate()?;
    let segments = draw_segments(rng, 0, doc.text.len(), range);
    Ok(plain_sample(doc, vocab, segments))
}

/// Fragment tokenization with explicit segment lengths. Lengths past the
/// end of the text are truncated; leftover text becomes one last segment.
pub fn fragment_tokenize_with_lengths(doc: &Document, vocab: &Vocabulary, lengths: &[usize]) -> Result<ProcessedSample, FragmentError> {
    let len = doc.text.len();
    let mut segments = Vec::new();
    let mut pos = 0;
    for &l in lengths {
        if l == 0 {
            return Err(FragmentError::InvalidOption("segment lengths must be positive".into()));
        }
        if pos == len {
            break;
        }
        let take = l.min(len - pos);
        segments.push(Segment {
            start: pos,
            len: take,
            truncated: take < l,
        });
        pos += take;
    }
    if pos < len {
        segments.push(Segment {
            start: pos,
            len: len - pos,
            truncated: false,
        });
    }
    Ok(plain_sample(doc, vocab, segments))
}

fn plain_sample(doc: &Document, vocab: &Vocabulary, segments: Vec<Segment>) -> ProcessedSample {
    let mut tokens = TokenSeq::new();
    for s in &segments {
        vocab.encode_into(&doc.text[s.start..s.start + s.len], &mut tokens);
    }
    let boundaries = segments.iter().skip(1).map(|s| s.start).collect();
    ProcessedSample::finish(&doc.id, &doc.text, tokens, boundaries, segments, SampleLayout::Plain)
}

/// FIM split first, then fragment tokenization of each part.
pub fn combined_pipeline<R: Rng>(
    doc: &Document,
    vocab: &Vocabulary,
    rng: &mut R,
    mode: FimMode,
    range: SegmentRange,
) -> Result<ProcessedSample, FragmentError> {
    check_fim_len(doc)?;
    range.validate()?;
    let (a, b) = draw_splits(rng, doc.text.len());
    let mut segments = draw_segments(rng, 0, a, range);
    segments.extend(draw_segments(rng, a, b - a, range));
    segments.extend(draw_segments(rng, b, doc.text.len() - b, range));
    Ok(fim_sample(doc, vocab, mode, (a, b), segments))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SubtokenStats {
    pub boundaries_total: usize,
    pub word_interior: usize,
    /// Word-interior boundaries over all boundaries.
    pub fraction: f64,
    pub tokens_total: usize,
    /// Word-interior boundaries per token: the share of token positions
    /// directly followed by a cut inside a word.
    pub exposure: f64,
}

pub fn subtoken_stats(samples: &[ProcessedSample]) -> Result<SubtokenStats, FragmentError> {
    if samples.is_empty() {
        return Err(FragmentError::NoSamples);
    }
    let boundaries_total: usize = samples.iter().map(|s| s.boundary_offsets.len()).sum();
    let word_interior: usize = samples.iter().map(|s| s.word_interior_boundaries).sum();
    let tokens_total: usize = samples.iter().map(|s| s.tokens.len()).sum();
    let ratio = |n: usize, d: usize| if d == 0 { 0.0 } else { n as f64 / d as f64 };
    Ok(SubtokenStats {
        boundaries_total,
        word_interior,
        fraction: ratio(word_interior, boundaries_total),
        tokens_total,
        exposure: ratio(word_interior, tokens_total),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataMode {
    /// Classic FIM, parts tokenized whole.
    Fim,
    /// FIM split followed by fragment tokenization.
    Fragment,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrepareOptions {
    pub mode: DataMode,
    /// Share of documents given the FIM split; the rest stay left-to-right.
    pub fim_rate: f64,
    /// Share of FIM documents in SPM order.
    pub spm_rate: f64,
    pub segments: SegmentRange,
}

impl Default for PrepareOptions {
    fn default() -> Self {
        Self {
            mode: DataMode::Fragment,
            fim_rate: 1.0,
            spm_rate: 0.5,
            segments: SegmentRange::default(),
        }
    }
}

impl PrepareOptions {
    pub fn validate(&self) -> Result<(), FragmentError> {
        for (name, v) in [("fim_rate", self.fim_rate), ("spm_rate", self.spm_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(FragmentError::InvalidOption(format!("{name} must be in [0, 1], got {v}")));
            }
        }
        self.segments.validate()
    }
}

/// Per-document generator derived from the global seed and the document id,
/// so results do not depend on processing order.
pub fn document_rng(seed: u64, doc_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(doc_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Processes one document. `Ok(None)` means the document was skipped
/// because it is too short for a FIM split.
pub fn process_document(doc: &Document, vocab: &Vocabulary, seed: u64, opts: &PrepareOptions) -> Result<Option<ProcessedSample>, FragmentError> {
    let mut rng = document_rng(seed, &doc.id);
    let fim = rng.random_bool(opts.fim_rate);
    let mode = if rng.random_bool(opts.spm_rate) { FimMode::Spm } else { FimMode::Psm };
    let result = match (opts.mode, fim) {
        (DataMode::Fim, true) => fim_transform(doc, vocab, &mut rng, mode),
        (DataMode::Fim, false) => fragment_tokenize_with_lengths(doc, vocab, &[]),
        (DataMode::Fragment, true) => combined_pipeline(doc, vocab, &mut rng, mode, opts.segments),
        (DataMode::Fragment, false) => fragment_tokenize(doc, vocab, &mut rng, opts.segments),
    };
    match result {
        Ok(s) => Ok(Some(s)),
        Err(FragmentError::TooShort { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareReport {
    pub documents: usize,
    pub samples: usize,
    pub skipped: usize,
    pub total_tokens: usize,
    pub subtokens: Option<SubtokenStats>,
}

pub fn prepare_corpus(docs: &[Document], vocab: &Vocabulary, seed: u64, opts: &PrepareOptions) -> Result<(Vec<ProcessedSample>, PrepareReport), FragmentError> {
    opts.validate()?;
    let mut samples = Vec::with_capacity(docs.len());
    for doc in docs {
        if let Some(s) = process_document(doc, vocab, seed, opts)? {
            samples.push(s);
        }
    }
    let report = PrepareReport {
        documents: docs.len(),
        samples: samples.len(),
        skipped: docs.len() - samples.len(),
        total_tokens: samples.iter().map(|s| s.tokens.len()).sum(),
        subtokens: subtoken_stats(&samples).ok(),
    };
    Ok((samples, report))
}

/// Reads every regular file under `dir`, recursively, in file-name order. The
/// document id is the path relative to `dir`. Empty files are ignored.
pub fn load_corpus_dir(dir: impl AsRef<Path>) -> Result<Vec<Document>, FragmentError> {
    let root = dir.as_ref();
    let mut docs = Vec::new();
    for entry in WalkDir::new(root).sort_by_file_name() {
        let entry = entry.map_err(std::io::Error::from)?;
        if !entry.file_type().is_file() {
            continue;
        }
        let text = std::fs::read(entry.path())?;
        if text.is_empty() {
            continue;
        }
        let rel = entry.path().strip_prefix(root).unwrap_or(entry.path());
        let id = rel.to_string_lossy().replace('\\', "/");
        docs.push(Document { id, text });
    }
    Ok(docs)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ShardRecord {
    pub id: String,
    pub token_ids: TokenSeq,
    pub boundary_offsets: Vec<usize>,
}

pub fn write_shard<W: Write>(samples: &[ProcessedSample], mut out: W) -> Result<(), FragmentError> {
    for s in samples {
        let rec = ShardRecord {
            id: s.id.clone(),
            token_ids: s.tokens.clone(),
            boundary_offsets: s.boundary_offsets.clone(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_shard<R: BufRead>(input: R) -> Result<Vec<ShardRecord>, FragmentError> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{default_vocabulary, synthetic_corpus};
    use crate::tokenizer::SpecialTokens;
    use proptest::prelude::*;

    fn byte_vocab() -> Vocabulary {
        Vocabulary::byte_level(SpecialTokens::default()).unwrap()
    }

    fn doc(text: &str) -> Document {
        Document::new("d", text).unwrap()
    }

    // Byte ids for content, special ids for the one-letter markers P S M E.
    fn ids(v: &Vocabulary, parts: &[&str]) -> TokenSeq {
        let mut out = TokenSeq::new();
        for p in parts {
            match *p {
                "P" => out.push(v.special_id(SpecialRole::Prefix)),
                "S" => out.push(v.special_id(SpecialRole::Suffix)),
                "M" => out.push(v.special_id(SpecialRole::Middle)),
                "E" => out.push(v.special_id(SpecialRole::End)),
                text => out.extend(v.encode(text.as_bytes())),
            }
        }
        out
    }

    #[test]
    fn abc_psm_example() {
        let v = byte_vocab();
        let s = fim_transform_at(&doc("abc"), &v, (1, 2), FimMode::Psm).unwrap();
        assert_eq!(s.tokens, ids(&v, &["P", "a", "S", "c", "M", "b", "E"]));
        assert_eq!(s.boundary_offsets, vec![1, 2]);
        assert_eq!(s.word_interior_boundaries, 2);
        assert_eq!(s.reconstruct(&v).unwrap(), b"abc");
    }

    #[test]
    fn spm_order_and_full_middle() {
        let v = byte_vocab();
        let s = fim_transform_at(&doc("abc"), &v, (1, 2), FimMode::Spm).unwrap();
        assert_eq!(s.tokens, ids(&v, &["S", "c", "P", "a", "M", "b", "E"]));
        let whole = fim_transform_at(&doc("abcd"), &v, (0, 4), FimMode::Psm).unwrap();
        assert_eq!(whole.tokens, ids(&v, &["P", "S", "M", "abcd", "E"]));
        assert_eq!(whole.boundary_offsets, vec![0, 4]);
        assert_eq!(whole.word_interior_boundaries, 0);
        assert_eq!(whole.reconstruct(&v).unwrap(), b"abcd");
    }

    #[test]
    fn short_documents_are_rejected() {
        let v = byte_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(fim_transform(&doc("ab"), &v, &mut rng, FimMode::Psm), Err(FragmentError::TooShort { len: 2 })));
        assert!(Document::new("e", "").is_err());
        let opts = PrepareOptions::default();
        assert_eq!(process_document(&doc("ab"), &v, 0, &opts).unwrap(), None);
    }

    #[test]
    fn forced_lengths_example() {
        let v = byte_vocab();
        let text = "x".repeat(500);
        let s = fragment_tokenize_with_lengths(&doc(&text), &v, &[200, 200, 100]).unwrap();
        assert_eq!(s.segments.len(), 3);
        assert_eq!(s.boundary_offsets, vec![200, 400]);
        assert_eq!(s.word_interior_boundaries, 2);
        assert_eq!(s.reconstruct(&v).unwrap(), text.as_bytes());
    }

    #[test]
    fn fragment_boundaries_split_words() {
        let v = default_vocabulary();
        let whole = v.encode(b"print_value");
        let s = fragment_tokenize_with_lengths(&doc("print_value"), v, &[3]).unwrap();
        assert_eq!(s.boundary_offsets, vec![3]);
        assert_eq!(s.word_interior_boundaries, 1);
        assert_ne!(s.tokens, whole);
        assert_eq!(v.decode(&s.tokens).unwrap(), b"print_value");
    }

    #[test]
    fn wide_segments_degenerate_to_fim() {
        let v = default_vocabulary();
        let range = SegmentRange {
            min_len: 10_000,
            max_len: 10_000,
        };
        for (i, text) in synthetic_corpus(3, 20, 800).iter().enumerate() {
            let d = Document::new(format!("{i}"), text.as_bytes()).unwrap();
            let mut r1 = ChaCha8Rng::seed_from_u64(i as u64);
            let mut r2 = r1.clone();
            let f = fim_transform(&d, v, &mut r1, FimMode::Psm).unwrap();
            let c = combined_pipeline(&d, v, &mut r2, FimMode::Psm, range).unwrap();
            assert_eq!(f.tokens, c.tokens);
            assert_eq!(f.boundary_offsets, c.boundary_offsets);
            assert_eq!(f.word_interior_boundaries, c.word_interior_boundaries);
        }
    }

    #[test]
    fn stats_examples() {
        let v = byte_vocab();
        let s = fim_transform_at(&doc("ab cd"), &v, (1, 2), FimMode::Psm).unwrap();
        assert_eq!(s.boundary_offsets.len(), 2);
        assert_eq!(s.word_interior_boundaries, 1);
        let st = subtoken_stats(&[s]).unwrap();
        assert_eq!(st.fraction, 0.5);
        assert!(matches!(subtoken_stats(&[]), Err(FragmentError::NoSamples)));

        let docs: Vec<Document> = synthetic_corpus(5, 30, 300)
            .into_iter()
            .enumerate()
            .map(|(i, t)| Document::new(i.to_string(), t).unwrap())
            .collect();
        let opts = PrepareOptions {
            mode: DataMode::Fim,
            ..PrepareOptions::default()
        };
        let (samples, report) = prepare_corpus(&docs, &v, 1, &opts).unwrap();
        assert_eq!(report.subtokens.unwrap().boundaries_total, 2 * samples.len());
    }

    #[test]
    fn invalid_options() {
        let v = byte_vocab();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = SegmentRange { min_len: 5, max_len: 4 };
        assert!(fragment_tokenize(&doc("abc"), &v, &mut rng, bad).is_err());
        assert!(fragment_tokenize(&doc("abc"), &v, &mut rng, SegmentRange { min_len: 0, max_len: 4 }).is_err());
        assert!(fim_transform_at(&doc("abc"), &v, (2, 1), FimMode::Psm).is_err());
        let opts = PrepareOptions {
            fim_rate: 1.5,
            ..PrepareOptions::default()
        };
        assert!(prepare_corpus(&[], &v, 0, &opts).is_err());
    }

    #[test]
    fn reconstruct_rejects_tampered_samples() {
        let v = byte_vocab();
        let mut s = fim_transform_at(&doc("abcdef"), &v, (2, 4), FimMode::Psm).unwrap();
        s.tokens.pop();
        assert!(s.reconstruct(&v).is_err());
        let mut s = fim_transform_at(&doc("abcdef"), &v, (2, 4), FimMode::Psm).unwrap();
        s.tokens.swap(0, 3);
        assert!(s.reconstruct(&v).is_err());
    }

    #[test]
    fn document_seeds_are_order_independent() {
        let v = default_vocabulary();
        let docs: Vec<Document> = synthetic_corpus(8, 6, 400)
            .into_iter()
            .enumerate()
            .map(|(i, t)| Document::new(format!("f{i}.py"), t).unwrap())
            .collect();
        let opts = PrepareOptions::default();
        let (fwd, _) = prepare_corpus(&docs, v, 42, &opts).unwrap();
        let rev_docs: Vec<Document> = docs.iter().rev().cloned().collect();
        let (mut rev, _) = prepare_corpus(&rev_docs, v, 42, &opts).unwrap();
        rev.reverse();
        assert_eq!(fwd, rev);
    }

    #[test]
    fn shard_round_trip_and_corpus_dir() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::create_dir(dir.path().join("pkg")).unwrap();
        std::fs::write(dir.path().join("b.py"), "def f():\n    return 1\n").unwrap();
        std::fs::write(dir.path().join("pkg/a.py"), "import os\n").unwrap();
        std::fs::write(dir.path().join("empty.py"), "").unwrap();
        let docs = load_corpus_dir(dir.path()).unwrap();
        let ids: Vec<&str> = docs.iter().map(|d| d.id.as_str()).collect();
        assert_eq!(ids, ["b.py", "pkg/a.py"]);

        let v = default_vocabulary();
        let (samples, _) = prepare_corpus(&docs, v, 0, &PrepareOptions::default()).unwrap();
        let mut buf = Vec::new();
        write_shard(&samples, &mut buf).unwrap();
        let back = read_shard(&buf[..]).unwrap();
        assert_eq!(back.len(), samples.len());
        assert_eq!(back[0].token_ids, samples[0].tokens);
        assert_eq!(back[0].boundary_offsets, samples[0].boundary_offsets);
    }

    proptest! {
        #[test]
        fn every_pipeline_is_lossless(text in "[a-z_ (\n]{3,300}", seed in any::<u64>(), spm in any::<bool>(), fim_rate in 0.0f64..=1.0) {
            let v = default_vocabulary();
            let d = Document::new("p", text.as_bytes()).unwrap();
            let mode = if spm { FimMode::Spm } else { FimMode::Psm };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let range = SegmentRange::default();
            for s in [
                fim_transform(&d, v, &mut rng, mode).unwrap(),
                fragment_tokenize(&d, v, &mut rng, range).unwrap(),
                combined_pipeline(&d, v, &mut rng, mode, SegmentRange { min_len: 1, max_len: 20 }).unwrap(),
            ] {
                prop_assert_eq!(s.reconstruct(v).unwrap(), text.as_bytes());
                prop_assert!(s.boundary_offsets.windows(2).all(|w| w[0] <= w[1]));
                let covered: usize = s.segments.iter().map(|g| g.len).sum();
                prop_assert_eq!(covered, text.len());
            }
            for mode in [DataMode::Fim, DataMode::Fragment] {
                let opts = PrepareOptions { mode, fim_rate, ..PrepareOptions::default() };
                let s = process_document(&d, v, seed, &opts).unwrap().unwrap();
                prop_assert_eq!(s.reconstruct(v).unwrap(), text.as_bytes());
            }
        }

        #[test]
        fn combined_has_at_least_the_fim_boundaries(text in "[a-z ]{3,400}", seed in any::<u64>()) {
            let v = default_vocabulary();
            let d = Document::new("p", text.as_bytes()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = combined_pipeline(&d, v, &mut rng, FimMode::Psm, SegmentRange::default()).unwrap();
            let SampleLayout::Fim { prefix_end, middle_end, .. } = s.layout else { unreachable!() };
            prop_assert!(s.boundary_offsets.len() >= 2);
            prop_assert!(s.boundary_offsets.contains(&prefix_end));
            prop_assert!(s.boundary_offsets.contains(&middle_end));
        }
    }
}
