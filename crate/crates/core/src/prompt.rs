//! PSM, SPM and EFIM prompt layouts.
//!
//! ```text
//! PSM   <P>prefix<S>suffix<M>
//! SPM   <S>suffix<P>prefix<M>
//! EFIM  <P>prefix<S>suffix<M>inc
//! ```
//!
//! Training layouts additionally carry the middle followed by `<E>`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tokenizer::{find_subslice, SpecialRole, SpecialTokens, TokenSeq, Vocabulary};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum PromptError {
    #[error("malformed prompt: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PromptFormat {
    Psm,
    Spm,
    Efim,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptLayout {
    pub format: PromptFormat,
    pub prefix: Vec<u8>,
    pub suffix: Vec<u8>,
    /// Prefix increment placed after `<M>`; nonempty only for EFIM.
    pub inc: Vec<u8>,
    /// Training-time target span, rendered after `<M>` and closed by `<E>`.
    pub middle: Option<Vec<u8>>,
}

impl PromptLayout {
    pub fn psm(prefix: impl Into<Vec<u8>>, suffix: impl Into<Vec<u8>>) -> Self {
        Self {
            format: PromptFormat::Psm,
            prefix: prefix.into(),
            suffix: suffix.into(),
            inc: Vec::new(),
            middle: None,
        }
    }

    pub fn spm(prefix: impl Into<Vec<u8>>, suffix: impl Into<Vec<u8>>) -> Self {
        Self {
            format: PromptFormat::Spm,
            ..Self::psm(prefix, suffix)
        }
    }

    pub fn efim(common_prefix: impl Into<Vec<u8>>, suffix: impl Into<Vec<u8>>, inc: impl Into<Vec<u8>>) -> Self {
        Self {
            format: PromptFormat::Efim,
            inc: inc.into(),
            ..Self::psm(common_prefix, suffix)
        }
    }

    /// The full prefix the user sees: common part followed by the increment.
    pub fn full_prefix(&self) -> Vec<u8> {
        let mut p = self.prefix.clone();
        p.extend_from_slice(&self.inc);
        p
    }

    pub fn render(&self, specials: &SpecialTokens) -> Vec<u8> {
        let tok = |r: SpecialRole| specials.display(r).as_bytes();
        let mut out = Vec::with_capacity(self.prefix.len() + self.suffix.len() + self.inc.len() + 16);
        match self.format {
            PromptFormat::Psm | PromptFormat::Efim => {
                out.extend_from_slice(tok(SpecialRole::Prefix));
                out.extend_from_slice(&self.prefix);
                out.extend_from_slice(tok(SpecialRole::Suffix));
                out.extend_from_slice(&self.suffix);
            }
            PromptFormat::Spm => {
                out.extend_from_slice(tok(SpecialRole::Suffix));
                out.extend_from_slice(&self.suffix);
                out.extend_from_slice(tok(SpecialRole::Prefix));
                out.extend_from_slice(&self.prefix);
            }
        }
        out.extend_from_slice(tok(SpecialRole::Middle));
        out.extend_from_slice(&self.inc);
        if let Some(middle) = &self.middle {
            out.extend_from_slice(middle);
            out.extend_from_slice(tok(SpecialRole::End));
        }
        out
    }

    /// Segment-wise tokenization: each part is encoded on its own with
    /// special ids interposed. `inc_breaks` are byte offsets inside `inc`
    /// where encoding restarts, so an increment that grew over several rounds
    /// keeps the token sequence issued in earlier rounds as a prefix.
    pub fn encode(&self, vocab: &Vocabulary, inc_breaks: &[usize]) -> TokenSeq {
        let mut out = TokenSeq::with_capacity(self.prefix.len() + self.suffix.len() + self.inc.len());
        let sp = |r: SpecialRole| vocab.special_id(r);
        match self.format {
            PromptFormat::Psm | PromptFormat::Efim => {
                out.push(sp(SpecialRole::Prefix));
                vocab.encode_into(&self.prefix, &mut out);
                out.push(sp(SpecialRole::Suffix));
                vocab.encode_into(&self.suffix, &mut out);
            }
            PromptFormat::Spm => {
                out.push(sp(SpecialRole::Suffix));
                vocab.encode_into(&self.suffix, &mut out);
                out.push(sp(SpecialRole::Prefix));
                vocab.encode_into(&self.prefix, &mut out);
            }
        }
        out.push(sp(SpecialRole::Middle));
        let mut start = 0;
        for &cut in inc_breaks.iter().filter(|&&c| c > 0 && c < self.inc.len()) {
            if cut > start {
                vocab.encode_into(&self.inc[start..cut], &mut out);
                start = cut;
            }
        }
        vocab.encode_into(&self.inc[start..], &mut out);
        if let Some(middle) = &self.middle {
            vocab.encode_into(middle, &mut out);
            out.push(sp(SpecialRole::End));
        }
        out
    }

    /// Inverse of [`PromptLayout::render`]. The format is identified by the
    /// order of the special tokens; trailing content after `<M>` without an
    /// `<E>` marks EFIM.
    pub fn parse(prompt: &[u8], specials: &SpecialTokens) -> Result<Self, PromptError> {
        let mut found: Vec<(usize, SpecialRole)> = Vec::new();
        for role in SpecialRole::ALL {
            let needle = specials.display(role).as_bytes();
            let mut from = 0;
            while let Some(i) = find_subslice(&prompt[from..], needle) {
                found.push((from + i, role));
                from += i + needle.len();
            }
        }
        found.sort();
        let count = |r: SpecialRole| found.iter().filter(|(_, x)| *x == r).count();
        for role in [SpecialRole::Prefix, SpecialRole::Suffix, SpecialRole::Middle] {
            if count(role) != 1 {
                return Err(PromptError::Malformed(format!(
                    "expected exactly one {}, found {}",
                    specials.display(role),
                    count(role)
                )));
            }
        }
        if count(SpecialRole::End) > 1 {
            return Err(PromptError::Malformed(format!(
                "more than one {}",
                specials.display(SpecialRole::End)
            )));
        }
        let order: Vec<SpecialRole> = found.iter().map(|(_, r)| *r).collect();
        let format = match order[..3] {
            [SpecialRole::Prefix, SpecialRole::Suffix, SpecialRole::Middle] => PromptFormat::Psm,
            [SpecialRole::Suffix, SpecialRole::Prefix, SpecialRole::Middle] => PromptFormat::Spm,
            _ => return Err(PromptError::Malformed("special tokens out of order".into())),
        };
        if found[0].0 != 0 {
            return Err(PromptError::Malformed("content before the first special token".into()));
        }
        let seg = |k: usize| -> &[u8] {
            let start = found[k].0 + specials.display(found[k].1).len();
            let end = found.get(k + 1).map_or(prompt.len(), |(i, _)| *i);
            &prompt[start..end]
        };
        let (prefix, suffix) = match format {
            PromptFormat::Spm => (seg(1), seg(0)),
            _ => (seg(0), seg(1)),
        };
        let after_middle = seg(2);
        let mut layout = Self {
            format,
            prefix: prefix.to_vec(),
            suffix: suffix.to_vec(),
            inc: Vec::new(),
            middle: None,
        };
        if found.len() == 4 {
            let end_at = found[3].0;
            if end_at + specials.end.len() != prompt.len() {
                return Err(PromptError::Malformed(format!(
                    "content after {}",
                    specials.display(SpecialRole::End)
                )));
            }
            layout.middle = Some(after_middle.to_vec());
        } else if !after_middle.is_empty() {
            if format == PromptFormat::Spm {
                return Err(PromptError::Malformed("SPM prompt with content after the middle marker".into()));
            }
            layout.format = PromptFormat::Efim;
            layout.inc = after_middle.to_vec();
        }
        Ok(layout)
    }
}

pub fn render_psm(specials: &SpecialTokens, prefix: &[u8], suffix: &[u8]) -> Vec<u8> {
    PromptLayout::psm(prefix, suffix).render(specials)
}

pub fn render_spm(specials: &SpecialTokens, prefix: &[u8], suffix: &[u8]) -> Vec<u8> {
    PromptLayout::spm(prefix, suffix).render(specials)
}

pub fn render_efim(specials: &SpecialTokens, common_prefix: &[u8], suffix: &[u8], inc: &[u8]) -> Vec<u8> {
    PromptLayout::efim(common_prefix, suffix, inc).render(specials)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sp() -> SpecialTokens {
        SpecialTokens::default()
    }

    #[test]
    fn psm_rendering() {
        assert_eq!(render_psm(&sp(), b"a", b"b"), b"<P>a<S>b<M>");
        assert_eq!(render_psm(&sp(), b"", b""), b"<P><S><M>");
        assert_eq!(
            render_psm(&sp(), b"def f():\n    ", b"\n    return x"),
            b"<P>def f():\n    <S>\n    return x<M>"
        );
    }

    #[test]
    fn spm_rendering() {
        assert_eq!(render_spm(&sp(), b"a", b"b"), b"<S>b<P>a<M>");
        assert_eq!(render_spm(&sp(), b"", b""), b"<S><P><M>");
        let out = render_spm(&sp(), b"left", b"right");
        assert_eq!(find_subslice(&out, b"left").map(|_| ()), Some(()));
        assert_eq!(out.windows(4).filter(|w| w == b"left").count(), 1);
        assert_eq!(out.windows(5).filter(|w| w == b"right").count(), 1);
    }

    #[test]
    fn efim_rendering() {
        assert_eq!(render_efim(&sp(), b"a", b"b", b"c"), b"<P>a<S>b<M>c");
        assert_eq!(render_efim(&sp(), b"p", b"s", b""), render_psm(&sp(), b"p", b"s"));
        assert_eq!(
            render_efim(&sp(), b"def f():", b"\nreturn", b" x = "),
            b"<P>def f():<S>\nreturn<M> x = "
        );
    }

    #[test]
    fn parse_examples() {
        assert_eq!(PromptLayout::parse(b"<P>a<S>b<M>", &sp()).unwrap(), PromptLayout::psm("a", "b"));
        assert_eq!(
            PromptLayout::parse(b"<P>a<S>b<M>c", &sp()).unwrap(),
            PromptLayout::efim("a", "b", "c")
        );
        assert!(PromptLayout::parse(b"<M>x<P>", &sp()).is_err());
        assert!(PromptLayout::parse(b"<P>a<P>b<S>c<M>", &sp()).is_err());
        assert!(PromptLayout::parse(b"x<P>a<S>b<M>", &sp()).is_err());
        assert!(PromptLayout::parse(b"<S>b<P>a<M>c", &sp()).is_err());
        assert!(PromptLayout::parse(b"<P>a<S>b<M>c<E>d", &sp()).is_err());
    }

    #[test]
    fn parse_training_layout_with_middle() {
        let mut layout = PromptLayout::spm("a", "c");
        layout.middle = Some(b"b".to_vec());
        let rendered = layout.render(&sp());
        assert_eq!(rendered, b"<S>c<P>a<M>b<E>");
        assert_eq!(PromptLayout::parse(&rendered, &sp()).unwrap(), layout);
    }

    #[test]
    fn custom_display_strings() {
        let specials = SpecialTokens {
            prefix: "<|fim_prefix|>".into(),
            suffix: "<|fim_suffix|>".into(),
            middle: "<|fim_middle|>".into(),
            end: "<|endoftext|>".into(),
        };
        let out = render_efim(&specials, b"a", b"b", b"c");
        assert_eq!(out, b"<|fim_prefix|>a<|fim_suffix|>b<|fim_middle|>c");
        assert_eq!(PromptLayout::parse(&out, &specials).unwrap(), PromptLayout::efim("a", "b", "c"));
    }

    #[test]
    fn efim_tokens_extend_psm_tokens() {
        let vocab = Vocabulary::train(["def value(): return value_x"; 3], 300, sp()).unwrap();
        let psm = PromptLayout::psm("def val", "return").encode(&vocab, &[]);
        let efim = PromptLayout::efim("def val", "return", "ue(): ").encode(&vocab, &[]);
        assert!(efim.len() > psm.len());
        assert_eq!(&efim[..psm.len()], &psm[..]);
    }

    #[test]
    fn inc_breaks_restart_encoding() {
        let vocab = Vocabulary::train(["abcabcabc"; 4], 300, sp()).unwrap();
        let once = PromptLayout::efim("", "", "abc").encode(&vocab, &[]);
        let split = PromptLayout::efim("", "", "abc").encode(&vocab, &[2]);
        assert_eq!(vocab.decode(&once).unwrap(), vocab.decode(&split).unwrap());
        let first = PromptLayout::efim("", "", "ab").encode(&vocab, &[]);
        assert_eq!(&split[..first.len()], &first[..]);
    }

    fn segment() -> impl Strategy<Value = Vec<u8>> {
        "[a-z_ ()\n<>PSM]{0,24}"
            .prop_map(String::into_bytes)
            .prop_filter("no display strings", |s| sp().find_in(s).is_none())
    }

    proptest! {
        #[test]
        fn parse_inverts_render(p in segment(), s in segment(), inc in segment(), which in 0u8..3) {
            let layout = match which {
                0 => PromptLayout::psm(p, s),
                1 => PromptLayout::spm(p, s),
                _ => PromptLayout::efim(p, s, inc),
            };
            let rendered = layout.render(&sp());
            let parsed = PromptLayout::parse(&rendered, &sp()).unwrap();
            prop_assert_eq!(parsed.render(&sp()), rendered);
            if layout.format != PromptFormat::Efim || !layout.inc.is_empty() {
                prop_assert_eq!(parsed, layout);
            }
        }
    }
}
