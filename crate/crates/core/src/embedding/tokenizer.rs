use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A caption substring grounded to one object, in character offsets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub object: usize,
    pub start: usize,
    pub end: usize,
}

/// Caption text plus the character spans naming each object.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundedCaption {
    pub text: String,
    #[serde(default)]
    pub spans: Vec<Span>,
}

impl GroundedCaption {
    pub fn new(text: impl Into<String>, spans: Vec<Span>) -> Self {
        GroundedCaption {
            text: text.into(),
            spans,
        }
    }

    pub fn empty() -> Self {
        GroundedCaption::default()
    }

    /// Builds a caption by locating each phrase (first occurrence, searched
    /// left to right after the previous phrase).
    pub fn from_phrases(text: impl Into<String>, phrases: &[&str]) -> Result<Self> {
        let text = text.into();
        let mut spans = Vec::with_capacity(phrases.len());
        let mut from = 0;
        for (object, phrase) in phrases.iter().enumerate() {
            let byte = text[from..]
                .find(phrase)
                .map(|b| b + from)
                .ok_or_else(|| Error::InvalidCaption(format!("phrase {phrase:?} not found")))?;
            let start = text[..byte].chars().count();
            let end = start + phrase.chars().count();
            from = byte + phrase.len();
            spans.push(Span { object, start, end });
        }
        Ok(GroundedCaption { text, spans })
    }

    pub fn phrase(&self, span: &Span) -> String {
        self.text.chars().skip(span.start).take(span.end - span.start).collect()
    }

    /// Spans in bounds, non-empty, pairwise disjoint, one per object index.
    pub fn validate(&self) -> Result<()> {
        let len = self.text.chars().count();
        let mut sorted = self.spans.clone();
        sorted.sort_by_key(|s| s.start);
        for s in &sorted {
            if s.start >= s.end || s.end > len {
                return Err(Error::InvalidCaption(format!(
                    "span {}..{} for object {} outside text of length {len}",
                    s.start, s.end, s.object
                )));
            }
        }
        for w in sorted.windows(2) {
            if w[1].start < w[0].end {
                return Err(Error::InvalidCaption(format!(
                    "spans for objects {} and {} overlap",
                    w[0].object, w[1].object
                )));
            }
        }
        let mut objects: Vec<usize> = self.spans.iter().map(|s| s.object).collect();
        objects.sort_unstable();
        if objects.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::InvalidCaption("duplicate span object index".into()));
        }
        Ok(())
    }
}

/// A token with its character extent in the source text.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Token {
    pub id: u32,
    pub start: usize,
    pub end: usize,
}

pub trait TextTokenizer: Send + Sync {
    /// Content tokens in text order; the end-of-text token is appended by
    /// [`tokenize_with_grounding`].
    fn tokenize(&self, text: &str) -> Vec<Token>;
    fn eot_id(&self) -> u32;
}

/// Deterministic word-piece tokenizer: lowercase alphanumeric runs, split
/// into pieces of at most `max_piece` characters, hashed into the vocabulary.
#[derive(Debug, Clone, Copy)]
pub struct ToyTokenizer {
    pub max_piece: usize,
    pub vocab_size: u32,
}

impl Default for ToyTokenizer {
    fn default() -> Self {
        ToyTokenizer {
            max_piece: 6,
            vocab_size: 8192,
        }
    }
}

pub(crate) fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325u64, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

impl TextTokenizer for ToyTokenizer {
    fn tokenize(&self, text: &str) -> Vec<Token> {
        let chars: Vec<char> = text.chars().collect();
        let mut tokens = Vec::new();
        let mut i = 0;
        while i < chars.len() {
            if !chars[i].is_alphanumeric() {
                i += 1;
                continue;
            }
            let start = i;
            while i < chars.len() && chars[i].is_alphanumeric() {
                i += 1;
            }
            let mut p = start;
            while p < i {
                let end = (p + self.max_piece).min(i);
                let piece: String = chars[p..end].iter().flat_map(|c| c.to_lowercase()).collect();
                let id = (fnv1a(piece.as_bytes()) % self.vocab_size as u64) as u32;
                tokens.push(Token { id, start: p, end });
                p = end;
            }
        }
        tokens
    }

    fn eot_id(&self) -> u32 {
        self.vocab_size
    }
}

/// Token-level view of a grounded caption.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedCaption {
    pub token_ids: Vec<u32>,
    /// `(object, token range)` for each grounded span, sorted by object.
    pub span_token_ranges: Vec<(usize, Range<usize>)>,
    pub eot_positions: Vec<usize>,
}

impl TokenizedCaption {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    pub fn span_for(&self, object: usize) -> Option<Range<usize>> {
        self.span_token_ranges
            .iter()
            .find(|(o, _)| *o == object)
            .map(|(_, r)| r.clone())
    }
}

/// Tokenizes the caption and maps every character span to the tokens it
/// touches. A span that cuts through a token is widened to the whole token.
pub fn tokenize_with_grounding(
    caption: &GroundedCaption,
    tokenizer: &dyn TextTokenizer,
) -> Result<TokenizedCaption> {
    caption.validate()?;
    let tokens = tokenizer.tokenize(&caption.text);
    let mut span_token_ranges = Vec::with_capacity(caption.spans.len());
    for span in &caption.spans {
        let hit: Vec<usize> = tokens
            .iter()
            .enumerate()
            .filter(|(_, t)| t.start < span.end && span.start < t.end)
            .map(|(i, _)| i)
            .collect();
        match (hit.first(), hit.last()) {
            (Some(&a), Some(&b)) => span_token_ranges.push((span.object, a..b + 1)),
            _ => {
                return Err(Error::EmptySpan {
                    object: span.object,
                    start: span.start,
                    end: span.end,
                })
            }
        }
    }
    span_token_ranges.sort_by_key(|(o, _)| *o);
    let mut token_ids: Vec<u32> = tokens.iter().map(|t| t.id).collect();
    let eot = token_ids.len();
    token_ids.push(tokenizer.eot_id());
    Ok(TokenizedCaption {
        token_ids,
        span_token_ranges,
        eot_positions: vec![eot],
    })
}
