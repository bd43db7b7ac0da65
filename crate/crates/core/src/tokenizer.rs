//! Whitespace/punctuation tokenizer and paragraph markup insertion.
//!
//! Every paragraph of a document is introduced by an atomic markup token
//! (`[paragraph=i]`, `[list=i]` or `[table=i]`) whose encoder output later
//! serves as that paragraph's classification feature. Markup is only ever
//! produced by [`insert_markup`]; encoding literal text such as
//! `"[paragraph=0]"` yields ordinary punctuation and word tokens.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{ParagraphKind, QAExample};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[CLS]", "[SEP]", "[UNK]"];

pub const DEFAULT_P_MAX: usize = 64;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("vocabulary cap {cap} leaves no room beyond {reserved} reserved and markup tokens")]
    CapTooSmall { cap: usize, reserved: usize },
    #[error("p_max must be at least 1")]
    ZeroPMax,
    #[error("document has {count} paragraphs but the markup vocabulary only covers {p_max}")]
    Capacity { count: usize, p_max: usize },
    #[error("document has no paragraphs")]
    NoParagraphs,
    #[error("token id {0} is not in the vocabulary")]
    UnknownId(u32),
    #[error("vocabulary file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Half-open character range. Markup and special tokens carry empty spans.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CharSpan {
    pub start: usize,
    pub end: usize,
}

impl CharSpan {
    pub fn new(start: usize, end: usize) -> Self {
        Self { start, end }
    }

    pub fn is_empty(&self) -> bool {
        self.start >= self.end
    }
}

/// Splits text into lowercased tokens with character spans.
///
/// A token is a maximal run of alphanumeric characters or a single
/// punctuation/symbol character; whitespace separates tokens.
pub fn tokenize(text: &str) -> Vec<(String, CharSpan)> {
    let mut out = Vec::new();
    let mut word = String::new();
    let mut word_start = 0;
    let mut n = 0;
    for (i, c) in text.chars().enumerate() {
        n = i + 1;
        if c.is_alphanumeric() {
            if word.is_empty() {
                word_start = i;
            }
            word.extend(c.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push((std::mem::take(&mut word), CharSpan::new(word_start, i)));
        }
        if !c.is_whitespace() {
            out.push((c.to_lowercase().collect(), CharSpan::new(i, i + 1)));
        }
    }
    if !word.is_empty() {
        out.push((word, CharSpan::new(word_start, n)));
    }
    out
}

/// Token ↔ id mapping.
///
/// Layout: the four reserved tokens, then `p_max` `[paragraph=i]` tokens,
/// then optionally `p_max` `[list=i]` and `p_max` `[table=i]` tokens (only
/// when the building corpus contains such paragraphs), then corpus tokens by
/// descending frequency.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
    p_max: usize,
    list_base: Option<u32>,
    table_base: Option<u32>,
}

const PARAGRAPH_BASE: u32 = 4;

fn markup_name(kind: ParagraphKind, i: usize) -> String {
    match kind {
        ParagraphKind::Paragraph => format!("[paragraph={i}]"),
        ParagraphKind::List => format!("[list={i}]"),
        ParagraphKind::Table => format!("[table={i}]"),
    }
}

impl Vocab {
    fn from_tokens(tokens: Vec<String>, p_max: usize, list: bool, table: bool) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i as u32)).collect();
        let mut next = PARAGRAPH_BASE + p_max as u32;
        let list_base = list.then(|| {
            let b = next;
            next += p_max as u32;
            b
        });
        let table_base = table.then_some(next);
        Self { tokens, index, p_max, list_base, table_base }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn p_max(&self) -> usize {
        self.p_max
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    /// Number of reserved plus markup ids.
    pub fn special_count(&self) -> usize {
        let families = 1 + usize::from(self.list_base.is_some()) + usize::from(self.table_base.is_some());
        RESERVED.len() + families * self.p_max
    }

    /// Markup id for paragraph `i` of the given kind. Kinds whose family is
    /// absent from the vocabulary fall back to `[paragraph=i]`.
    pub fn markup_id(&self, kind: ParagraphKind, i: usize) -> Option<u32> {
        if i >= self.p_max {
            return None;
        }
        let base = match kind {
            ParagraphKind::Paragraph => PARAGRAPH_BASE,
            ParagraphKind::List => self.list_base.unwrap_or(PARAGRAPH_BASE),
            ParagraphKind::Table => self.table_base.unwrap_or(PARAGRAPH_BASE),
        };
        Some(base + i as u32)
    }

    pub fn is_markup(&self, id: u32) -> bool {
        (PARAGRAPH_BASE..self.special_count() as u32).contains(&id)
    }

    pub fn is_special(&self, id: u32) -> bool {
        (id as usize) < self.special_count()
    }

    /// One token per line; line number is the id.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for t in &self.tokens {
            s.push_str(t);
            s.push('\n');
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self, TokenizerError> {
        let tokens: Vec<String> = text.lines().map(str::to_owned).collect();
        if tokens.len() < RESERVED.len() + 1 || tokens[..4] != RESERVED {
            return Err(TokenizerError::Format("missing reserved tokens".into()));
        }
        let p_max = tokens[4..].iter().take_while(|t| t.starts_with("[paragraph=")).count();
        if p_max == 0 {
            return Err(TokenizerError::Format("missing paragraph markup tokens".into()));
        }
        let mut pos = 4 + p_max;
        let mut family = |prefix: &str| {
            let present = tokens.get(pos).is_some_and(|t| t.starts_with(prefix));
            if present {
                pos += p_max;
            }
            present
        };
        let list = family("[list=");
        let table = family("[table=");
        let vocab = Self::from_tokens(tokens, p_max, list, table);
        for (kind, present) in
            [(ParagraphKind::Paragraph, true), (ParagraphKind::List, list), (ParagraphKind::Table, table)]
        {
            if !present {
                continue;
            }
            for i in 0..p_max {
                let id = vocab.markup_id(kind, i).expect("i < p_max");
                if vocab.token(id) != Some(markup_name(kind, i).as_str()) {
                    return Err(TokenizerError::Format(format!("markup token {i} of {kind:?} out of order")));
                }
            }
        }
        if vocab.index.len() != vocab.tokens.len() {
            return Err(TokenizerError::Format("duplicate tokens".into()));
        }
        Ok(vocab)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), TokenizerError> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, TokenizerError> {
        Self::from_text(&fs::read_to_string(path)?)
    }
}

/// Builds a vocabulary of at most `cap` entries from questions and documents.
///
/// Corpus tokens are ranked by descending count, ties broken
/// lexicographically.
pub fn build_vocab(corpus: &[QAExample], cap: usize, p_max: usize) -> Result<Vocab, TokenizerError> {
    if p_max == 0 {
        return Err(TokenizerError::ZeroPMax);
    }
    let has_kind = |k| corpus.iter().any(|e| e.paragraphs.iter().any(|p| p.kind == k));
    let list = has_kind(ParagraphKind::List);
    let table = has_kind(ParagraphKind::Table);

    let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
    tokens.extend((0..p_max).map(|i| markup_name(ParagraphKind::Paragraph, i)));
    if list {
        tokens.extend((0..p_max).map(|i| markup_name(ParagraphKind::List, i)));
    }
    if table {
        tokens.extend((0..p_max).map(|i| markup_name(ParagraphKind::Table, i)));
    }
    let reserved = tokens.len();
    if cap <= reserved {
        return Err(TokenizerError::CapTooSmall { cap, reserved });
    }

    let mut counts: HashMap<String, usize> = HashMap::new();
    for ex in corpus {
        for text in [&ex.question, &ex.document_text] {
            for (tok, _) in tokenize(text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
    ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    tokens.extend(ranked.into_iter().take(cap - reserved).map(|(t, _)| t));

    Ok(Vocab::from_tokens(tokens, p_max, list, table))
}

/// Maps text to ids (out-of-vocabulary tokens become `[UNK]`) with spans.
pub fn encode(text: &str, vocab: &Vocab) -> (Vec<u32>, Vec<CharSpan>) {
    tokenize(text)
        .into_iter()
        .map(|(tok, span)| {
            let id = vocab.id(&tok).filter(|&id| !vocab.is_special(id)).unwrap_or(UNK);
            (id, span)
        })
        .unzip()
}

/// Renders ids back to text, tokens separated by single spaces.
pub fn decode(token_ids: &[u32], vocab: &Vocab) -> Result<String, TokenizerError> {
    let parts = token_ids
        .iter()
        .map(|&id| vocab.token(id).ok_or(TokenizerError::UnknownId(id)))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(parts.join(" "))
}

/// Document tokens interleaved with paragraph markup.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSequence {
    pub token_ids: Vec<u32>,
    pub char_spans: Vec<CharSpan>,
    /// `(markup token position, paragraph id)` in document order.
    pub paragraph_index: Vec<(usize, usize)>,
}

impl MarkedSequence {
    pub fn len(&self) -> usize {
        self.token_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.token_ids.is_empty()
    }

    /// Content token range `[markup + 1, next markup)` of the k-th paragraph.
    pub fn paragraph_tokens(&self, k: usize) -> (usize, usize) {
        let start = self.paragraph_index[k].0 + 1;
        let end = self.paragraph_index.get(k + 1).map_or(self.len(), |&(p, _)| p);
        (start, end)
    }

    pub fn is_markup_position(&self, pos: usize) -> bool {
        self.paragraph_index.binary_search_by_key(&pos, |&(p, _)| p).is_ok()
    }

    /// Slot in `paragraph_index` whose content range contains `pos`.
    pub fn paragraph_slot_of(&self, pos: usize) -> Option<usize> {
        let k = self.paragraph_index.partition_point(|&(p, _)| p < pos);
        if k == 0 {
            return None;
        }
        let k = k - 1;
        let (s, e) = self.paragraph_tokens(k);
        (s..e).contains(&pos).then_some(k)
    }
}

/// Emits `[markup_0, tokens of paragraph 0, markup_1, ...]`.
pub fn insert_markup(example: &QAExample, vocab: &Vocab) -> Result<MarkedSequence, TokenizerError> {
    if example.paragraphs.is_empty() {
        return Err(TokenizerError::NoParagraphs);
    }
    if example.paragraphs.len() > vocab.p_max() {
        return Err(TokenizerError::Capacity { count: example.paragraphs.len(), p_max: vocab.p_max() });
    }
    let chars: Vec<char> = example.document_text.chars().collect();
    let mut seq = MarkedSequence { token_ids: Vec::new(), char_spans: Vec::new(), paragraph_index: Vec::new() };
    for p in &example.paragraphs {
        let markup = vocab.markup_id(p.kind, p.id).expect("checked against p_max");
        seq.paragraph_index.push((seq.token_ids.len(), p.id));
        seq.token_ids.push(markup);
        seq.char_spans.push(CharSpan::new(p.char_start, p.char_start));
        let end = p.char_end.min(chars.len());
        let text: String = chars[p.char_start.min(end)..end].iter().collect();
        let (ids, spans) = encode(&text, vocab);
        seq.token_ids.extend(ids);
        seq.char_spans
            .extend(spans.into_iter().map(|s| CharSpan::new(s.start + p.char_start, s.end + p.char_start)));
    }
    Ok(seq)
}
