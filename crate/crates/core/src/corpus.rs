//! Question-answering example ingestion.
//!
//! Examples arrive as line-delimited JSON. Documents without explicit
//! paragraph boundaries get them imputed from blank-line separators, and
//! every example is checked against the structural invariants below before
//! it is handed to the rest of the pipeline.

use std::fmt;
use std::fs::File;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Markup family a paragraph belongs to in the source document.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParagraphKind {
    #[default]
    Paragraph,
    List,
    Table,
}

/// A paragraph as a half-open character range into the document text.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Paragraph {
    pub id: usize,
    pub char_start: usize,
    pub char_end: usize,
    pub kind: ParagraphKind,
}

impl Paragraph {
    pub fn contains(&self, start: usize, end: usize) -> bool {
        self.char_start <= start && end <= self.char_end
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct GoldAnnotation {
    /// Long answer: the id of the answering paragraph.
    pub la_paragraph: Option<usize>,
    /// Short answer: half-open character span inside the long answer.
    pub sa_span: Option<(usize, usize)>,
}

impl GoldAnnotation {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn has_answer(&self) -> bool {
        self.la_paragraph.is_some() || self.sa_span.is_some()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QAExample {
    pub id: String,
    pub question: String,
    pub document_text: String,
    pub paragraphs: Vec<Paragraph>,
    pub gold: Option<GoldAnnotation>,
}

impl QAExample {
    /// Document length in characters (all offsets are character offsets).
    pub fn char_len(&self) -> usize {
        self.document_text.chars().count()
    }

    pub fn has_answer(&self) -> bool {
        self.gold.as_ref().is_some_and(GoldAnnotation::has_answer)
    }

    /// Text of one character range of the document.
    pub fn slice_chars(&self, start: usize, end: usize) -> String {
        self.document_text.chars().skip(start).take(end.saturating_sub(start)).collect()
    }
}

/// Machine-readable invariant violation codes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Violation {
    EmptyQuestion,
    ParagraphEmpty,
    ParagraphOutOfBounds,
    ParagraphOverlap,
    ParagraphUnsorted,
    ParagraphIdNotConsecutive,
    LaOutOfRange,
    SaWithoutLa,
    SaEmpty,
    SaOutsideLa,
}

impl Violation {
    pub fn code(&self) -> &'static str {
        match self {
            Violation::EmptyQuestion => "EMPTY_QUESTION",
            Violation::ParagraphEmpty => "PARAGRAPH_EMPTY",
            Violation::ParagraphOutOfBounds => "PARAGRAPH_OUT_OF_BOUNDS",
            Violation::ParagraphOverlap => "PARAGRAPH_OVERLAP",
            Violation::ParagraphUnsorted => "PARAGRAPH_UNSORTED",
            Violation::ParagraphIdNotConsecutive => "PARAGRAPH_ID_NOT_CONSECUTIVE",
            Violation::LaOutOfRange => "LA_OUT_OF_RANGE",
            Violation::SaWithoutLa => "SA_WITHOUT_LA",
            Violation::SaEmpty => "SA_EMPTY",
            Violation::SaOutsideLa => "SA_OUTSIDE_LA",
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.code())
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("line {line}: malformed example: {message}")]
    Malformed { line: usize, message: String },
    #[error("example {id:?} is invalid: {}", join_codes(.violations))]
    Invalid { id: String, violations: Vec<Violation> },
}

fn join_codes(v: &[Violation]) -> String {
    v.iter().map(Violation::code).collect::<Vec<_>>().join(", ")
}

/// Splits plaintext into paragraphs at blank-line separators.
///
/// A separator is a maximal run of newline, space, tab and carriage-return
/// characters that contains at least two newlines. Segments between
/// separators that are entirely whitespace are dropped.
pub fn impute_paragraphs(text: &str) -> Vec<Paragraph> {
    let chars: Vec<char> = text.chars().collect();
    let is_blank = |c: char| matches!(c, '\n' | ' ' | '\t' | '\r');

    let mut separators = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        if is_blank(chars[i]) {
            let start = i;
            let mut newlines = 0;
            while i < chars.len() && is_blank(chars[i]) {
                if chars[i] == '\n' {
                    newlines += 1;
                }
                i += 1;
            }
            if newlines >= 2 {
                separators.push((start, i));
            }
        } else {
            i += 1;
        }
    }

    let mut paragraphs = Vec::new();
    let mut seg_start = 0;
    let bounds = separators.iter().copied().chain(std::iter::once((chars.len(), chars.len())));
    for (sep_start, sep_end) in bounds {
        if seg_start < sep_start && chars[seg_start..sep_start].iter().any(|&c| !c.is_whitespace()) {
            paragraphs.push(Paragraph {
                id: paragraphs.len(),
                char_start: seg_start,
                char_end: sep_start,
                kind: ParagraphKind::Paragraph,
            });
        }
        seg_start = sep_end;
    }
    paragraphs
}

/// Returns every violated invariant, or `Ok` for a well-formed example.
pub fn validate_example(example: &QAExample) -> Result<(), Vec<Violation>> {
    let mut violations = Vec::new();
    let mut push = |v: Violation| {
        if !violations.contains(&v) {
            violations.push(v);
        }
    };

    if example.question.trim().is_empty() {
        push(Violation::EmptyQuestion);
    }

    let len = example.char_len();
    for (i, p) in example.paragraphs.iter().enumerate() {
        if p.id != i {
            push(Violation::ParagraphIdNotConsecutive);
        }
        if p.char_start >= p.char_end {
            push(Violation::ParagraphEmpty);
        }
        if p.char_end > len {
            push(Violation::ParagraphOutOfBounds);
        }
    }
    for pair in example.paragraphs.windows(2) {
        let (prev, next) = (&pair[0], &pair[1]);
        if next.char_start < prev.char_start {
            push(Violation::ParagraphUnsorted);
        } else if next.char_start < prev.char_end {
            push(Violation::ParagraphOverlap);
        }
    }

    if let Some(gold) = &example.gold {
        let la = match gold.la_paragraph {
            Some(id) => match example.paragraphs.get(id) {
                Some(p) => Some(p),
                None => {
                    push(Violation::LaOutOfRange);
                    None
                }
            },
            None => None,
        };
        if let Some((s, e)) = gold.sa_span {
            if s >= e {
                push(Violation::SaEmpty);
            }
            match (gold.la_paragraph, la) {
                (None, _) => push(Violation::SaWithoutLa),
                (Some(_), Some(p)) if !p.contains(s, e) => push(Violation::SaOutsideLa),
                _ => {}
            }
        }
    }

    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RawParagraph {
    start: usize,
    end: usize,
    #[serde(default)]
    kind: ParagraphKind,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct RawGold {
    #[serde(default)]
    la: Option<usize>,
    #[serde(default)]
    sa: Option<(usize, usize)>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawExample {
    id: String,
    question: String,
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    paragraphs: Option<Vec<RawParagraph>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    gold: Option<RawGold>,
}

impl From<RawExample> for QAExample {
    fn from(raw: RawExample) -> Self {
        let paragraphs = match raw.paragraphs {
            Some(ps) => ps
                .into_iter()
                .enumerate()
                .map(|(id, p)| Paragraph { id, char_start: p.start, char_end: p.end, kind: p.kind })
                .collect(),
            None => impute_paragraphs(&raw.text),
        };
        QAExample {
            id: raw.id,
            question: raw.question,
            document_text: raw.text,
            paragraphs,
            gold: raw.gold.map(|g| GoldAnnotation { la_paragraph: g.la, sa_span: g.sa }),
        }
    }
}

impl From<&QAExample> for RawExample {
    fn from(ex: &QAExample) -> Self {
        RawExample {
            id: ex.id.clone(),
            question: ex.question.clone(),
            text: ex.document_text.clone(),
            paragraphs: Some(
                ex.paragraphs
                    .iter()
                    .map(|p| RawParagraph { start: p.char_start, end: p.char_end, kind: p.kind })
                    .collect(),
            ),
            gold: ex.gold.as_ref().map(|g| RawGold { la: g.la_paragraph, sa: g.sa_span }),
        }
    }
}

/// Parses one JSON line into a validated example.
pub fn parse_example(line: &str, line_no: usize) -> Result<QAExample, CorpusError> {
    let raw: RawExample = serde_json::from_str(line)
        .map_err(|e| CorpusError::Malformed { line: line_no, message: e.to_string() })?;
    let example = QAExample::from(raw);
    validate_example(&example)
        .map_err(|violations| CorpusError::Invalid { id: example.id.clone(), violations })?;
    Ok(example)
}

/// Loads all examples from a line-delimited JSON file, in file order.
///
/// Blank lines are skipped; line numbers in errors are 1-based.
pub fn load_examples(path: impl AsRef<Path>) -> Result<Vec<QAExample>, CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let reader = BufReader::new(File::open(path).map_err(io_err)?);
    let mut examples = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(io_err)?;
        if line.trim().is_empty() {
            continue;
        }
        examples.push(parse_example(&line, idx + 1)?);
    }
    Ok(examples)
}

/// Serializes one example in the input schema (paragraphs always explicit).
pub fn example_to_json(example: &QAExample) -> String {
    serde_json::to_string(&RawExample::from(example)).expect("example serializes")
}

pub fn write_examples(path: impl AsRef<Path>, examples: &[QAExample]) -> Result<(), CorpusError> {
    let path = path.as_ref();
    let io_err = |source| CorpusError::Io { path: path.to_path_buf(), source };
    let mut file = std::io::BufWriter::new(File::create(path).map_err(io_err)?);
    for ex in examples {
        writeln!(file, "{}", example_to_json(ex)).map_err(io_err)?;
    }
    file.flush().map_err(io_err)
}
