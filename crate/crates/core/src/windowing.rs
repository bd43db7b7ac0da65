//! Sliding-window slicing of marked documents.
//!
//! Window layout: `[CLS] question [SEP] doc-slice [PAD]...`, always exactly
//! `seq_len` ids. Slices start at multiples of the stride and the last one
//! ends at the document end.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::{GoldAnnotation, QAExample};
use crate::tokenizer::{self, CharSpan, MarkedSequence, TokenizerError, Vocab, CLS, PAD, SEP};

/// Paragraph slot reserved for "no paragraph answer in this window".
pub const CLS_SLOT: usize = 0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WindowConfig {
    pub seq_len: usize,
    pub doc_stride: usize,
    pub has_answer_keep_rate: f64,
    pub no_answer_keep_rate: f64,
    pub seed: u64,
}

impl Default for WindowConfig {
    fn default() -> Self {
        Self { seq_len: 4096, doc_stride: 2048, has_answer_keep_rate: 0.02, no_answer_keep_rate: 0.08, seed: 0 }
    }
}

#[derive(Debug, Error)]
pub enum WindowError {
    #[error("invalid window config: {0}")]
    Config(String),
    #[error("question of {question_len} tokens does not fit in windows of {seq_len}")]
    QuestionTooLong { question_len: usize, seq_len: usize },
    #[error(transparent)]
    Tokenizer(#[from] TokenizerError),
}

impl WindowConfig {
    pub fn validate(&self) -> Result<(), WindowError> {
        let bad = |m: &str| Err(WindowError::Config(m.to_string()));
        if self.doc_stride == 0 || self.doc_stride > self.seq_len {
            return bad("doc_stride must satisfy 0 < doc_stride <= seq_len");
        }
        for r in [self.has_answer_keep_rate, self.no_answer_keep_rate] {
            if !(0.0..=1.0).contains(&r) {
                return bad("keep rates must lie in [0, 1]");
            }
        }
        if self.seq_len < 3 {
            return bad("seq_len must be at least 3");
        }
        Ok(())
    }

    /// Document tokens that fit next to a question of `question_len` tokens.
    pub fn doc_capacity(&self, question_len: usize) -> Result<usize, WindowError> {
        if self.seq_len < question_len + 3 {
            return Err(WindowError::QuestionTooLong { question_len, seq_len: self.seq_len });
        }
        Ok(self.seq_len - question_len - 2)
    }
}

/// A paragraph whose markup and at least one content token lie in the slice.
/// All positions are window-local.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Candidate {
    pub markup_pos: usize,
    pub paragraph_id: usize,
    /// Content token range `[content_start, content_end)`, clipped to the slice.
    pub content_start: usize,
    pub content_end: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels {
    pub y_start: Option<usize>,
    pub y_end: Option<usize>,
    /// `CLS_SLOT` or `1 + index into Window::candidates`.
    pub la_slot: usize,
}

impl Labels {
    pub fn null() -> Self {
        Self { y_start: None, y_end: None, la_slot: CLS_SLOT }
    }

    pub fn span(&self) -> Option<(usize, usize)> {
        self.y_start.zip(self.y_end)
    }

    pub fn is_positive(&self) -> bool {
        self.la_slot != CLS_SLOT
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub example_id: String,
    pub ordinal: usize,
    pub token_ids: Vec<u32>,
    pub question_len: usize,
    /// Global `[start, end)` of the slice within the marked sequence.
    pub doc_span: (usize, usize),
    /// Character spans of the slice tokens (one per slice token).
    pub doc_char_spans: Vec<CharSpan>,
    /// Window-local positions of every markup token in the slice.
    pub markup_positions: Vec<usize>,
    pub candidates: Vec<Candidate>,
    pub labels: Labels,
    pub example_has_answer: bool,
}

impl Window {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// First window position of the document slice.
    pub fn doc_offset(&self) -> usize {
        self.question_len + 2
    }

    pub fn slice_len(&self) -> usize {
        self.doc_span.1 - self.doc_span.0
    }

    pub fn local_to_global(&self, pos: usize) -> usize {
        pos - self.doc_offset() + self.doc_span.0
    }

    pub fn global_to_local(&self, pos: usize) -> Option<usize> {
        (self.doc_span.0..self.doc_span.1).contains(&pos).then(|| pos - self.doc_span.0 + self.doc_offset())
    }

    /// `(local markup position, paragraph id)` for each candidate.
    pub fn local_paragraph_index(&self) -> Vec<(usize, usize)> {
        self.candidates.iter().map(|c| (c.markup_pos, c.paragraph_id)).collect()
    }

    pub fn attention_mask(&self) -> Vec<bool> {
        self.token_ids.iter().map(|&t| t != PAD).collect()
    }

    /// CLS, question tokens and every markup token.
    pub fn global_mask(&self) -> Vec<bool> {
        let mut g = vec![false; self.seq_len()];
        for flag in g.iter_mut().take(self.question_len + 1) {
            *flag = true;
        }
        for &p in &self.markup_positions {
            g[p] = true;
        }
        g
    }

    /// Positions a span boundary may take: the CLS null anchor plus every
    /// non-markup document token.
    pub fn span_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.seq_len()];
        m[0] = true;
        let off = self.doc_offset();
        for flag in &mut m[off..off + self.slice_len()] {
            *flag = true;
        }
        for &p in &self.markup_positions {
            m[p] = false;
        }
        m
    }

    /// Global character span of the local token range `[start, end]`.
    pub fn char_span(&self, start: usize, end: usize) -> (usize, usize) {
        let off = self.doc_offset();
        (self.doc_char_spans[start - off].start, self.doc_char_spans[end - off].end)
    }

    /// Candidate index whose content range contains local position `pos`.
    pub fn candidate_containing(&self, pos: usize) -> Option<usize> {
        self.candidates.iter().position(|c| (c.content_start..c.content_end).contains(&pos))
    }
}

/// Slices `marked` into windows. Labels are left null; see [`map_gold`].
///
/// If the stride exceeds the per-window document capacity it is reduced to
/// the capacity so that every token stays covered.
pub fn make_windows(
    example_id: &str,
    marked: &MarkedSequence,
    question_ids: &[u32],
    cfg: &WindowConfig,
) -> Result<Vec<Window>, WindowError> {
    cfg.validate()?;
    let q = question_ids.len();
    let cap = cfg.doc_capacity(q)?;
    let stride = cfg.doc_stride.min(cap);
    let n = marked.len();
    let off = q + 2;

    let mut windows = Vec::new();
    let mut start = 0;
    loop {
        let end = (start + cap).min(n);
        let mut token_ids = Vec::with_capacity(cfg.seq_len);
        token_ids.push(CLS);
        token_ids.extend_from_slice(question_ids);
        token_ids.push(SEP);
        token_ids.extend_from_slice(&marked.token_ids[start..end]);
        token_ids.resize(cfg.seq_len, PAD);

        let mut markup_positions = Vec::new();
        let mut candidates = Vec::new();
        for (k, &(pos, pid)) in marked.paragraph_index.iter().enumerate() {
            if pos < start || pos >= end {
                continue;
            }
            markup_positions.push(pos - start + off);
            let (cs, ce) = marked.paragraph_tokens(k);
            let ce = ce.min(end);
            if cs < ce {
                candidates.push(Candidate {
                    markup_pos: pos - start + off,
                    paragraph_id: pid,
                    content_start: cs - start + off,
                    content_end: ce - start + off,
                });
            }
        }

        windows.push(Window {
            example_id: example_id.to_string(),
            ordinal: windows.len(),
            token_ids,
            question_len: q,
            doc_span: (start, end),
            doc_char_spans: marked.char_spans[start..end].to_vec(),
            markup_positions,
            candidates,
            labels: Labels::null(),
            example_has_answer: false,
        });
        if end >= n {
            break;
        }
        start += stride;
    }
    Ok(windows)
}

/// Smallest token range (inclusive) of the gold paragraph covering `[s, e)`.
fn covering_tokens(marked: &MarkedSequence, slot: usize, s: usize, e: usize) -> Option<(usize, usize)> {
    let (cs, ce) = marked.paragraph_tokens(slot);
    let overlapping: Vec<usize> =
        (cs..ce).filter(|&t| marked.char_spans[t].start < e && marked.char_spans[t].end > s).collect();
    Some((*overlapping.first()?, *overlapping.last()?))
}

/// Converts a document-level gold annotation into window-local labels.
///
/// A short answer only labels a window when its whole token span is inside
/// the slice; otherwise the window is a negative.
pub fn map_gold(window: &Window, gold: &GoldAnnotation, marked: &MarkedSequence) -> Labels {
    let Some(la) = gold.la_paragraph else {
        return Labels::null();
    };
    let Some(cand) = window.candidates.iter().position(|c| c.paragraph_id == la) else {
        return Labels::null();
    };
    let la_slot = cand + 1;
    let Some((s, e)) = gold.sa_span else {
        return Labels { y_start: None, y_end: None, la_slot };
    };
    let Some(slot) = marked.paragraph_index.iter().position(|&(_, pid)| pid == la) else {
        return Labels::null();
    };
    let Some((gs, ge)) = covering_tokens(marked, slot, s, e) else {
        return Labels { y_start: None, y_end: None, la_slot };
    };
    match (window.global_to_local(gs), window.global_to_local(ge)) {
        (Some(ls), Some(le)) => Labels { y_start: Some(ls), y_end: Some(le), la_slot },
        _ => Labels::null(),
    }
}

/// Marks, slices and labels one example.
pub fn windows_for_example(
    example: &QAExample,
    vocab: &Vocab,
    cfg: &WindowConfig,
) -> Result<Vec<Window>, WindowError> {
    let marked = tokenizer::insert_markup(example, vocab)?;
    let (question_ids, _) = tokenizer::encode(&example.question, vocab);
    let mut windows = make_windows(&example.id, &marked, &question_ids, cfg)?;
    let has_answer = example.has_answer();
    for w in &mut windows {
        w.example_has_answer = has_answer;
        if let Some(gold) = &example.gold {
            w.labels = map_gold(w, gold, &marked);
        }
    }
    Ok(windows)
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3))
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e37_79b9_7f4a_7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^ (x >> 31)
}

/// Per-window RNG seed; independent of processing order.
pub fn window_seed(seed: u64, example_id: &str, ordinal: usize) -> u64 {
    splitmix(splitmix(seed ^ fnv1a(example_id.as_bytes())) ^ ordinal as u64)
}

/// Whether a negative window survives subsampling.
pub fn keep_window(window: &Window, cfg: &WindowConfig) -> bool {
    if window.labels.is_positive() {
        return true;
    }
    let p = if window.example_has_answer { cfg.has_answer_keep_rate } else { cfg.no_answer_keep_rate };
    let mut rng = ChaCha8Rng::seed_from_u64(window_seed(cfg.seed, &window.example_id, window.ordinal));
    rng.gen::<f64>() < p
}

/// Keeps every positive window and a seeded random fraction of negatives.
pub fn subsample_negatives(windows: Vec<Window>, cfg: &WindowConfig) -> Vec<Window> {
    windows.into_iter().filter(|w| keep_window(w, cfg)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{impute_paragraphs, GoldAnnotation};
    use crate::tokenizer::build_vocab;

    fn marked_of(n_paragraphs: usize, len: usize) -> MarkedSequence {
        // Synthetic marked sequence: markup every `len + 1` tokens.
        let mut seq = MarkedSequence { token_ids: vec![], char_spans: vec![], paragraph_index: vec![] };
        let mut c = 0;
        for p in 0..n_paragraphs {
            seq.paragraph_index.push((seq.token_ids.len(), p));
            seq.token_ids.push(4 + p as u32);
            seq.char_spans.push(CharSpan::new(c, c));
            for _ in 0..len {
                seq.token_ids.push(100);
                seq.char_spans.push(CharSpan::new(c, c + 1));
                c += 2;
            }
        }
        seq
    }

    fn cfg(seq_len: usize, stride: usize) -> WindowConfig {
        WindowConfig { seq_len, doc_stride: stride, has_answer_keep_rate: 1.0, no_answer_keep_rate: 1.0, seed: 7 }
    }

    #[test]
    fn windows_at_stride_offsets() {
        // 10 tokens, question of 2 -> capacity 6 with seq_len 10.
        let marked = marked_of(2, 4);
        assert_eq!(marked.len(), 10);
        let ws = make_windows("d", &marked, &[50, 51], &cfg(10, 3)).unwrap();
        let spans: Vec<_> = ws.iter().map(|w| w.doc_span).collect();
        // Coverage oracle: offsets 0,3,6 and the last covers token 9.
        assert_eq!(spans, vec![(0, 6), (3, 9), (6, 10)]);
        assert!(ws.iter().all(|w| w.token_ids.len() == 10));
        assert_eq!(ws[2].token_ids[0..4], [CLS, 50, 51, SEP]);
        assert_eq!(ws[2].token_ids[8..], [PAD, PAD]);
    }

    #[test]
    fn short_doc_single_window_and_defaults() {
        let marked = marked_of(1, 3);
        assert_eq!(make_windows("d", &marked, &[9], &cfg(16, 8)).unwrap().len(), 1);
        let defaults = WindowConfig::default();
        assert_eq!((defaults.seq_len, defaults.doc_stride), (4096, 2048));
        assert_eq!((defaults.has_answer_keep_rate, defaults.no_answer_keep_rate), (0.02, 0.08));
        assert!(defaults.validate().is_ok());
    }

    #[test]
    fn config_and_question_errors() {
        assert!(cfg(10, 0).validate().is_err());
        assert!(cfg(10, 11).validate().is_err());
        let mut c = cfg(10, 5);
        c.no_answer_keep_rate = 1.5;
        assert!(c.validate().is_err());
        let marked = marked_of(1, 3);
        assert!(matches!(
            make_windows("d", &marked, &[1; 8], &cfg(10, 5)),
            Err(WindowError::QuestionTooLong { question_len: 8, seq_len: 10 })
        ));
    }

    #[test]
    fn trailing_markup_is_not_a_candidate() {
        // Paragraph 1's markup sits at global position 5, the last slot of the first slice.
        let marked = marked_of(2, 4);
        let ws = make_windows("d", &marked, &[50, 51], &cfg(8, 2)).unwrap();
        assert_eq!(ws[0].doc_span, (0, 4));
        let ws = make_windows("d", &marked, &[50], &cfg(8, 5)).unwrap();
        assert_eq!(ws[0].doc_span, (0, 5));
        assert_eq!(ws[0].markup_positions, vec![3]);
        let marked2 = marked_of(2, 3);
        let ws = make_windows("d", &marked2, &[50], &cfg(8, 5)).unwrap();
        assert_eq!(ws[0].doc_span, (0, 5));
        // Markup of paragraph 1 at global 4 is in the slice but has no content there.
        assert_eq!(ws[0].markup_positions, vec![3, 7]);
        assert_eq!(ws[0].local_paragraph_index(), vec![(3, 0)]);
    }

    fn example(text: &str, gold: GoldAnnotation) -> QAExample {
        QAExample {
            id: "ex".into(),
            question: "what".into(),
            document_text: text.into(),
            paragraphs: impute_paragraphs(text),
            gold: Some(gold),
        }
    }

    #[test]
    fn map_gold_offsets() {
        // chars: "aa bb\n\ncc dd ee"   paragraph 1 = [7, 15)
        let text = "aa bb\n\ncc dd ee";
        let gold = GoldAnnotation { la_paragraph: Some(1), sa_span: Some((10, 15)) };
        let ex = example(text, gold.clone());
        let vocab = build_vocab(&[ex.clone()], 50, 4).unwrap();
        let c = cfg(32, 16);
        let ws = windows_for_example(&ex, &vocab, &c).unwrap();
        assert_eq!(ws.len(), 1);
        // Marked: [m0 aa bb m1 cc dd ee]; "dd ee" = global tokens 5..=6.
        // Offset arithmetic oracle: local = global + question_len(1) + 2.
        assert_eq!(ws[0].labels, Labels { y_start: Some(8), y_end: Some(9), la_slot: 2 });
        assert_eq!(ws[0].char_span(8, 9), (10, 15));

        // Partially covered tokens still map to the covering token range.
        let ex2 = example(text, GoldAnnotation { la_paragraph: Some(1), sa_span: Some((11, 14)) });
        let ws = windows_for_example(&ex2, &vocab, &c).unwrap();
        assert_eq!(ws[0].labels.span(), Some((8, 9)));
    }

    #[test]
    fn map_gold_outside_slice_and_null() {
        let text = "aa bb cc\n\ndd ee ff";
        let gold = GoldAnnotation { la_paragraph: Some(0), sa_span: Some((0, 2)) };
        let ex = example(text, gold);
        let vocab = build_vocab(&[ex.clone()], 50, 4).unwrap();
        // q=1 -> capacity 3; marked len 8, stride 3 -> slices [0,3) [3,6) [6,8)
        let c = cfg(6, 3);
        let ws = windows_for_example(&ex, &vocab, &c).unwrap();
        assert_eq!(ws.len(), 3);
        assert_eq!(ws[0].labels, Labels { y_start: Some(4), y_end: Some(4), la_slot: 1 });
        assert_eq!(ws[1].labels, Labels::null());
        assert_eq!(ws[2].labels, Labels::null());

        let null = example(text, GoldAnnotation::null());
        for w in windows_for_example(&null, &vocab, &c).unwrap() {
            assert_eq!(w.labels, Labels::null());
        }

        let la_only = example(text, GoldAnnotation { la_paragraph: Some(1), sa_span: None });
        let ws = windows_for_example(&la_only, &vocab, &c).unwrap();
        assert_eq!(ws[1].labels, Labels { y_start: None, y_end: None, la_slot: 1 });
    }

    #[test]
    fn span_partially_visible_is_negative() {
        let text = "aa bb cc dd";
        // marked [m0 aa bb cc dd]; q=1, cap 4 -> slices [0,4) [1,5)
        let c = cfg(7, 1);
        let partial = example(text, GoldAnnotation { la_paragraph: Some(0), sa_span: Some((6, 11)) });
        let vocab = build_vocab(&[partial.clone()], 50, 4).unwrap();
        let ws = windows_for_example(&partial, &vocab, &c).unwrap();
        assert_eq!(ws.len(), 2);
        assert!(ws.iter().all(|w| w.labels == Labels::null()));

        let full = example(text, GoldAnnotation { la_paragraph: Some(0), sa_span: Some((3, 8)) });
        let ws = windows_for_example(&full, &vocab, &c).unwrap();
        assert_eq!(ws[0].labels, Labels { y_start: Some(5), y_end: Some(6), la_slot: 1 });
        assert_eq!(ws[1].labels, Labels::null());
    }

    #[test]
    fn subsampling_identity_and_drop() {
        let text = "aa bb cc\n\ndd ee ff";
        let ex = example(text, GoldAnnotation { la_paragraph: Some(0), sa_span: Some((0, 2)) });
        let vocab = build_vocab(&[ex.clone()], 50, 4).unwrap();
        let mut c = cfg(6, 3);
        let ws = windows_for_example(&ex, &vocab, &c).unwrap();
        assert_eq!(subsample_negatives(ws.clone(), &c), ws);
        c.has_answer_keep_rate = 0.0;
        c.no_answer_keep_rate = 0.0;
        let kept = subsample_negatives(ws.clone(), &c);
        assert_eq!(kept.len(), 1);
        assert!(kept[0].labels.is_positive());
    }

    #[test]
    fn subsampling_binomial_rate() {
        let template = {
            let marked = marked_of(1, 2);
            let mut w = make_windows("doc", &marked, &[9], &cfg(8, 4)).unwrap().remove(0);
            w.example_has_answer = true;
            w
        };
        let c = WindowConfig { seq_len: 8, doc_stride: 4, has_answer_keep_rate: 0.02, no_answer_keep_rate: 0.08, seed: 11 };
        let n = 10_000;
        let windows: Vec<Window> =
            (0..n).map(|i| Window { ordinal: i, ..template.clone() }).collect();
        let kept = subsample_negatives(windows, &c).len() as f64;
        let (mean, sd) = (n as f64 * 0.02, (n as f64 * 0.02 * 0.98).sqrt());
        assert!((kept - mean).abs() <= 3.0 * sd, "kept {kept}");
    }
}
