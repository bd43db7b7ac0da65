//! Decoding, cross-window aggregation, metrics and the decode-cost bench.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::QAExample;
use crate::encoder::EncoderConfig;
use crate::heads::NULL_ANCHOR;
use crate::jsonl::SCHEMA_VERSION;
use crate::model::{forward_window, Model, ModelError, WindowOutput};
use crate::scalar::Scalar;
use crate::tokenizer::tokenize;
use crate::windowing::{Window, CLS_SLOT};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Strategy {
    ParagraphFirst,
    SpanFirst,
}

impl std::str::FromStr for Strategy {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "paragraph-first" => Ok(Strategy::ParagraphFirst),
            "span-first" => Ok(Strategy::SpanFirst),
            other => Err(format!("unknown strategy {other:?}")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeOptions {
    pub max_span_len: usize,
    pub null_threshold: Option<f64>,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self { max_span_len: 30, null_threshold: None }
    }
}

/// Decoding result for one window. Token positions are window-local,
/// `sa_span` is already in global characters.
#[derive(Clone, Debug, PartialEq)]
pub struct WindowPrediction {
    pub example_id: String,
    pub ordinal: usize,
    pub la_paragraph: Option<usize>,
    pub sa_tokens: Option<(usize, usize)>,
    pub sa_span: Option<(usize, usize)>,
    pub paragraph_logit: Option<f64>,
    pub span_score: Option<f64>,
    pub null_score: f64,
    pub candidates_evaluated: usize,
}

impl WindowPrediction {
    fn null(window: &Window, null_score: f64, candidates_evaluated: usize) -> Self {
        Self {
            example_id: window.example_id.clone(),
            ordinal: window.ordinal,
            la_paragraph: None,
            sa_tokens: None,
            sa_span: None,
            paragraph_logit: None,
            span_score: None,
            null_score,
            candidates_evaluated,
        }
    }

    pub fn is_null(&self) -> bool {
        self.la_paragraph.is_none() && self.sa_span.is_none()
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub paragraph: Option<f64>,
    pub span: Option<f64>,
    pub null: Option<f64>,
}

/// Document-level prediction; serialized as one predictions line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    #[serde(rename = "id")]
    pub example_id: String,
    #[serde(rename = "la")]
    pub la_paragraph: Option<usize>,
    #[serde(rename = "sa")]
    pub sa_span: Option<(usize, usize)>,
    pub scores: Scores,
    pub candidates_evaluated: usize,
}

/// Best `(start, end)` pair with `start <= end`, `end - start < max_len`,
/// both positions unmasked and inside `[lo, hi)`. Scans in `(start, end)`
/// order and keeps the first maximum.
fn best_pair<S: Scalar>(
    out: &WindowOutput<S>,
    lo: usize,
    hi: usize,
    max_len: usize,
) -> (Option<(usize, usize, f64)>, usize) {
    let mut best: Option<(usize, usize, f64)> = None;
    let mut count = 0;
    for s in lo..hi {
        if !out.span_mask[s] {
            continue;
        }
        let ss = out.start_logits[s].as_f64();
        for e in s..hi.min(s + max_len) {
            if !out.span_mask[e] {
                continue;
            }
            count += 1;
            let score = ss + out.end_logits[e].as_f64();
            if best.is_none_or(|(_, _, b)| score > b) {
                best = Some((s, e, score));
            }
        }
    }
    (best, count)
}

/// Picks the paragraph slot, then the best span inside that paragraph.
pub fn decode_paragraph_first<S: Scalar>(window: &Window, out: &WindowOutput<S>, opts: &DecodeOptions) -> WindowPrediction {
    let para = &out.paragraph;
    let cls = para.logits[CLS_SLOT].as_f64();
    let slot = match opts.null_threshold {
        None => para.argmax(),
        Some(t) => {
            let best = (1..para.logits.len())
                .filter(|&k| para.mask[k])
                .fold(None::<usize>, |b, k| match b {
                    Some(j) if para.logits[j] >= para.logits[k] => Some(j),
                    _ => Some(k),
                });
            best.filter(|&k| para.logits[k].as_f64() - cls > t).unwrap_or(CLS_SLOT)
        }
    };
    if slot == CLS_SLOT {
        return WindowPrediction::null(window, cls, 0);
    }
    let cand = &window.candidates[slot - 1];
    let (best, count) = best_pair(out, cand.content_start, cand.content_end, opts.max_span_len);
    let mut pred = WindowPrediction::null(window, cls, count);
    pred.la_paragraph = Some(cand.paragraph_id);
    pred.paragraph_logit = Some(para.logits[slot].as_f64());
    if let Some((s, e, score)) = best {
        pred.sa_tokens = Some((s, e));
        pred.sa_span = Some(window.char_span(s, e));
        pred.span_score = Some(score);
    }
    pred
}

/// Picks the best span over the whole slice, then the paragraph holding it.
///
/// A span that is not inside one candidate paragraph keeps its SA with a
/// NULL LA.
pub fn decode_span_first<S: Scalar>(window: &Window, out: &WindowOutput<S>, opts: &DecodeOptions) -> WindowPrediction {
    let null = (out.start_logits[NULL_ANCHOR] + out.end_logits[NULL_ANCHOR]).as_f64();
    let lo = window.doc_offset();
    let (best, count) = best_pair(out, lo, lo + window.slice_len(), opts.max_span_len);
    let margin = opts.null_threshold.unwrap_or(0.0);
    let Some((s, e, score)) = best.filter(|&(_, _, score)| {
        if opts.null_threshold.is_some() {
            score - null > margin
        } else {
            score >= null
        }
    }) else {
        return WindowPrediction::null(window, null, count);
    };
    let mut pred = WindowPrediction::null(window, null, count);
    pred.sa_tokens = Some((s, e));
    pred.sa_span = Some(window.char_span(s, e));
    pred.span_score = Some(score);
    let (cs, ce) = (window.candidate_containing(s), window.candidate_containing(e));
    if let (Some(k), true) = (cs, cs == ce) {
        pred.la_paragraph = Some(window.candidates[k].paragraph_id);
        pred.paragraph_logit = Some(out.paragraph.logits[k + 1].as_f64());
    }
    pred
}

pub fn decode_window<S: Scalar>(
    window: &Window,
    out: &WindowOutput<S>,
    strategy: Strategy,
    opts: &DecodeOptions,
) -> WindowPrediction {
    match strategy {
        Strategy::ParagraphFirst => decode_paragraph_first(window, out, opts),
        Strategy::SpanFirst => decode_span_first(window, out, opts),
    }
}

/// Joins one example's window predictions. The non-NULL window with the
/// highest paragraph logit (paragraph-first) or span score (span-first)
/// wins; ties go to the lowest ordinal, so input order never matters.
pub fn aggregate(example_id: &str, windows: &[WindowPrediction], strategy: Strategy) -> Prediction {
    let mut sorted: Vec<&WindowPrediction> = windows.iter().collect();
    sorted.sort_by_key(|w| w.ordinal);
    let key = |w: &WindowPrediction| match strategy {
        Strategy::ParagraphFirst => w.paragraph_logit.or(w.span_score),
        Strategy::SpanFirst => w.span_score.or(w.paragraph_logit),
    };
    let mut winner: Option<&WindowPrediction> = None;
    for w in sorted.iter().copied().filter(|w| !w.is_null()) {
        let k = key(w).unwrap_or(f64::NEG_INFINITY);
        if winner.is_none_or(|b| k > key(b).unwrap_or(f64::NEG_INFINITY)) {
            winner = Some(w);
        }
    }
    let candidates_evaluated = windows.iter().map(|w| w.candidates_evaluated).sum();
    let null = sorted.iter().map(|w| w.null_score).fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))));
    match winner {
        Some(w) => Prediction {
            example_id: example_id.to_string(),
            la_paragraph: w.la_paragraph,
            sa_span: w.sa_span,
            scores: Scores { paragraph: w.paragraph_logit, span: w.span_score, null: Some(w.null_score) },
            candidates_evaluated,
        },
        None => Prediction {
            example_id: example_id.to_string(),
            la_paragraph: None,
            sa_span: None,
            scores: Scores { paragraph: None, span: None, null },
            candidates_evaluated,
        },
    }
}

/// Forward pass for every window in parallel.
pub fn window_outputs<S: Scalar>(
    model: &Model<S>,
    cfg: &EncoderConfig,
    windows: &[Window],
) -> Result<Vec<WindowOutput<S>>, ModelError> {
    windows.par_iter().map(|w| forward_window(model, cfg, w, w.candidates.len())).collect()
}

/// Decodes every window and aggregates per example, sorted by id.
pub fn predict<S: Scalar>(
    model: &Model<S>,
    cfg: &EncoderConfig,
    windows: &[Window],
    strategy: Strategy,
    opts: &DecodeOptions,
) -> Result<Vec<Prediction>, ModelError> {
    let outputs = window_outputs(model, cfg, windows)?;
    Ok(predict_from_outputs(windows, &outputs, strategy, opts))
}

pub fn predict_from_outputs<S: Scalar>(
    windows: &[Window],
    outputs: &[WindowOutput<S>],
    strategy: Strategy,
    opts: &DecodeOptions,
) -> Vec<Prediction> {
    let mut grouped: BTreeMap<&str, Vec<WindowPrediction>> = BTreeMap::new();
    for (w, out) in windows.iter().zip(outputs) {
        grouped.entry(&w.example_id).or_default().push(decode_window(w, out, strategy, opts));
    }
    grouped.into_iter().map(|(id, preds)| aggregate(id, &preds, strategy)).collect()
}

#[derive(Debug, Error, PartialEq)]
pub enum ScoreError {
    #[error("prediction ids do not match gold ids: {0}")]
    IdMismatch(String),
    #[error("duplicate id {0}")]
    Duplicate(String),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ratio(num: f64, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num / den as f64
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct HaMetrics {
    pub examples: usize,
    pub la: Prf,
    pub sa: Prf,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub version: u32,
    pub examples: usize,
    pub la: Prf,
    pub sa: Prf,
    pub ha: HaMetrics,
    /// Fraction of examples whose predicted LA equals the gold LA, with
    /// NULL matching NULL.
    pub la_accuracy: f64,
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<6} {:>9} {:>9} {:>9} {:>7} {:>7} {:>7}", "metric", "precision", "recall", "f1", "tp", "fp", "fn");
        for (name, m) in [("LA", &self.la), ("SA", &self.sa), ("HA-LA", &self.ha.la), ("HA-SA", &self.ha.sa)] {
            let _ = writeln!(
                s,
                "{:<6} {:>9.4} {:>9.4} {:>9.4} {:>7} {:>7} {:>7}",
                name, m.precision, m.recall, m.f1, m.tp, m.fp, m.fn_
            );
        }
        let _ = writeln!(s, "examples {}  ha-examples {}  la-accuracy {:.4}", self.examples, self.ha.examples, self.la_accuracy);
        s
    }
}

/// Indices of document tokens overlapping the character range.
fn token_set(spans: &[(usize, usize)], range: Option<(usize, usize)>) -> Option<BTreeSet<usize>> {
    let (s, e) = range?;
    Some(spans.iter().enumerate().filter(|(_, &(a, b))| a < e && b > s).map(|(i, _)| i).collect())
}

#[derive(Default)]
struct Acc {
    la: Prf,
    la_pred: usize,
    la_gold: usize,
    sa_p_sum: f64,
    sa_r_sum: f64,
    sa_pred: usize,
    sa_gold: usize,
    sa: Prf,
}

impl Acc {
    fn add(&mut self, pred: &Prediction, gold_la: Option<usize>, pred_sa: Option<BTreeSet<usize>>, gold_sa: Option<BTreeSet<usize>>) {
        let hit = pred.la_paragraph.is_some() && pred.la_paragraph == gold_la;
        self.la_pred += pred.la_paragraph.is_some() as usize;
        self.la_gold += gold_la.is_some() as usize;
        if hit {
            self.la.tp += 1;
        } else {
            self.la.fp += pred.la_paragraph.is_some() as usize;
            self.la.fn_ += gold_la.is_some() as usize;
        }

        let empty = BTreeSet::new();
        let overlap = match (&pred_sa, &gold_sa) {
            (Some(p), Some(g)) => p.intersection(g).count(),
            _ => 0,
        };
        if let Some(p) = &pred_sa {
            self.sa_pred += 1;
            self.sa_p_sum += if p.is_empty() { 0.0 } else { overlap as f64 / p.len() as f64 };
        }
        if let Some(g) = &gold_sa {
            self.sa_gold += 1;
            self.sa_r_sum += if g.is_empty() { 0.0 } else { overlap as f64 / g.len() as f64 };
        }
        self.sa.tp += overlap;
        self.sa.fp += pred_sa.as_ref().unwrap_or(&empty).len() - overlap;
        self.sa.fn_ += gold_sa.as_ref().unwrap_or(&empty).len() - overlap;
    }

    fn finish(mut self) -> (Prf, Prf) {
        self.la.precision = ratio(self.la.tp as f64, self.la_pred);
        self.la.recall = ratio(self.la.tp as f64, self.la_gold);
        self.la.f1 = f1(self.la.precision, self.la.recall);
        self.sa.precision = ratio(self.sa_p_sum, self.sa_pred);
        self.sa.recall = ratio(self.sa_r_sum, self.sa_gold);
        self.sa.f1 = f1(self.sa.precision, self.sa.recall);
        (self.la, self.sa)
    }
}

/// LA exact-match and SA token-overlap metrics; HA restricts both to
/// examples whose gold has an answer.
pub fn score(predictions: &[Prediction], examples: &[QAExample]) -> Result<MetricsReport, ScoreError> {
    let mut golds: HashMap<&str, &QAExample> = HashMap::new();
    for ex in examples {
        if golds.insert(&ex.id, ex).is_some() {
            return Err(ScoreError::Duplicate(ex.id.clone()));
        }
    }
    let mut preds: BTreeMap<&str, &Prediction> = BTreeMap::new();
    for p in predictions {
        if preds.insert(&p.example_id, p).is_some() {
            return Err(ScoreError::Duplicate(p.example_id.clone()));
        }
    }
    if let Some(id) = preds.keys().find(|id| !golds.contains_key(*id)) {
        return Err(ScoreError::IdMismatch(format!("{id} has no gold")));
    }
    if let Some(id) = golds.keys().find(|id| !preds.contains_key(*id)) {
        return Err(ScoreError::IdMismatch(format!("{id} has no prediction")));
    }

    let (mut all, mut ha) = (Acc::default(), Acc::default());
    let mut ha_examples = 0;
    let mut la_correct = 0;
    for (id, pred) in &preds {
        let ex = golds[id];
        let gold = ex.gold.clone().unwrap_or_default();
        let spans: Vec<(usize, usize)> = tokenize(&ex.document_text).into_iter().map(|(_, c)| (c.start, c.end)).collect();
        let pred_sa = token_set(&spans, pred.sa_span);
        let gold_sa = token_set(&spans, gold.sa_span);
        la_correct += (pred.la_paragraph == gold.la_paragraph) as usize;
        if ex.has_answer() {
            ha_examples += 1;
            ha.add(pred, gold.la_paragraph, pred_sa.clone(), gold_sa.clone());
        }
        all.add(pred, gold.la_paragraph, pred_sa, gold_sa);
    }
    let (la, sa) = all.finish();
    let (ha_la, ha_sa) = ha.finish();
    Ok(MetricsReport {
        version: SCHEMA_VERSION,
        examples: preds.len(),
        la,
        sa,
        ha: HaMetrics { examples: ha_examples, la: ha_la, sa: ha_sa },
        la_accuracy: ratio(la_correct as f64, preds.len()),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub version: u32,
    pub windows: usize,
    pub paragraph_first_candidates: usize,
    pub span_first_candidates: usize,
    /// span-first over paragraph-first candidate counts; absent when the
    /// paragraph-first count is zero.
    pub ratio: Option<f64>,
    pub paragraph_first_secs: f64,
    pub span_first_secs: f64,
}

/// Decodes every window both ways and compares span-candidate counts.
pub fn bench_decode<S: Scalar>(windows: &[Window], outputs: &[WindowOutput<S>], opts: &DecodeOptions) -> BenchReport {
    let run = |strategy| {
        let t = Instant::now();
        let n: usize = windows
            .iter()
            .zip(outputs)
            .map(|(w, o)| decode_window(w, o, strategy, opts).candidates_evaluated)
            .sum();
        (n, t.elapsed().as_secs_f64())
    };
    let (pf, pf_secs) = run(Strategy::ParagraphFirst);
    let (sf, sf_secs) = run(Strategy::SpanFirst);
    BenchReport {
        version: SCHEMA_VERSION,
        windows: windows.len(),
        paragraph_first_candidates: pf,
        span_first_candidates: sf,
        ratio: (pf > 0).then(|| sf as f64 / pf as f64),
        paragraph_first_secs: pf_secs,
        span_first_secs: sf_secs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{GoldAnnotation, Paragraph, ParagraphKind};
    use crate::heads::ParagraphDistribution;
    use crate::scalar::masked_softmax;
    use crate::tokenizer::CharSpan;
    use crate::windowing::{Candidate, Labels};

    /// Window with `[CLS] q [SEP]` and paragraphs of the given content
    /// lengths, each preceded by its markup token. Character spans are
    /// two characters per token.
    fn layout(para_lens: &[usize]) -> Window {
        let mut token_ids = vec![1, 50, 2];
        let mut markup_positions = vec![];
        let mut candidates = vec![];
        let mut doc_char_spans = vec![];
        let mut c = 0;
        for (pid, &len) in para_lens.iter().enumerate() {
            markup_positions.push(token_ids.len());
            doc_char_spans.push(CharSpan::new(c, c));
            token_ids.push(4 + pid as u32);
            let start = token_ids.len();
            for _ in 0..len {
                token_ids.push(60);
                doc_char_spans.push(CharSpan::new(c, c + 1));
                c += 2;
            }
            candidates.push(Candidate {
                markup_pos: start - 1,
                paragraph_id: pid,
                content_start: start,
                content_end: token_ids.len(),
            });
        }
        let n = token_ids.len();
        Window {
            example_id: "e".into(),
            ordinal: 0,
            token_ids,
            question_len: 1,
            doc_span: (0, n - 3),
            doc_char_spans,
            markup_positions,
            candidates,
            labels: Labels::null(),
            example_has_answer: false,
        }
    }

    fn outputs(window: &Window, para: Vec<f64>, start: Vec<f64>, end: Vec<f64>) -> WindowOutput<f64> {
        let mask = vec![true; para.len()];
        let span_mask = window.span_mask();
        let mut start = start;
        let mut end = end;
        for t in 0..span_mask.len() {
            if !span_mask[t] {
                start[t] = f64::NEG_INFINITY;
                end[t] = f64::NEG_INFINITY;
            }
        }
        let probs = masked_softmax(&para, &mask);
        WindowOutput { paragraph: ParagraphDistribution { logits: para, mask, probs }, start_logits: start, end_logits: end, span_mask }
    }

    #[test]
    fn cls_wins_gives_null() {
        let w = layout(&[3, 3]);
        let n = w.seq_len();
        let out = outputs(&w, vec![5.0, 1.0, 2.0], vec![0.0; n], vec![0.0; n]);
        let p = decode_paragraph_first(&w, &out, &DecodeOptions::default());
        assert!(p.is_null());
        assert_eq!(p.candidates_evaluated, 0);
    }

    #[test]
    fn three_token_paragraph_has_six_candidates() {
        let w = layout(&[3]);
        let n = w.seq_len();
        let out = outputs(&w, vec![0.0, 1.0], vec![0.0; n], vec![0.0; n]);
        let opts = DecodeOptions { max_span_len: 3, null_threshold: None };
        let p = decode_paragraph_first(&w, &out, &opts);
        assert_eq!(p.candidates_evaluated, 6);
        assert_eq!(p.la_paragraph, Some(0));
        // Single paragraph: span-first sees the same positions.
        assert_eq!(decode_span_first(&w, &out, &opts).candidates_evaluated, 6);
    }

    #[test]
    fn max_span_len_limits_pairs() {
        let w = layout(&[5]);
        let n = w.seq_len();
        let out = outputs(&w, vec![0.0, 1.0], vec![0.0; n], vec![0.0; n]);
        let opts = DecodeOptions { max_span_len: 2, null_threshold: None };
        // 5 singletons + 4 adjacent pairs
        assert_eq!(decode_paragraph_first(&w, &out, &opts).candidates_evaluated, 9);
    }

    #[test]
    fn span_first_maps_paragraph() {
        let w = layout(&[3, 3, 3]);
        let n = w.seq_len();
        let mut start = vec![0.0; n];
        let mut end = vec![0.0; n];
        let c = &w.candidates[2];
        start[c.content_start] = 4.0;
        end[c.content_start + 1] = 4.0;
        let out = outputs(&w, vec![0.0, 0.0, 0.0, 0.0], start, end);
        let p = decode_span_first(&w, &out, &DecodeOptions::default());
        assert_eq!(p.la_paragraph, Some(2));
        assert_eq!(p.sa_tokens, Some((c.content_start, c.content_start + 1)));
        assert_eq!(p.sa_span, Some((12, 15)));
    }

    #[test]
    fn span_first_null_anchor_wins() {
        let w = layout(&[3, 3]);
        let n = w.seq_len();
        let mut start = vec![0.0; n];
        let mut end = vec![0.0; n];
        start[0] = 3.0;
        end[0] = 3.0;
        let out = outputs(&w, vec![0.0, 0.0, 0.0], start, end);
        let p = decode_span_first(&w, &out, &DecodeOptions::default());
        assert!(p.is_null());
        assert_eq!(p.null_score, 6.0);
    }

    #[test]
    fn span_across_paragraphs_keeps_sa_only() {
        let w = layout(&[2, 2]);
        let n = w.seq_len();
        let mut start = vec![0.0; n];
        let mut end = vec![0.0; n];
        start[w.candidates[0].content_start] = 5.0;
        end[w.candidates[1].content_start] = 5.0;
        let out = outputs(&w, vec![0.0, 0.0, 0.0], start, end);
        let p = decode_span_first(&w, &out, &DecodeOptions::default());
        assert_eq!(p.la_paragraph, None);
        assert!(p.sa_span.is_some());
    }

    #[test]
    fn null_threshold_suppresses_weak_answers() {
        let w = layout(&[3]);
        let n = w.seq_len();
        let out = outputs(&w, vec![0.0, 0.5], vec![0.0; n], vec![0.0; n]);
        let off = DecodeOptions::default();
        assert!(!decode_paragraph_first(&w, &out, &off).is_null());
        let on = DecodeOptions { null_threshold: Some(1.0), ..off };
        assert!(decode_paragraph_first(&w, &out, &on).is_null());
    }

    fn wp(ordinal: usize, la: Option<usize>, logit: f64, span: (usize, usize)) -> WindowPrediction {
        WindowPrediction {
            example_id: "e".into(),
            ordinal,
            la_paragraph: la,
            sa_tokens: la.map(|_| (0, 0)),
            sa_span: la.map(|_| span),
            paragraph_logit: la.map(|_| logit),
            span_score: la.map(|_| logit),
            null_score: -1.0,
            candidates_evaluated: 3,
        }
    }

    #[test]
    fn aggregation_rules() {
        let single = aggregate("e", &[wp(0, Some(1), 2.0, (4, 8))], Strategy::ParagraphFirst);
        assert_eq!((single.la_paragraph, single.sa_span), (Some(1), Some((4, 8))));

        let mixed = aggregate("e", &[wp(0, None, 0.0, (0, 0)), wp(1, Some(2), -3.0, (10, 12))], Strategy::ParagraphFirst);
        assert_eq!(mixed.la_paragraph, Some(2));
        assert_eq!(mixed.candidates_evaluated, 6);

        let none = aggregate("e", &[wp(0, None, 0.0, (0, 0)), wp(1, None, 0.0, (0, 0))], Strategy::SpanFirst);
        assert_eq!((none.la_paragraph, none.sa_span), (None, None));
    }

    #[test]
    fn overlapping_windows_map_to_same_global_span() {
        // A doc of two paragraphs seen by two windows with different slices.
        let marked_chars: Vec<CharSpan> =
            vec![CharSpan::new(0, 0), CharSpan::new(0, 3), CharSpan::new(4, 7), CharSpan::new(8, 8), CharSpan::new(8, 11), CharSpan::new(12, 15)];
        let mk = |ordinal: usize, from: usize| {
            let to = marked_chars.len();
            let mut token_ids = vec![1, 50, 2];
            let mut markup_positions = vec![];
            for g in from..to {
                let is_markup = g == 0 || g == 3;
                if is_markup {
                    markup_positions.push(token_ids.len());
                }
                token_ids.push(if is_markup { 4 } else { 60 });
            }
            let local = |g: usize| g - from + 3;
            let mut candidates = vec![];
            if from == 0 {
                candidates.push(Candidate { markup_pos: local(0), paragraph_id: 0, content_start: local(1), content_end: local(3) });
            }
            candidates.push(Candidate { markup_pos: local(3), paragraph_id: 1, content_start: local(4), content_end: local(6) });
            Window {
                example_id: "e".into(),
                ordinal,
                token_ids,
                question_len: 1,
                doc_span: (from, to),
                doc_char_spans: marked_chars[from..].to_vec(),
                markup_positions,
                candidates,
                labels: Labels::null(),
                example_has_answer: true,
            }
        };
        let (a, b) = (mk(0, 0), mk(1, 2));
        let decode = |w: &Window, logit: f64| {
            let n = w.seq_len();
            let c = w.candidates.last().unwrap();
            let mut start = vec![0.0; n];
            let mut end = vec![0.0; n];
            start[c.content_start] = 2.0;
            end[c.content_start + 1] = 2.0;
            let mut para = vec![f64::NEG_INFINITY; w.candidates.len() + 1];
            para[0] = -10.0;
            for p in para.iter_mut().skip(1) {
                *p = -5.0;
            }
            *para.last_mut().unwrap() = logit;
            let out = outputs(w, para, start, end);
            decode_paragraph_first(w, &out, &DecodeOptions::default())
        };
        let pa = decode(&a, 1.0);
        let pb = decode(&b, 3.0);
        assert_eq!(pa.sa_span, Some((8, 15)));
        assert_eq!(pa.sa_span, pb.sa_span);
        let agg = aggregate("e", &[pa.clone(), pb.clone()], Strategy::ParagraphFirst);
        assert_eq!(agg.scores.paragraph, Some(3.0));
        assert_eq!(agg, aggregate("e", &[pb, pa], Strategy::ParagraphFirst));
    }

    fn example(id: &str, la: Option<usize>, sa: Option<(usize, usize)>) -> QAExample {
        // tokens: a(0,1) b(2,3) c(4,5) d(7,8) e(9,10) f(11,12)
        QAExample {
            id: id.into(),
            question: "q".into(),
            document_text: "a b c\n\nd e f".into(),
            paragraphs: vec![
                Paragraph { id: 0, char_start: 0, char_end: 5, kind: ParagraphKind::Paragraph },
                Paragraph { id: 1, char_start: 7, char_end: 12, kind: ParagraphKind::Paragraph },
            ],
            gold: Some(GoldAnnotation { la_paragraph: la, sa_span: sa }),
        }
    }

    fn pred(id: &str, la: Option<usize>, sa: Option<(usize, usize)>) -> Prediction {
        Prediction { example_id: id.into(), la_paragraph: la, sa_span: sa, scores: Scores::default(), candidates_evaluated: 0 }
    }

    #[test]
    fn perfect_predictions_score_one() {
        let ex = vec![example("1", Some(0), Some((0, 3))), example("2", None, None)];
        let preds = vec![pred("1", Some(0), Some((0, 3))), pred("2", None, None)];
        let m = score(&preds, &ex).unwrap();
        for prf in [m.la, m.sa, m.ha.la, m.ha.sa] {
            assert_eq!((prf.precision, prf.recall, prf.f1), (1.0, 1.0, 1.0));
        }
        assert_eq!(m.la_accuracy, 1.0);
    }

    #[test]
    fn all_null_predictions() {
        let ex = vec![example("1", Some(0), Some((0, 3))), example("2", None, None)];
        let preds = vec![pred("1", None, None), pred("2", None, None)];
        let m = score(&preds, &ex).unwrap();
        assert_eq!((m.la.precision, m.la.recall, m.la.f1), (0.0, 0.0, 0.0));
        assert_eq!((m.sa.precision, m.sa.recall), (0.0, 0.0));
        assert_eq!(m.la.fn_, 1);
    }

    #[test]
    fn hand_computed_four_examples() {
        let ex = vec![
            example("1", Some(0), Some((0, 3))),  // a b
            example("2", Some(1), Some((7, 10))), // d e
            example("3", None, None),
            example("4", Some(0), Some((4, 5))), // c
        ];
        let preds = vec![
            pred("1", Some(0), Some((0, 3))),
            pred("2", Some(1), Some((9, 12))), // e f: one of two overlaps
            pred("3", Some(1), Some((11, 12))),
            pred("4", None, None),
        ];
        let m = score(&preds, &ex).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        // LA: tp 2, fp 1, fn 1
        assert_eq!((m.la.tp, m.la.fp, m.la.fn_), (2, 1, 1));
        assert!(close(m.la.precision, 2.0 / 3.0) && close(m.la.recall, 2.0 / 3.0) && close(m.la.f1, 2.0 / 3.0));
        // SA: precision (1 + .5 + 0)/3, recall (1 + .5 + 0)/3
        assert!(close(m.sa.precision, 0.5) && close(m.sa.recall, 0.5) && close(m.sa.f1, 0.5));
        assert_eq!((m.sa.tp, m.sa.fp, m.sa.fn_), (3, 2, 2));
        // HA over 1, 2, 4
        assert_eq!(m.ha.examples, 3);
        assert!(close(m.ha.la.precision, 1.0) && close(m.ha.la.recall, 2.0 / 3.0) && close(m.ha.la.f1, 0.8));
        assert!(close(m.ha.sa.precision, 0.75) && close(m.ha.sa.recall, 0.5) && close(m.ha.sa.f1, 0.6));
        assert!(close(m.la_accuracy, 0.5));

        let mut shuffled = preds.clone();
        shuffled.reverse();
        assert_eq!(score(&shuffled, &ex).unwrap(), m);
        assert!(m.to_table().contains("HA-SA"));
    }

    #[test]
    fn id_mismatch_is_an_error() {
        let ex = vec![example("1", None, None)];
        assert!(matches!(score(&[pred("2", None, None)], &ex), Err(ScoreError::IdMismatch(_))));
        assert!(matches!(score(&[], &ex), Err(ScoreError::IdMismatch(_))));
        let dup = vec![pred("1", None, None), pred("1", None, None)];
        assert!(matches!(score(&dup, &ex), Err(ScoreError::Duplicate(_))));
    }

    #[test]
    fn bench_counts() {
        let empty: Vec<WindowOutput<f64>> = vec![];
        let r = bench_decode(&[], &empty, &DecodeOptions::default());
        assert_eq!((r.paragraph_first_candidates, r.span_first_candidates, r.ratio), (0, 0, None));

        let w = layout(&[4]);
        let n = w.seq_len();
        let out = outputs(&w, vec![0.0, 1.0], vec![0.0; n], vec![0.0; n]);
        let r = bench_decode(std::slice::from_ref(&w), &[out], &DecodeOptions::default());
        assert_eq!(r.ratio, Some(1.0));

        let w = layout(&[6; 8]);
        let n = w.seq_len();
        let out = outputs(&w, vec![0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0], vec![0.0; n], vec![0.0; n]);
        let r = bench_decode(std::slice::from_ref(&w), &[out], &DecodeOptions::default());
        assert_eq!(r.paragraph_first_candidates, 21);
        assert!(r.ratio.unwrap() >= 4.0);
    }
}
