#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use vault_core::corpus::{GoldAnnotation, Paragraph, ParagraphKind, QAExample};
use vault_core::tokenizer::MarkedSequence;
use vault_core::windowing::WindowConfig;

const WORDS: &[&str] = &["alpha", "be", "c", "delta", "echo", "fox", "g", "hotel", "ix", "juno", ",", "."];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn words(rng: &mut ChaCha8Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| WORDS[rng.gen_range(0..WORDS.len())]).collect()
}

/// A random document of 1..=max_paragraphs paragraphs with a random gold:
/// null, LA only, or LA plus a short answer that may cut words.
pub fn random_example(rng: &mut ChaCha8Rng, id: &str, max_paragraphs: usize) -> QAExample {
    let n_par = rng.gen_range(1..=max_paragraphs);
    let mut text = String::new();
    let mut paragraphs = Vec::new();
    // Per paragraph: (char start, char end) of every word.
    let mut word_spans: Vec<Vec<(usize, usize)>> = Vec::new();
    let mut chars = 0;
    for p in 0..n_par {
        if p > 0 {
            text.push_str("\n\n");
            chars += 2;
        }
        let start = chars;
        let mut spans = Vec::new();
        let n_words = rng.gen_range(1..=10);
        for (k, w) in words(rng, n_words).into_iter().enumerate() {
            if k > 0 {
                text.push(' ');
                chars += 1;
            }
            spans.push((chars, chars + w.len()));
            text.push_str(w);
            chars += w.len();
        }
        paragraphs.push(Paragraph { id: p, char_start: start, char_end: chars, kind: ParagraphKind::Paragraph });
        word_spans.push(spans);
    }

    let roll: f64 = rng.gen();
    let gold = if roll < 0.2 {
        GoldAnnotation { la_paragraph: None, sa_span: None }
    } else {
        let la = rng.gen_range(0..n_par);
        if roll < 0.35 {
            GoldAnnotation { la_paragraph: Some(la), sa_span: None }
        } else {
            let spans = &word_spans[la];
            let i = rng.gen_range(0..spans.len());
            let j = rng.gen_range(i..spans.len().min(i + 4));
            let (mut s, mut e) = (spans[i].0, spans[j].1);
            // Sometimes cut into the first or last word.
            if spans[i].1 - spans[i].0 > 1 && rng.gen_bool(0.3) {
                s += 1;
            }
            if e - s > 1 && spans[j].1 - spans[j].0 > 1 && rng.gen_bool(0.3) {
                e -= 1;
            }
            GoldAnnotation { la_paragraph: Some(la), sa_span: Some((s, e)) }
        }
    };
    let n_words = rng.gen_range(1..=5);
    let question = words(rng, n_words).join(" ");
    QAExample { id: id.to_string(), question, document_text: text, paragraphs, gold: Some(gold) }
}

/// Window config that always fits the question with room for a few tokens.
pub fn random_window_config(rng: &mut ChaCha8Rng, question_len: usize, max_seq: usize) -> WindowConfig {
    let min_seq = question_len + 4;
    let seq_len = rng.gen_range(min_seq..=max_seq.max(min_seq));
    let cap = seq_len - question_len - 2;
    WindowConfig {
        seq_len,
        doc_stride: rng.gen_range(1..=cap),
        has_answer_keep_rate: 1.0,
        no_answer_keep_rate: 1.0,
        seed: rng.gen(),
    }
}

/// Independent smallest covering token range of `[s, e)` inside paragraph
/// slot `k`, as global positions of the marked sequence.
pub fn covering(marked: &MarkedSequence, k: usize, s: usize, e: usize) -> Option<(usize, usize)> {
    let (cs, ce) = marked.paragraph_tokens(k);
    let mut hit = (cs..ce).filter(|&t| {
        let c = marked.char_spans[t];
        c.start < e && c.end > s
    });
    let first = hit.next()?;
    let last = hit.last().unwrap_or(first);
    Some((first, last))
}
