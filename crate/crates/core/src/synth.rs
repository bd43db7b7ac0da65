//! Cue-token synthetic corpus: fixed-size paragraphs of filler words, one of
//! which holds a cue word followed by a two-word answer.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{GoldAnnotation, Paragraph, ParagraphKind, QAExample};

pub const CUE: &str = "cue";
pub const QUESTION: &str = "what follows the cue ?";
const ANSWER_LEN: usize = 2;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub docs: usize,
    pub paragraphs: usize,
    /// Words per paragraph, cue and answer included.
    pub paragraph_len: usize,
    pub filler_words: usize,
    pub seed: u64,
    pub id_prefix: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { docs: 200, paragraphs: 8, paragraph_len: 6, filler_words: 40, seed: 0, id_prefix: "syn".into() }
    }
}

pub fn generate(cfg: &SynthConfig) -> Vec<QAExample> {
    assert!(cfg.paragraph_len > ANSWER_LEN, "paragraph_len must leave room for the cue");
    assert!(cfg.paragraphs > 0 && cfg.filler_words > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let words: Vec<String> = (0..cfg.filler_words).map(|i| format!("w{i}")).collect();
    (0..cfg.docs).map(|d| one_doc(cfg, &words, &mut rng, format!("{}-{d:05}", cfg.id_prefix))).collect()
}

fn one_doc(cfg: &SynthConfig, words: &[String], rng: &mut ChaCha8Rng, id: String) -> QAExample {
    let answer_para = rng.gen_range(0..cfg.paragraphs);
    let cue_at = rng.gen_range(0..cfg.paragraph_len - ANSWER_LEN);

    let mut text = String::new();
    let mut paragraphs = Vec::with_capacity(cfg.paragraphs);
    let mut sa = None;
    let mut chars = 0;
    for p in 0..cfg.paragraphs {
        if p > 0 {
            text.push_str("\n\n");
            chars += 2;
        }
        let start = chars;
        for k in 0..cfg.paragraph_len {
            if k > 0 {
                text.push(' ');
                chars += 1;
            }
            let w: &str = if p == answer_para && k == cue_at { CUE } else { words.choose(rng).unwrap() };
            if p == answer_para && k == cue_at + 1 {
                sa = Some((chars, 0));
            }
            text.push_str(w);
            chars += w.chars().count();
            if p == answer_para && k == cue_at + ANSWER_LEN {
                sa = sa.map(|(s, _)| (s, chars));
            }
        }
        paragraphs.push(Paragraph { id: p, char_start: start, char_end: chars, kind: ParagraphKind::Paragraph });
    }
    QAExample {
        id,
        question: QUESTION.into(),
        document_text: text,
        paragraphs,
        gold: Some(GoldAnnotation { la_paragraph: Some(answer_para), sa_span: sa }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::validate_example;

    #[test]
    fn documents_are_valid_and_answer_follows_cue() {
        let docs = generate(&SynthConfig { docs: 50, ..SynthConfig::default() });
        assert_eq!(docs.len(), 50);
        for ex in &docs {
            validate_example(ex).unwrap();
            assert_eq!(ex.paragraphs.len(), 8);
            let gold = ex.gold.as_ref().unwrap();
            let (s, e) = gold.sa_span.unwrap();
            let answer = ex.slice_chars(s, e);
            assert_eq!(answer.split(' ').count(), 2);
            let para = &ex.paragraphs[gold.la_paragraph.unwrap()];
            let body = ex.slice_chars(para.char_start, para.char_end);
            assert!(body.contains(&format!("{CUE} {answer}")));
            assert_eq!(ex.document_text.matches(CUE).count(), 1);
        }
    }

    #[test]
    fn seeded() {
        let a = generate(&SynthConfig { docs: 5, seed: 3, ..SynthConfig::default() });
        let b = generate(&SynthConfig { docs: 5, seed: 3, ..SynthConfig::default() });
        let c = generate(&SynthConfig { docs: 5, seed: 4, ..SynthConfig::default() });
        assert_eq!(a, b);
        assert_ne!(a, c);
    }
}
