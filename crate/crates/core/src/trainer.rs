//! Deterministic mini-batch training.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{ConfigError, TrainConfig};
use crate::corpus::QAExample;
use crate::heads::LossBreakdown;
use crate::inference::{self, DecodeOptions, MetricsReport, ScoreError, Strategy};
use crate::jsonl::SCHEMA_VERSION;
use crate::model::{window_loss_and_grads, Model, ModelError};
use crate::optim::{optimizer_step, AdamState, OptimError};
use crate::params::ParamSet;
use crate::scalar::Scalar;
use crate::tokenizer::Vocab;
use crate::windowing::{self, Window, WindowConfig, WindowError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error(transparent)]
    Window(#[from] WindowError),
    #[error(transparent)]
    Score(#[from] ScoreError),
    #[error("{0}")]
    Callback(String),
}

/// Window indices of one batch and its padded paragraph-slot count.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub capacity: usize,
}

fn epoch_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&(epoch as u64).to_le_bytes());
    key[16..24].copy_from_slice(b"batches!");
    ChaCha8Rng::from_seed(key)
}

/// Shuffles window indices with an `(seed, epoch)` RNG and chunks them.
/// Each batch pads candidate slots to its largest candidate count.
pub fn make_batches(windows: &[Window], batch_size: usize, seed: u64, epoch: usize) -> Vec<Batch> {
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut epoch_rng(seed, epoch));
    order
        .chunks(batch_size.max(1))
        .map(|chunk| Batch {
            indices: chunk.to_vec(),
            capacity: chunk.iter().map(|&i| windows[i].candidates.len()).max().unwrap_or(0),
        })
        .collect()
}

/// Windows for every example, in example order. Training mode
/// subsamples negatives; evaluation keeps everything.
pub fn windowize(
    examples: &[QAExample],
    vocab: &Vocab,
    cfg: &WindowConfig,
    subsample: bool,
) -> Result<Vec<Window>, WindowError> {
    let per_example: Vec<Vec<Window>> = examples
        .par_iter()
        .map(|ex| windowing::windows_for_example(ex, vocab, cfg))
        .collect::<Result<_, _>>()?;
    let all: Vec<Window> = per_example.into_iter().flatten().collect();
    Ok(if subsample { windowing::subsample_negatives(all, cfg) } else { all })
}

/// Held-out examples and their unsubsampled windows.
pub struct DevSet {
    pub examples: Vec<QAExample>,
    pub windows: Vec<Window>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub windows: usize,
    pub loss: LossBreakdown,
    pub dev: Option<MetricsReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub version: u32,
    pub num_params: usize,
    pub epochs: Vec<EpochReport>,
    pub wall_time_secs: f64,
}

pub fn decode_strategy(cfg: &TrainConfig) -> Strategy {
    if cfg.papr_enabled {
        Strategy::ParagraphFirst
    } else {
        Strategy::SpanFirst
    }
}

pub fn decode_options(cfg: &TrainConfig) -> DecodeOptions {
    DecodeOptions { max_span_len: cfg.max_span_len, null_threshold: cfg.null_threshold }
}

pub fn evaluate<S: Scalar>(model: &Model<S>, cfg: &TrainConfig, dev: &DevSet) -> Result<MetricsReport, TrainError> {
    let preds = inference::predict(model, &cfg.encoder, &dev.windows, decode_strategy(cfg), &decode_options(cfg))?;
    Ok(inference::score(&preds, &dev.examples)?)
}

/// Runs one epoch over `windows` and returns the mean per-window loss.
fn run_epoch<S: Scalar>(
    model: &mut Model<S>,
    state: &mut AdamState<S>,
    windows: &[Window],
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown, TrainError> {
    let loss_cfg = cfg.loss();
    let mut epoch_loss = LossBreakdown::default();
    for batch in make_batches(windows, cfg.batch_size, cfg.seed, epoch) {
        let per_window: Vec<(LossBreakdown, Model<S>)> = batch
            .indices
            .par_iter()
            .map(|&i| window_loss_and_grads(model, &cfg.encoder, &loss_cfg, &windows[i], batch.capacity))
            .collect::<Result<_, _>>()?;
        // Serial reduction in batch order keeps the sum bit-reproducible.
        let mut grads = Model::zeros(&cfg.encoder);
        for (loss, g) in &per_window {
            epoch_loss.add(loss);
            grads.add_scaled(g, S::one());
        }
        grads.scale(S::one() / S::lit(per_window.len() as f64));
        optimizer_step(model, &grads, state, cfg.learning_rate)?;
    }
    Ok(epoch_loss.scaled(1.0 / windows.len().max(1) as f64))
}

/// Trains from preprocessed windows. `cfg` must already carry the vocab
/// size and be resolved. `on_epoch` sees the model after every epoch.
pub fn train_windows<S: Scalar>(
    windows: &[Window],
    cfg: &TrainConfig,
    dev: Option<&DevSet>,
    mut on_epoch: impl FnMut(usize, &Model<S>) -> Result<(), TrainError>,
) -> Result<(Model<S>, TrainReport), TrainError> {
    cfg.validate()?;
    let started = Instant::now();
    let mut model = Model::<S>::init(&cfg.encoder)?;
    let mut state = AdamState::new(&model);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let loss = run_epoch(&mut model, &mut state, windows, cfg, epoch)?;
        let dev_metrics = dev.map(|d| evaluate(&model, cfg, d)).transpose()?;
        on_epoch(epoch + 1, &model)?;
        epochs.push(EpochReport { epoch: epoch + 1, windows: windows.len(), loss, dev: dev_metrics });
    }
    let report = TrainReport {
        version: SCHEMA_VERSION,
        num_params: model.num_params(),
        epochs,
        wall_time_secs: started.elapsed().as_secs_f64(),
    };
    Ok((model, report))
}

/// Full pipeline from validated examples: windowize, subsample, train.
pub fn train<S: Scalar>(
    examples: &[QAExample],
    vocab: &Vocab,
    cfg: &TrainConfig,
    dev: Option<&[QAExample]>,
) -> Result<(Model<S>, TrainReport), TrainError> {
    let mut cfg = cfg.clone().resolved();
    cfg.encoder.vocab_size = vocab.len();
    let windows = windowize(examples, vocab, &cfg.window, true)?;
    let dev = dev
        .map(|d| -> Result<DevSet, TrainError> {
            Ok(DevSet { examples: d.to_vec(), windows: windowize(d, vocab, &cfg.window, false)? })
        })
        .transpose()?;
    train_windows(&windows, &cfg, dev.as_ref(), |_, _| Ok(()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::encoder::EncoderConfig;
    use crate::synth::{generate, SynthConfig};
    use crate::tokenizer::build_vocab;
    use crate::windowing::{Candidate, Labels};

    fn bare(n_candidates: usize) -> Window {
        Window {
            example_id: "w".into(),
            ordinal: 0,
            token_ids: vec![1, 2],
            question_len: 0,
            doc_span: (0, 0),
            doc_char_spans: vec![],
            markup_positions: vec![],
            candidates: (0..n_candidates)
                .map(|i| Candidate { markup_pos: 2, paragraph_id: i, content_start: 3, content_end: 4 })
                .collect(),
            labels: Labels::null(),
            example_has_answer: false,
        }
    }

    #[test]
    fn batching() {
        let ws: Vec<Window> = (0..10).map(|i| bare(i % 3)).collect();
        let one = make_batches(&ws, 64, 1, 0);
        assert_eq!(one.len(), 1);
        let mut idx = one[0].indices.clone();
        idx.sort();
        assert_eq!(idx, (0..10).collect::<Vec<_>>());

        assert_eq!(make_batches(&ws, 3, 7, 2), make_batches(&ws, 3, 7, 2));
        assert_ne!(make_batches(&ws, 3, 7, 2), make_batches(&ws, 3, 7, 3));
        assert_eq!(make_batches(&ws, 3, 7, 2).len(), 4);
    }

    #[test]
    fn rectangular_capacity() {
        let ws = vec![bare(1), bare(3)];
        let b = make_batches(&ws, 2, 0, 0);
        assert_eq!(b[0].capacity, 3);
        // Window A: CLS + 1 real candidate + 2 masked slots.
        use crate::heads::{paragraph_logits, ParagraphHead};
        let hidden = crate::tensor::Matrix::<f64>::zeros(4, 2);
        let rows: Vec<usize> = ws[0].candidates.iter().map(|c| c.markup_pos).collect();
        let d = paragraph_logits(&hidden, &rows, &ParagraphHead { w: vec![0.0; 2], b: 0.0 }, b[0].capacity);
        assert_eq!(d.mask, vec![true, true, false, false]);
    }

    fn tiny() -> (Vec<QAExample>, Vocab, TrainConfig) {
        let docs = generate(&SynthConfig { docs: 6, paragraphs: 3, paragraph_len: 4, ..SynthConfig::default() });
        let vocab = build_vocab(&docs, 200, 4).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 2,
            batch_size: 4,
            window: WindowConfig { seq_len: 24, doc_stride: 8, ..WindowConfig::default() },
            encoder: EncoderConfig { d_model: 8, n_layers: 1, n_heads: 2, ffn_dim: 8, local_window: 4, ..EncoderConfig::default() },
            ..TrainConfig::default()
        };
        (docs, vocab, cfg)
    }

    #[test]
    fn zero_lr_keeps_params_and_loss() {
        let (docs, vocab, mut cfg) = tiny();
        cfg.learning_rate = 0.0;
        cfg.epochs = 2;
        let (model, report) = train::<f64>(&docs, &vocab, &cfg, None).unwrap();
        let mut resolved = cfg.clone().resolved();
        resolved.encoder.vocab_size = vocab.len();
        assert_eq!(model, Model::<f64>::init(&resolved.encoder).unwrap());
        assert_eq!(report.epochs[0].loss, report.epochs[1].loss);
    }

    #[test]
    fn epochs_zero_rejected() {
        let (docs, vocab, mut cfg) = tiny();
        cfg.epochs = 0;
        assert!(matches!(train::<f64>(&docs, &vocab, &cfg, None), Err(TrainError::Config(_))));
    }

    #[test]
    fn training_is_bit_reproducible() {
        let (docs, vocab, cfg) = tiny();
        let (a, ra) = train::<f64>(&docs, &vocab, &cfg, Some(&docs)).unwrap();
        let (b, rb) = train::<f64>(&docs, &vocab, &cfg, Some(&docs)).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs, rb.epochs);
        assert_eq!(ra.epochs.len(), cfg.epochs);
        assert!(ra.epochs[0].dev.is_some());
    }

    #[test]
    fn no_gpo_equals_zero_weight() {
        let (docs, vocab, mut cfg) = tiny();
        cfg.epochs = 1;
        cfg.gpo_enabled = false;
        let (a, ra) = train::<f64>(&docs, &vocab, &cfg, None).unwrap();
        cfg.gpo_enabled = true;
        cfg.gpo.kl_weight = 0.0;
        let (b, rb) = train::<f64>(&docs, &vocab, &cfg, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ra.epochs[0].loss.total, rb.epochs[0].loss.total);
    }
}
