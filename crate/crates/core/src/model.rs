//! Encoder plus heads as one parameter set, with per-window forward and
//! loss/gradient evaluation.

use thiserror::Error;

use crate::encoder::{self, EncoderConfig, EncoderError, EncoderInput, EncoderParams};
use crate::heads::{self, HeadError, HeadParams, LossBreakdown, LossConfig, ParagraphDistribution};
use crate::params::{ParamSet, TensorView};
use crate::scalar::Scalar;
use crate::tensor::Matrix;
use crate::windowing::Window;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Encoder(#[from] EncoderError),
    #[error(transparent)]
    Head(#[from] HeadError),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model<S> {
    pub encoder: EncoderParams<S>,
    pub heads: HeadParams<S>,
}

impl<S: Scalar> Model<S> {
    /// Random encoder, zero heads. Zero heads give every candidate the same
    /// logit at step 0, which keeps the first update symmetric.
    pub fn init(cfg: &EncoderConfig) -> Result<Self, ModelError> {
        Ok(Self { encoder: encoder::init_params(cfg)?, heads: HeadParams::zeros(cfg.d_model) })
    }

    pub fn zeros(cfg: &EncoderConfig) -> Self {
        Self { encoder: EncoderParams::zeros(cfg), heads: HeadParams::zeros(cfg.d_model) }
    }
}

impl<S: Scalar> ParamSet<S> for Model<S> {
    fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let mut out = self.encoder.tensors();
        out.extend(self.heads.tensors());
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out = self.encoder.tensors_mut();
        out.extend(self.heads.tensors_mut());
        out
    }
}

/// Everything decoding needs from one window.
#[derive(Clone, Debug)]
pub struct WindowOutput<S> {
    pub paragraph: ParagraphDistribution<S>,
    pub start_logits: Vec<S>,
    pub end_logits: Vec<S>,
    pub span_mask: Vec<bool>,
}

fn candidate_rows(window: &Window) -> Vec<usize> {
    window.candidates.iter().map(|c| c.markup_pos).collect()
}

/// Forward pass for decoding. `capacity` pads the paragraph slots.
pub fn forward_window<S: Scalar>(
    model: &Model<S>,
    cfg: &EncoderConfig,
    window: &Window,
    capacity: usize,
) -> Result<WindowOutput<S>, ModelError> {
    let am = window.attention_mask();
    let gm = window.global_mask();
    let input = EncoderInput { token_ids: &window.token_ids, attention_mask: &am, global_mask: &gm };
    let (hidden, _) = encoder::encode_forward(input, &model.encoder, cfg)?;
    Ok(outputs(model, window, &hidden, capacity))
}

fn outputs<S: Scalar>(model: &Model<S>, window: &Window, hidden: &Matrix<S>, capacity: usize) -> WindowOutput<S> {
    let paragraph = heads::paragraph_logits(hidden, &candidate_rows(window), &model.heads.paragraph, capacity);
    let span_mask = window.span_mask();
    let (start_logits, end_logits) = heads::span_logits(hidden, &span_mask, &model.heads.span);
    WindowOutput { paragraph, start_logits, end_logits, span_mask }
}

/// Loss of one window only.
pub fn window_loss<S: Scalar>(
    model: &Model<S>,
    cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    window: &Window,
    capacity: usize,
) -> Result<LossBreakdown, ModelError> {
    let out = forward_window(model, cfg, window, capacity)?;
    let (loss, _) =
        heads::total_loss(&window.labels, &out.paragraph, &out.start_logits, &out.end_logits, &out.span_mask, loss_cfg)?;
    Ok(loss)
}

/// Loss and exact gradient with respect to every model parameter.
pub fn window_loss_and_grads<S: Scalar>(
    model: &Model<S>,
    cfg: &EncoderConfig,
    loss_cfg: &LossConfig,
    window: &Window,
    capacity: usize,
) -> Result<(LossBreakdown, Model<S>), ModelError> {
    let am = window.attention_mask();
    let gm = window.global_mask();
    let input = EncoderInput { token_ids: &window.token_ids, attention_mask: &am, global_mask: &gm };
    let (hidden, tape) = encoder::encode_forward(input, &model.encoder, cfg)?;
    let out = outputs(model, window, &hidden, capacity);
    let (loss, g) =
        heads::total_loss(&window.labels, &out.paragraph, &out.start_logits, &out.end_logits, &out.span_mask, loss_cfg)?;

    let mut grad_heads = HeadParams::zeros(cfg.d_model);
    let mut grad_hidden = Matrix::zeros(hidden.rows, hidden.cols);
    heads::paragraph_backward(
        &hidden,
        &candidate_rows(window),
        &model.heads.paragraph,
        &g.paragraph,
        &mut grad_hidden,
        &mut grad_heads.paragraph,
    );
    // Masked logits are -inf; their gradients are exactly zero.
    heads::span_backward(&hidden, &model.heads.span, &g.start, &g.end, &mut grad_hidden, &mut grad_heads.span);
    let grad_encoder = encoder::encode_backward(&tape, &grad_hidden)?;
    Ok((loss, Model { encoder: grad_encoder, heads: grad_heads }))
}
