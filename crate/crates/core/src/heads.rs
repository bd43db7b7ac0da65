//! Paragraph and span heads, Gaussian-prior soft targets, and the losses.
//!
//! Paragraph logits are `W·h + b` over the CLS row and each candidate's
//! markup row, softmaxed together. Span boundaries are trained with
//! cross-entropy against the gold position plus a weighted KL term pulling
//! the boundary distribution towards a temperature-softmaxed Gaussian
//! density centred on the gold position.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamSet, TensorView};
use crate::scalar::{masked_log_sum_exp, masked_softmax, Scalar};
use crate::tensor::{dot, Matrix};
use crate::windowing::{Labels, CLS_SLOT};

/// Span-head target for windows without a short answer.
pub const NULL_ANCHOR: usize = 0;

#[derive(Debug, Error, PartialEq)]
pub enum HeadError {
    #[error("target position {0} is masked")]
    MaskedTarget(usize),
    #[error("target position {pos} outside sequence of {len}")]
    TargetOutOfRange { pos: usize, len: usize },
    #[error("target distribution inconsistent with mask: {0}")]
    Inconsistent(String),
    #[error("invalid GPO config: {0}")]
    Config(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphHead<S> {
    pub w: Vec<S>,
    pub b: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpanHead<S> {
    pub start_w: Vec<S>,
    pub start_b: S,
    pub end_w: Vec<S>,
    pub end_b: S,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams<S> {
    pub paragraph: ParagraphHead<S>,
    pub span: SpanHead<S>,
}

impl<S: Scalar> HeadParams<S> {
    pub fn zeros(d_model: usize) -> Self {
        Self {
            paragraph: ParagraphHead { w: vec![S::zero(); d_model], b: S::zero() },
            span: SpanHead {
                start_w: vec![S::zero(); d_model],
                start_b: S::zero(),
                end_w: vec![S::zero(); d_model],
                end_b: S::zero(),
            },
        }
    }
}

impl<S: Scalar> ParamSet<S> for HeadParams<S> {
    fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let d = self.paragraph.w.len();
        let t = |name: &str, shape, data| TensorView { name: name.to_string(), shape, data };
        vec![
            t("heads.paragraph.w", (1, d), &self.paragraph.w[..]),
            t("heads.paragraph.b", (1, 1), std::slice::from_ref(&self.paragraph.b)),
            t("heads.span.start_w", (1, d), &self.span.start_w[..]),
            t("heads.span.start_b", (1, 1), std::slice::from_ref(&self.span.start_b)),
            t("heads.span.end_w", (1, d), &self.span.end_w[..]),
            t("heads.span.end_b", (1, 1), std::slice::from_ref(&self.span.end_b)),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        vec![
            &mut self.paragraph.w,
            std::slice::from_mut(&mut self.paragraph.b),
            &mut self.span.start_w,
            std::slice::from_mut(&mut self.span.start_b),
            &mut self.span.end_w,
            std::slice::from_mut(&mut self.span.end_b),
        ]
    }
}

/// CLS slot, then one slot per candidate, then masked padding slots.
#[derive(Clone, Debug, PartialEq)]
pub struct ParagraphDistribution<S> {
    pub logits: Vec<S>,
    pub mask: Vec<bool>,
    pub probs: Vec<S>,
}

impl<S: Scalar> ParagraphDistribution<S> {
    pub fn num_candidates(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count() - 1
    }

    /// Highest-logit unmasked slot; ties go to the lowest slot.
    pub fn argmax(&self) -> usize {
        let mut best = CLS_SLOT;
        for (i, (&l, &m)) in self.logits.iter().zip(&self.mask).enumerate() {
            if m && l > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

/// Scores the CLS row and every candidate markup row with one affine map.
///
/// `capacity` is the number of candidate slots after padding; it is raised
/// to the number of candidates if smaller.
pub fn paragraph_logits<S: Scalar>(
    hidden: &Matrix<S>,
    markup_positions: &[usize],
    head: &ParagraphHead<S>,
    capacity: usize,
) -> ParagraphDistribution<S> {
    let slots = 1 + capacity.max(markup_positions.len());
    let mut logits = vec![S::neg_infinity(); slots];
    let mut mask = vec![false; slots];
    let rows = std::iter::once(0).chain(markup_positions.iter().copied());
    for (slot, row) in rows.enumerate() {
        logits[slot] = dot(&head.w, hidden.row(row)) + head.b;
        mask[slot] = true;
    }
    let probs = masked_softmax(&logits, &mask);
    ParagraphDistribution { logits, mask, probs }
}

/// Accumulates hidden-state and head gradients from paragraph-logit gradients.
pub fn paragraph_backward<S: Scalar>(
    hidden: &Matrix<S>,
    markup_positions: &[usize],
    head: &ParagraphHead<S>,
    dlogits: &[S],
    grad_hidden: &mut Matrix<S>,
    grad_head: &mut ParagraphHead<S>,
) {
    let rows = std::iter::once(0).chain(markup_positions.iter().copied());
    for (slot, row) in rows.enumerate() {
        let g = dlogits[slot];
        if g == S::zero() {
            continue;
        }
        grad_head.b += g;
        for (gw, &h) in grad_head.w.iter_mut().zip(hidden.row(row)) {
            *gw += g * h;
        }
        for (gh, &w) in grad_hidden.row_mut(row).iter_mut().zip(&head.w) {
            *gh += g * w;
        }
    }
}

/// Per-position start and end logits; masked positions are `-inf`.
pub fn span_logits<S: Scalar>(hidden: &Matrix<S>, span_mask: &[bool], head: &SpanHead<S>) -> (Vec<S>, Vec<S>) {
    let score = |w: &[S], b: S| -> Vec<S> {
        (0..hidden.rows)
            .map(|t| if span_mask[t] { dot(w, hidden.row(t)) + b } else { S::neg_infinity() })
            .collect()
    };
    (score(&head.start_w, head.start_b), score(&head.end_w, head.end_b))
}

pub fn span_backward<S: Scalar>(
    hidden: &Matrix<S>,
    head: &SpanHead<S>,
    dstart: &[S],
    dend: &[S],
    grad_hidden: &mut Matrix<S>,
    grad_head: &mut SpanHead<S>,
) {
    for t in 0..hidden.rows {
        let (gs, ge) = (dstart[t], dend[t]);
        if gs == S::zero() && ge == S::zero() {
            continue;
        }
        grad_head.start_b += gs;
        grad_head.end_b += ge;
        let h = hidden.row(t);
        for c in 0..h.len() {
            grad_head.start_w[c] += gs * h[c];
            grad_head.end_w[c] += ge * h[c];
        }
        for (c, gh) in grad_hidden.row_mut(t).iter_mut().enumerate() {
            *gh += gs * head.start_w[c] + ge * head.end_w[c];
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpoConfig {
    pub sigma: f64,
    pub temperature: f64,
    pub kl_weight: f64,
}

impl Default for GpoConfig {
    fn default() -> Self {
        Self { sigma: 1.0, temperature: 1.0, kl_weight: 1.0 }
    }
}

impl GpoConfig {
    pub fn validate(&self) -> Result<(), HeadError> {
        if !(self.sigma > 0.0) || !(self.temperature > 0.0) || !(self.kl_weight >= 0.0) {
            return Err(HeadError::Config("require sigma > 0, temperature > 0, kl_weight >= 0".into()));
        }
        Ok(())
    }
}

/// Soft target distribution over sequence positions for one boundary.
#[derive(Clone, Debug, PartialEq)]
pub struct GpoTarget<S> {
    pub q: Vec<S>,
}

/// Gaussian density of `N(center, sigma)` at `y`.
pub fn gaussian_density<S: Scalar>(y: usize, center: usize, sigma: S) -> S {
    let dist = S::lit(y as f64) - S::lit(center as f64);
    let two_pi = S::lit(std::f64::consts::TAU);
    (-(dist * dist) / (S::lit(2.0) * sigma * sigma)).exp() / (sigma * two_pi.sqrt())
}

/// `q(y) = softmax_y(φ(y | y_s, σ) / T)` over the unmasked positions.
pub fn gpo_target<S: Scalar>(
    len: usize,
    y_s: usize,
    mask: &[bool],
    cfg: &GpoConfig,
) -> Result<GpoTarget<S>, HeadError> {
    cfg.validate()?;
    if y_s >= len || mask.len() != len {
        return Err(HeadError::TargetOutOfRange { pos: y_s, len });
    }
    if !mask[y_s] {
        return Err(HeadError::MaskedTarget(y_s));
    }
    let sigma = S::lit(cfg.sigma);
    let temp = S::lit(cfg.temperature);
    let logits: Vec<S> = (0..len)
        .map(|y| if mask[y] { gaussian_density(y, y_s, sigma) / temp } else { S::neg_infinity() })
        .collect();
    Ok(GpoTarget { q: masked_softmax(&logits, mask) })
}

/// `KL(q ‖ softmax(logits))` and its gradient `p - q` with respect to the logits.
pub fn kl_loss<S: Scalar>(q: &GpoTarget<S>, logits: &[S], mask: &[bool]) -> Result<(S, Vec<S>), HeadError> {
    if q.q.len() != logits.len() || mask.len() != logits.len() {
        return Err(HeadError::Inconsistent("length mismatch".into()));
    }
    if let Some(pos) = q.q.iter().zip(mask).position(|(&qi, &m)| !m && qi != S::zero()) {
        return Err(HeadError::Inconsistent(format!("q has mass at masked position {pos}")));
    }
    let lse = masked_log_sum_exp(logits, mask);
    let mut loss = S::zero();
    let mut grad = vec![S::zero(); logits.len()];
    for y in 0..logits.len() {
        if !mask[y] {
            continue;
        }
        let log_p = logits[y] - lse;
        let qy = q.q[y];
        if qy > S::zero() {
            loss += qy * (qy.ln() - log_p);
        }
        grad[y] = log_p.exp() - qy;
    }
    // Exact KL is non-negative; clamp rounding residue when p == q.
    Ok((loss.max(S::zero()), grad))
}

/// `-log softmax(logits)[target]` and its gradient `p - onehot(target)`.
pub fn mle_loss<S: Scalar>(target: usize, logits: &[S], mask: &[bool]) -> Result<(S, Vec<S>), HeadError> {
    if target >= logits.len() {
        return Err(HeadError::TargetOutOfRange { pos: target, len: logits.len() });
    }
    if !mask[target] {
        return Err(HeadError::MaskedTarget(target));
    }
    let lse = masked_log_sum_exp(logits, mask);
    let loss = lse - logits[target];
    let mut grad: Vec<S> = logits
        .iter()
        .zip(mask)
        .map(|(&l, &m)| if m { (l - lse).exp() } else { S::zero() })
        .collect();
    grad[target] -= S::one();
    Ok((loss, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub gpo: GpoConfig,
    pub gpo_enabled: bool,
    pub papr_enabled: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { gpo: GpoConfig::default(), gpo_enabled: true, papr_enabled: true }
    }
}

impl LossConfig {
    /// Weight actually applied to the KL term.
    pub fn effective_kl_weight(&self) -> f64 {
        if self.gpo_enabled {
            self.gpo.kl_weight
        } else {
            0.0
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub mle_span: f64,
    pub kl_span: f64,
    pub para_ce: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn add(&mut self, other: &LossBreakdown) {
        self.mle_span += other.mle_span;
        self.kl_span += other.kl_span;
        self.para_ce += other.para_ce;
        self.total += other.total;
    }

    pub fn scaled(&self, factor: f64) -> LossBreakdown {
        LossBreakdown {
            mle_span: self.mle_span * factor,
            kl_span: self.kl_span * factor,
            para_ce: self.para_ce * factor,
            total: self.total * factor,
        }
    }
}

/// Gradients of the total loss with respect to every logit.
#[derive(Clone, Debug, PartialEq)]
pub struct LogitGrads<S> {
    pub paragraph: Vec<S>,
    pub start: Vec<S>,
    pub end: Vec<S>,
}

/// Total loss `para_ce + mle_span + λ·kl_span` for one window.
///
/// With the paragraph head disabled `para_ce` is zero. Windows without a
/// gold span target the null anchor under cross-entropy only.
pub fn total_loss<S: Scalar>(
    labels: &Labels,
    para: &ParagraphDistribution<S>,
    start_logits: &[S],
    end_logits: &[S],
    span_mask: &[bool],
    cfg: &LossConfig,
) -> Result<(LossBreakdown, LogitGrads<S>), HeadError> {
    let n = start_logits.len();
    let mut out = LossBreakdown::default();
    let mut grads = LogitGrads {
        paragraph: vec![S::zero(); para.logits.len()],
        start: vec![S::zero(); n],
        end: vec![S::zero(); n],
    };

    if cfg.papr_enabled {
        let (ce, g) = mle_loss(labels.la_slot, &para.logits, &para.mask)?;
        out.para_ce = ce.as_f64();
        grads.paragraph = g;
    }

    let lambda = cfg.effective_kl_weight();
    let targets = labels.span();
    let (ys, ye) = targets.unwrap_or((NULL_ANCHOR, NULL_ANCHOR));
    let (ls, gs) = mle_loss(ys, start_logits, span_mask)?;
    let (le, ge) = mle_loss(ye, end_logits, span_mask)?;
    out.mle_span = (ls + le).as_f64();
    grads.start = gs;
    grads.end = ge;

    if targets.is_some() {
        let lam = S::lit(lambda);
        for (y, logits, g) in [(ys, start_logits, &mut grads.start), (ye, end_logits, &mut grads.end)] {
            let q = gpo_target::<S>(n, y, span_mask, &cfg.gpo)?;
            let (kl, kg) = kl_loss(&q, logits, span_mask)?;
            out.kl_span += kl.as_f64();
            if lambda > 0.0 {
                for (a, b) in g.iter_mut().zip(kg) {
                    *a += lam * b;
                }
            }
        }
    }
    out.total = out.para_ce + out.mle_span + lambda * out.kl_span;
    Ok((out, grads))
}
