//! Sliding-window transformer encoder with exact analytic gradients.
//!
//! Pre-layer-norm blocks with ReLU feed-forward and learned absolute
//! positions. Position `i` attends to key `j` when `j` is not padding and
//! `|i - j| <= local_window / 2`, or when either position is global.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::params::{ParamSet, TensorView};
use crate::scalar::Scalar;
use crate::tensor::{dot, Matrix};

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    pub local_window: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 32,
            n_layers: 2,
            n_heads: 4,
            ffn_dim: 64,
            local_window: 16,
            max_len: 4096,
            vocab_size: 8192,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EncoderError {
    #[error("invalid encoder config: {0}")]
    Config(String),
    #[error("token id {id} at position {pos} is outside the vocabulary of {vocab_size}")]
    TokenOutOfRange { id: u32, pos: usize, vocab_size: usize },
    #[error("sequence length {len} exceeds max_len {max_len}")]
    TooLong { len: usize, max_len: usize },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), EncoderError> {
        let bad = |m: &str| Err(EncoderError::Config(m.to_string()));
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model must be a positive multiple of n_heads");
        }
        if self.local_window % 2 != 0 {
            return bad("local_window must be even");
        }
        if self.ffn_dim == 0 || self.max_len == 0 || self.vocab_size == 0 {
            return bad("ffn_dim, max_len and vocab_size must be positive");
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams<S> {
    pub ln1_gamma: Vec<S>,
    pub ln1_beta: Vec<S>,
    pub wq: Matrix<S>,
    pub bq: Vec<S>,
    pub wk: Matrix<S>,
    pub bk: Vec<S>,
    pub wv: Matrix<S>,
    pub bv: Vec<S>,
    pub wo: Matrix<S>,
    pub bo: Vec<S>,
    pub ln2_gamma: Vec<S>,
    pub ln2_beta: Vec<S>,
    pub w1: Matrix<S>,
    pub b1: Vec<S>,
    pub w2: Matrix<S>,
    pub b2: Vec<S>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams<S> {
    pub tok_emb: Matrix<S>,
    pub pos_emb: Matrix<S>,
    pub layers: Vec<LayerParams<S>>,
    pub lnf_gamma: Vec<S>,
    pub lnf_beta: Vec<S>,
}

impl<S: Scalar> EncoderParams<S> {
    /// All-zero container with the shapes implied by `cfg` (used for gradients).
    pub fn zeros(cfg: &EncoderConfig) -> Self {
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let z = |n: usize| vec![S::zero(); n];
        Self {
            tok_emb: Matrix::zeros(cfg.vocab_size, d),
            pos_emb: Matrix::zeros(cfg.max_len, d),
            layers: (0..cfg.n_layers)
                .map(|_| LayerParams {
                    ln1_gamma: z(d),
                    ln1_beta: z(d),
                    wq: Matrix::zeros(d, d),
                    bq: z(d),
                    wk: Matrix::zeros(d, d),
                    bk: z(d),
                    wv: Matrix::zeros(d, d),
                    bv: z(d),
                    wo: Matrix::zeros(d, d),
                    bo: z(d),
                    ln2_gamma: z(d),
                    ln2_beta: z(d),
                    w1: Matrix::zeros(d, f),
                    b1: z(f),
                    w2: Matrix::zeros(f, d),
                    b2: z(d),
                })
                .collect(),
            lnf_gamma: z(d),
            lnf_beta: z(d),
        }
    }
}

/// Seeded initialization: uniform `±1/sqrt(fan_in)` for linear maps,
/// uniform `±0.5` for embeddings, zero biases and offsets, unit scales.
pub fn init_params<S: Scalar>(cfg: &EncoderConfig) -> Result<EncoderParams<S>, EncoderError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = EncoderParams::zeros(cfg);
    let mut fill = |m: &mut Matrix<S>, bound: f64| {
        for x in m.data.iter_mut() {
            *x = S::lit(rng.gen_range(-bound..bound));
        }
    };
    fill(&mut p.tok_emb, 0.5);
    fill(&mut p.pos_emb, 0.5);
    let d_bound = 1.0 / (cfg.d_model as f64).sqrt();
    let f_bound = 1.0 / (cfg.ffn_dim as f64).sqrt();
    for layer in &mut p.layers {
        for m in [&mut layer.wq, &mut layer.wk, &mut layer.wv, &mut layer.wo, &mut layer.w1] {
            fill(m, d_bound);
        }
        fill(&mut layer.w2, f_bound);
        layer.ln1_gamma.fill(S::one());
        layer.ln2_gamma.fill(S::one());
    }
    p.lnf_gamma.fill(S::one());
    Ok(p)
}

fn view<'a, S>(name: String, shape: (usize, usize), data: &'a [S]) -> TensorView<'a, S> {
    TensorView { name, shape, data }
}

impl<S: Scalar> ParamSet<S> for EncoderParams<S> {
    fn tensors(&self) -> Vec<TensorView<'_, S>> {
        let vec_shape = |v: &Vec<S>| (1, v.len());
        let mut out = vec![
            view("encoder.tok_emb".into(), self.tok_emb.shape(), &self.tok_emb.data[..]),
            view("encoder.pos_emb".into(), self.pos_emb.shape(), &self.pos_emb.data[..]),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            let name = |s: &str| format!("encoder.layers.{l}.{s}");
            out.push(view(name("ln1.gamma"), vec_shape(&layer.ln1_gamma), &layer.ln1_gamma));
            out.push(view(name("ln1.beta"), vec_shape(&layer.ln1_beta), &layer.ln1_beta));
            out.push(view(name("attn.wq"), layer.wq.shape(), &layer.wq.data));
            out.push(view(name("attn.bq"), vec_shape(&layer.bq), &layer.bq));
            out.push(view(name("attn.wk"), layer.wk.shape(), &layer.wk.data));
            out.push(view(name("attn.bk"), vec_shape(&layer.bk), &layer.bk));
            out.push(view(name("attn.wv"), layer.wv.shape(), &layer.wv.data));
            out.push(view(name("attn.bv"), vec_shape(&layer.bv), &layer.bv));
            out.push(view(name("attn.wo"), layer.wo.shape(), &layer.wo.data));
            out.push(view(name("attn.bo"), vec_shape(&layer.bo), &layer.bo));
            out.push(view(name("ln2.gamma"), vec_shape(&layer.ln2_gamma), &layer.ln2_gamma));
            out.push(view(name("ln2.beta"), vec_shape(&layer.ln2_beta), &layer.ln2_beta));
            out.push(view(name("ffn.w1"), layer.w1.shape(), &layer.w1.data));
            out.push(view(name("ffn.b1"), vec_shape(&layer.b1), &layer.b1));
            out.push(view(name("ffn.w2"), layer.w2.shape(), &layer.w2.data));
            out.push(view(name("ffn.b2"), vec_shape(&layer.b2), &layer.b2));
        }
        out.push(view("encoder.lnf.gamma".into(), vec_shape(&self.lnf_gamma), &self.lnf_gamma));
        out.push(view("encoder.lnf.beta".into(), vec_shape(&self.lnf_beta), &self.lnf_beta));
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [S]> {
        let mut out: Vec<&mut [S]> = vec![&mut self.tok_emb.data, &mut self.pos_emb.data];
        for layer in &mut self.layers {
            out.push(&mut layer.ln1_gamma);
            out.push(&mut layer.ln1_beta);
            out.push(&mut layer.wq.data);
            out.push(&mut layer.bq);
            out.push(&mut layer.wk.data);
            out.push(&mut layer.bk);
            out.push(&mut layer.wv.data);
            out.push(&mut layer.bv);
            out.push(&mut layer.wo.data);
            out.push(&mut layer.bo);
            out.push(&mut layer.ln2_gamma);
            out.push(&mut layer.ln2_beta);
            out.push(&mut layer.w1.data);
            out.push(&mut layer.b1);
            out.push(&mut layer.w2.data);
            out.push(&mut layer.b2);
        }
        out.push(&mut self.lnf_gamma);
        out.push(&mut self.lnf_beta);
        out
    }
}

/// One model input: ids plus padding and global-attention masks.
#[derive(Clone, Copy, Debug)]
pub struct EncoderInput<'a> {
    pub token_ids: &'a [u32],
    /// `false` marks padding; padded keys are never attended.
    pub attention_mask: &'a [bool],
    pub global_mask: &'a [bool],
}

/// Per-token final hidden states, one row per input position.
pub type HiddenStates<S> = Matrix<S>;

#[derive(Clone, Debug)]
struct LnCache<S> {
    xhat: Matrix<S>,
    inv_std: Vec<S>,
}

#[derive(Clone, Debug)]
struct LayerTape<S> {
    a: Matrix<S>,
    ln1: LnCache<S>,
    q: Matrix<S>,
    k: Matrix<S>,
    v: Matrix<S>,
    /// `probs[h][i][n]` is the weight of key `allowed[i][n]` for query `i`.
    probs: Vec<Vec<Vec<S>>>,
    ctx: Matrix<S>,
    b: Matrix<S>,
    ln2: LnCache<S>,
    u: Matrix<S>,
    r: Matrix<S>,
}

/// Activations recorded by [`encode_forward`] for the backward pass.
#[derive(Clone, Debug)]
pub struct Tape<'p, S> {
    params: &'p EncoderParams<S>,
    cfg: EncoderConfig,
    token_ids: Vec<u32>,
    allowed: Vec<Vec<usize>>,
    layers: Vec<LayerTape<S>>,
    lnf: LnCache<S>,
}

impl<S: Scalar> Tape<'_, S> {
    pub fn seq_len(&self) -> usize {
        self.token_ids.len()
    }

    /// Dense `L × L` attention matrix of one layer and head.
    pub fn attention_matrix(&self, layer: usize, head: usize) -> Matrix<S> {
        let n = self.seq_len();
        let mut m = Matrix::zeros(n, n);
        for (i, keys) in self.allowed.iter().enumerate() {
            for (&j, &p) in keys.iter().zip(&self.layers[layer].probs[head][i]) {
                m.data[i * n + j] = p;
            }
        }
        m
    }

    /// Keys each query position may attend to.
    pub fn allowed_keys(&self) -> &[Vec<usize>] {
        &self.allowed
    }
}

/// Attention pattern: local band, plus full rows and columns for globals.
pub fn allowed_keys(attention_mask: &[bool], global_mask: &[bool], local_window: usize) -> Vec<Vec<usize>> {
    let n = attention_mask.len();
    let half = local_window / 2;
    (0..n)
        .map(|i| {
            (0..n)
                .filter(|&j| attention_mask[j] && (i.abs_diff(j) <= half || global_mask[i] || global_mask[j]))
                .collect()
        })
        .collect()
}

fn layer_norm<S: Scalar>(x: &Matrix<S>, gamma: &[S], beta: &[S]) -> (Matrix<S>, LnCache<S>) {
    let (n, d) = x.shape();
    let inv_d = S::one() / S::lit(d as f64);
    let eps = S::lit(LN_EPS);
    let mut y = Matrix::zeros(n, d);
    let mut xhat = Matrix::zeros(n, d);
    let mut inv_std = Vec::with_capacity(n);
    for t in 0..n {
        let row = x.row(t);
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let is = S::one() / (var + eps).sqrt();
        inv_std.push(is);
        for c in 0..d {
            let h = (row[c] - mean) * is;
            xhat.data[t * d + c] = h;
            y.data[t * d + c] = gamma[c] * h + beta[c];
        }
    }
    (y, LnCache { xhat, inv_std })
}

/// Returns dx and accumulates dgamma, dbeta.
fn layer_norm_backward<S: Scalar>(
    dy: &Matrix<S>,
    cache: &LnCache<S>,
    gamma: &[S],
    dgamma: &mut [S],
    dbeta: &mut [S],
) -> Matrix<S> {
    let (n, d) = dy.shape();
    let inv_d = S::one() / S::lit(d as f64);
    let mut dx = Matrix::zeros(n, d);
    for t in 0..n {
        let dyr = dy.row(t);
        let xh = cache.xhat.row(t);
        let mut mean_g = S::zero();
        let mut mean_gx = S::zero();
        for c in 0..d {
            dgamma[c] += dyr[c] * xh[c];
            dbeta[c] += dyr[c];
            let g = dyr[c] * gamma[c];
            mean_g += g;
            mean_gx += g * xh[c];
        }
        mean_g *= inv_d;
        mean_gx *= inv_d;
        let is = cache.inv_std[t];
        for c in 0..d {
            let g = dyr[c] * gamma[c];
            dx.data[t * d + c] = is * (g - mean_g - xh[c] * mean_gx);
        }
    }
    dx
}

fn linear<S: Scalar>(x: &Matrix<S>, w: &Matrix<S>, b: &[S]) -> Matrix<S> {
    let mut y = x.matmul(w);
    y.add_row_vector(b);
    y
}

/// Encodes one window, returning final hidden states and the tape.
pub fn encode_forward<'p, S: Scalar>(
    input: EncoderInput<'_>,
    params: &'p EncoderParams<S>,
    cfg: &EncoderConfig,
) -> Result<(HiddenStates<S>, Tape<'p, S>), EncoderError> {
    let n = input.token_ids.len();
    if input.attention_mask.len() != n || input.global_mask.len() != n {
        return Err(EncoderError::Shape("mask lengths differ from token count".into()));
    }
    if n > cfg.max_len {
        return Err(EncoderError::TooLong { len: n, max_len: cfg.max_len });
    }
    if params.layers.len() != cfg.n_layers || params.tok_emb.shape() != (cfg.vocab_size, cfg.d_model) {
        return Err(EncoderError::Shape("parameters do not match config".into()));
    }
    let d = cfg.d_model;
    let mut x = Matrix::zeros(n, d);
    for (t, &id) in input.token_ids.iter().enumerate() {
        if id as usize >= cfg.vocab_size {
            return Err(EncoderError::TokenOutOfRange { id, pos: t, vocab_size: cfg.vocab_size });
        }
        let row = x.row_mut(t);
        for ((o, &e), &p) in row.iter_mut().zip(params.tok_emb.row(id as usize)).zip(params.pos_emb.row(t)) {
            *o = e + p;
        }
    }

    let allowed = allowed_keys(input.attention_mask, input.global_mask, cfg.local_window);
    let heads = cfg.n_heads;
    let hd = cfg.head_dim();
    let scale = S::one() / S::lit(hd as f64).sqrt();

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for lp in &params.layers {
        let (a, ln1) = layer_norm(&x, &lp.ln1_gamma, &lp.ln1_beta);
        let q = linear(&a, &lp.wq, &lp.bq);
        let k = linear(&a, &lp.wk, &lp.bk);
        let v = linear(&a, &lp.wv, &lp.bv);
        let mut ctx = Matrix::zeros(n, d);
        let mut probs = vec![Vec::with_capacity(n); heads];
        for (h, head_probs) in probs.iter_mut().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            for (i, keys) in allowed.iter().enumerate() {
                let qi = &q.row(i)[cols.clone()];
                let scores: Vec<S> = keys.iter().map(|&j| dot(qi, &k.row(j)[cols.clone()]) * scale).collect();
                let max = scores.iter().copied().fold(S::neg_infinity(), S::max);
                let mut p: Vec<S> = scores.iter().map(|&s| (s - max).exp()).collect();
                let z: S = p.iter().copied().sum();
                for pj in &mut p {
                    *pj /= z;
                }
                let out = &mut ctx.row_mut(i)[cols.clone()];
                for (&j, &pj) in keys.iter().zip(&p) {
                    for (o, &vj) in out.iter_mut().zip(&v.row(j)[cols.clone()]) {
                        *o += pj * vj;
                    }
                }
                head_probs.push(p);
            }
        }
        let attn_out = linear(&ctx, &lp.wo, &lp.bo);
        x.add_assign(&attn_out);
        let (b, ln2) = layer_norm(&x, &lp.ln2_gamma, &lp.ln2_beta);
        let u = linear(&b, &lp.w1, &lp.b1);
        let mut r = u.clone();
        for z in r.data.iter_mut() {
            if *z < S::zero() {
                *z = S::zero();
            }
        }
        let f = linear(&r, &lp.w2, &lp.b2);
        x.add_assign(&f);
        layers.push(LayerTape { a, ln1, q, k, v, probs, ctx, b, ln2, u, r });
    }
    let (hidden, lnf) = layer_norm(&x, &params.lnf_gamma, &params.lnf_beta);
    let tape = Tape { params, cfg: cfg.clone(), token_ids: input.token_ids.to_vec(), allowed, layers, lnf };
    Ok((hidden, tape))
}

/// Exact parameter gradients of a scalar loss whose gradient with respect
/// to the hidden states is `grad_hidden`.
pub fn encode_backward<S: Scalar>(
    tape: &Tape<'_, S>,
    grad_hidden: &Matrix<S>,
) -> Result<EncoderParams<S>, EncoderError> {
    let cfg = &tape.cfg;
    let n = tape.seq_len();
    let d = cfg.d_model;
    if grad_hidden.shape() != (n, d) {
        return Err(EncoderError::Shape(format!(
            "grad_hidden is {:?}, expected {:?}",
            grad_hidden.shape(),
            (n, d)
        )));
    }
    let params = tape.params;
    let mut g = EncoderParams::zeros(cfg);
    let hd = cfg.head_dim();
    let scale = S::one() / S::lit(hd as f64).sqrt();

    let mut dx = layer_norm_backward(grad_hidden, &tape.lnf, &params.lnf_gamma, &mut g.lnf_gamma, &mut g.lnf_beta);

    for (l, lt) in tape.layers.iter().enumerate().rev() {
        let lp = &params.layers[l];
        let gl = &mut g.layers[l];

        // Feed-forward branch; the residual passes dx through unchanged.
        gl.w2.add_assign(&lt.r.t_matmul(&dx));
        for (o, s) in gl.b2.iter_mut().zip(dx.column_sums()) {
            *o += s;
        }
        let mut du = dx.matmul_t(&lp.w2);
        for (gu, &u) in du.data.iter_mut().zip(&lt.u.data) {
            if u <= S::zero() {
                *gu = S::zero();
            }
        }
        gl.w1.add_assign(&lt.b.t_matmul(&du));
        for (o, s) in gl.b1.iter_mut().zip(du.column_sums()) {
            *o += s;
        }
        let db = du.matmul_t(&lp.w1);
        dx.add_assign(&layer_norm_backward(&db, &lt.ln2, &lp.ln2_gamma, &mut gl.ln2_gamma, &mut gl.ln2_beta));

        // Attention branch.
        gl.wo.add_assign(&lt.ctx.t_matmul(&dx));
        for (o, s) in gl.bo.iter_mut().zip(dx.column_sums()) {
            *o += s;
        }
        let dctx = dx.matmul_t(&lp.wo);
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        for (h, head_probs) in lt.probs.iter().enumerate() {
            let cols = h * hd..(h + 1) * hd;
            for (i, keys) in tape.allowed.iter().enumerate() {
                let p = &head_probs[i];
                let dci = &dctx.row(i)[cols.clone()];
                let dp: Vec<S> = keys.iter().map(|&j| dot(dci, &lt.v.row(j)[cols.clone()])).collect();
                let weighted: S = p.iter().zip(&dp).map(|(&a, &b)| a * b).sum();
                for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(&dp) {
                    for (c, &dc) in cols.clone().zip(dci) {
                        dv.data[j * d + c] += pj * dc;
                    }
                    let ds = pj * (dpj - weighted) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    for c in cols.clone() {
                        dq.data[i * d + c] += ds * lt.k.data[j * d + c];
                        dk.data[j * d + c] += ds * lt.q.data[i * d + c];
                    }
                }
            }
        }
        let mut da = Matrix::zeros(n, d);
        for (dproj, w, gw, gb, input) in [
            (&dq, &lp.wq, &mut gl.wq, &mut gl.bq, &lt.a),
            (&dk, &lp.wk, &mut gl.wk, &mut gl.bk, &lt.a),
            (&dv, &lp.wv, &mut gl.wv, &mut gl.bv, &lt.a),
        ] {
            gw.add_assign(&input.t_matmul(dproj));
            for (o, s) in gb.iter_mut().zip(dproj.column_sums()) {
                *o += s;
            }
            da.add_assign(&dproj.matmul_t(w));
        }
        dx.add_assign(&layer_norm_backward(&da, &lt.ln1, &lp.ln1_gamma, &mut gl.ln1_gamma, &mut gl.ln1_beta));
    }

    for (t, &id) in tape.token_ids.iter().enumerate() {
        let row = dx.row(t);
        for (o, &v) in g.tok_emb.row_mut(id as usize).iter_mut().zip(row) {
            *o += v;
        }
        for (o, &v) in g.pos_emb.row_mut(t).iter_mut().zip(row) {
            *o += v;
        }
    }
    Ok(g)
}
