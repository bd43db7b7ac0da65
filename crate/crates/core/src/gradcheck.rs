//! Finite-difference verification of every analytic gradient.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::heads::{self, GpoConfig, LossConfig};
use crate::jsonl::SCHEMA_VERSION;
use crate::model::{window_loss, window_loss_and_grads, Model, ModelError};
use crate::params::ParamSet;
use crate::synth::{generate, SynthConfig};
use crate::tokenizer::build_vocab;
use crate::windowing::{windows_for_example, Window, WindowConfig};

pub const LOGIT_H: f64 = 1e-6;
pub const LOGIT_TOL: f64 = 1e-6;
pub const MODEL_H: f64 = 1e-5;
pub const MODEL_TOL: f64 = 1e-4;

/// `|a - n| / max(|a|, |n|, 1e-5)`; the floor keeps exactly-zero
/// gradients from turning rounding noise into large ratios.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5)
}

pub fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| rel_err(a, n)).fold(0.0, f64::max)
}

/// `‖a - n‖ / max(‖a‖, ‖n‖)` over a whole gradient vector, zero when both
/// vanish. Elementwise ratios are dominated by rounding on components far
/// below the vector's scale at small `h`.
pub fn norm_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let l2 = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = l2(&mut analytic.iter().zip(numeric).map(|(a, n)| a - n));
    let scale = l2(&mut analytic.iter().copied()).max(l2(&mut numeric.iter().copied()));
    if scale == 0.0 {
        diff
    } else {
        diff / scale
    }
}

/// Central differences of `f` over the unmasked coordinates of `x`.
pub fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64], mask: &[bool], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            if !mask[i] {
                return 0.0;
            }
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let dn = f(&probe);
            probe[i] = x[i];
            (up - dn) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub group: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub version: u32,
    pub seed: u64,
    pub groups: Vec<GroupResult>,
    pub passed: bool,
}

impl GradcheckReport {
    pub fn to_table(&self) -> String {
        let mut out = format!("{:<34} {:>8} {:>12} {:>6}\n", "group", "checked", "max_rel_err", "ok");
        for g in &self.groups {
            out += &format!("{:<34} {:>8} {:>12.3e} {:>6}\n", g.group, g.checked, g.max_rel_err, if g.passed { "yes" } else { "NO" });
        }
        out
    }
}

fn group(name: &str, checked: usize, err: f64, tol: f64) -> GroupResult {
    GroupResult { group: name.to_string(), checked, max_rel_err: err, tolerance: tol, passed: err < tol }
}

fn random_logits(rng: &mut ChaCha8Rng, n: usize) -> (Vec<f64>, Vec<bool>) {
    let mask: Vec<bool> = (0..n).map(|i| i == 0 || rng.gen_bool(0.75)).collect();
    let logits = (0..n).map(|i| if mask[i] { rng.gen_range(-4.0..4.0) } else { f64::NEG_INFINITY }).collect();
    (logits, mask)
}

fn pick_unmasked(rng: &mut ChaCha8Rng, mask: &[bool]) -> usize {
    let valid: Vec<usize> = (0..mask.len()).filter(|&i| mask[i]).collect();
    valid[rng.gen_range(0..valid.len())]
}

/// Logit-level checks of the KL and cross-entropy gradients.
pub fn check_logit_losses(seed: u64, cases: usize) -> Vec<GroupResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut kl_err, mut ce_err) = (0.0f64, 0.0f64);
    for _ in 0..cases {
        let n = rng.gen_range(2..=128);
        let (logits, mask) = random_logits(&mut rng, n);
        let y = pick_unmasked(&mut rng, &mask);
        let cfg = GpoConfig { sigma: rng.gen_range(0.25..4.0), temperature: rng.gen_range(0.05..4.0), kl_weight: 1.0 };
        let q = heads::gpo_target::<f64>(n, y, &mask, &cfg).expect("unmasked target");
        let (_, g) = heads::kl_loss(&q, &logits, &mask).expect("aligned");
        let fd = central_diff(|l| heads::kl_loss(&q, l, &mask).unwrap().0, &logits, &mask, LOGIT_H);
        kl_err = kl_err.max(norm_rel_err(&g, &fd));
        let (_, g) = heads::mle_loss(y, &logits, &mask).expect("unmasked target");
        let fd = central_diff(|l| heads::mle_loss(y, l, &mask).unwrap().0, &logits, &mask, LOGIT_H);
        ce_err = ce_err.max(norm_rel_err(&g, &fd));
    }
    vec![group("heads.kl_logits", cases, kl_err, LOGIT_TOL), group("heads.ce_logits", cases, ce_err, LOGIT_TOL)]
}

/// The tiny end-to-end configuration.
pub fn tiny_setup(seed: u64) -> (EncoderConfig, Model<f64>, Window) {
    let docs = generate(&SynthConfig { docs: 1, paragraphs: 2, paragraph_len: 3, filler_words: 6, seed, id_prefix: "gc".into() });
    let vocab = build_vocab(&docs, 64, 2).expect("vocab");
    let wcfg = WindowConfig { seq_len: 16, doc_stride: 8, ..WindowConfig::default() };
    let window = windows_for_example(&docs[0], &vocab, &wcfg)
        .expect("window")
        .into_iter()
        .find(|w| w.labels.span().is_some())
        .expect("labelled window");
    let cfg = EncoderConfig {
        d_model: 8,
        n_layers: 2,
        n_heads: 2,
        ffn_dim: 16,
        local_window: 4,
        max_len: 16,
        vocab_size: vocab.len(),
        seed,
    };
    let mut model = Model::<f64>::init(&cfg).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    for t in model.heads.tensors_mut() {
        for x in t.iter_mut() {
            *x = rng.gen_range(-0.5..0.5);
        }
    }
    (cfg, model, window)
}

/// Every parameter coordinate of encoder + heads through `total_loss`.
/// `corrupt` perturbs one analytic gradient as a negative control.
pub fn check_model(seed: u64, corrupt: bool) -> Result<Vec<GroupResult>, ModelError> {
    let (cfg, model, window) = tiny_setup(seed);
    let loss_cfg = LossConfig { gpo: GpoConfig { kl_weight: 0.5, ..GpoConfig::default() }, ..LossConfig::default() };
    let capacity = window.candidates.len() + 1;
    let (_, mut grads) = window_loss_and_grads(&model, &cfg, &loss_cfg, &window, capacity)?;
    if corrupt {
        for x in grads.heads.span.start_w.iter_mut() {
            *x = *x * 1.01 + 1e-3;
        }
    }
    let views = grads.tensors();
    let mut probe = model.clone();
    let mut out = Vec::with_capacity(views.len());
    for (ti, view) in views.iter().enumerate() {
        let mut err = 0.0f64;
        for k in 0..view.data.len() {
            let orig = probe.tensors_mut()[ti][k];
            probe.tensors_mut()[ti][k] = orig + MODEL_H;
            let up = window_loss(&probe, &cfg, &loss_cfg, &window, capacity)?.total;
            probe.tensors_mut()[ti][k] = orig - MODEL_H;
            let dn = window_loss(&probe, &cfg, &loss_cfg, &window, capacity)?.total;
            probe.tensors_mut()[ti][k] = orig;
            err = err.max(rel_err(view.data[k], (up - dn) / (2.0 * MODEL_H)));
        }
        out.push(group(&view.name, view.data.len(), err, MODEL_TOL));
    }
    Ok(out)
}

pub fn run(seed: u64, corrupt: bool) -> Result<GradcheckReport, ModelError> {
    let mut groups = check_logit_losses(seed, 100);
    groups.extend(check_model(seed, corrupt)?);
    let passed = groups.iter().all(|g| g.passed);
    Ok(GradcheckReport { version: SCHEMA_VERSION, seed, groups, passed })
}
