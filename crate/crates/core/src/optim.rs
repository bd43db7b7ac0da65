//! Adam with bias correction and a constant learning rate.

use thiserror::Error;

use crate::params::ParamSet;
use crate::scalar::Scalar;

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPSILON: f64 = 1e-8;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("NONFINITE_GRAD: non-finite gradient in {tensor}")]
    NonFiniteGrad { tensor: String },
    #[error("shape mismatch between parameters and optimizer state")]
    Shape,
}

impl OptimError {
    pub fn code(&self) -> &'static str {
        match self {
            OptimError::NonFiniteGrad { .. } => "NONFINITE_GRAD",
            OptimError::Shape => "SHAPE_MISMATCH",
        }
    }
}

/// First and second moments, one flat buffer per tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState<S> {
    pub m: Vec<Vec<S>>,
    pub v: Vec<Vec<S>>,
    pub step: u64,
}

impl<S: Scalar> AdamState<S> {
    pub fn new<P: ParamSet<S>>(params: &P) -> Self {
        let shapes: Vec<usize> = params.tensors().iter().map(|t| t.data.len()).collect();
        Self {
            m: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![S::zero(); n]).collect(),
            step: 0,
        }
    }
}

/// One Adam update. The gradient is checked in full before anything is
/// modified, so a rejected step leaves params and state untouched.
pub fn optimizer_step<S: Scalar, P: ParamSet<S>>(
    params: &mut P,
    grads: &P,
    state: &mut AdamState<S>,
    lr: f64,
) -> Result<(), OptimError> {
    let gviews = grads.tensors();
    if gviews.len() != state.m.len() || gviews.iter().zip(&state.m).any(|(g, m)| g.data.len() != m.len()) {
        return Err(OptimError::Shape);
    }
    if let Some(bad) = gviews.iter().find(|g| g.data.iter().any(|x| !x.is_finite())) {
        return Err(OptimError::NonFiniteGrad { tensor: bad.name.clone() });
    }

    state.step += 1;
    let t = state.step as i32;
    let (b1, b2) = (S::lit(BETA1), S::lit(BETA2));
    let bc1 = S::one() - b1.powi(t);
    let bc2 = S::one() - b2.powi(t);
    let lr = S::lit(lr);
    let eps = S::lit(EPSILON);
    for (((p, g), m), v) in params.tensors_mut().into_iter().zip(&gviews).zip(&mut state.m).zip(&mut state.v) {
        for i in 0..p.len() {
            let gi = g.data[i];
            m[i] = b1 * m[i] + (S::one() - b1) * gi;
            v[i] = b2 * v[i] + (S::one() - b2) * gi * gi;
            let mhat = m[i] / bc1;
            let vhat = v[i] / bc2;
            p[i] -= lr * mhat / (vhat.sqrt() + eps);
        }
    }
    Ok(())
}
