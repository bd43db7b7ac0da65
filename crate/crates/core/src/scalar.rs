//! Floating-point abstraction shared by the encoder, heads and optimizer.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type the numeric core is generic over (`f32` or `f64`).
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Numerically stable log-sum-exp over the entries selected by `mask`.
///
/// Returns `-inf` when nothing is selected.
pub fn masked_log_sum_exp<S: Scalar>(logits: &[S], mask: &[bool]) -> S {
    let max = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| x)
        .fold(S::neg_infinity(), S::max);
    if max == S::neg_infinity() {
        return max;
    }
    let sum: S = logits
        .iter()
        .zip(mask)
        .filter(|(_, &m)| m)
        .map(|(&x, _)| (x - max).exp())
        .sum();
    max + sum.ln()
}

/// Softmax restricted to `mask`; masked entries get probability zero.
pub fn masked_softmax<S: Scalar>(logits: &[S], mask: &[bool]) -> Vec<S> {
    let lse = masked_log_sum_exp(logits, mask);
    logits
        .iter()
        .zip(mask)
        .map(|(&x, &m)| if m { (x - lse).exp() } else { S::zero() })
        .collect()
}
