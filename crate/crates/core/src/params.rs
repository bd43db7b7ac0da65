//! Uniform named-tensor view over parameter and gradient containers.

use crate::scalar::Scalar;

pub struct TensorView<'a, S> {
    pub name: String,
    pub shape: (usize, usize),
    pub data: &'a [S],
}

/// A fixed, ordered list of named tensors. Gradients use the same type as
/// the parameters they belong to, so the two lists always line up.
pub trait ParamSet<S: Scalar> {
    fn tensors(&self) -> Vec<TensorView<'_, S>>;

    /// Mutable slices in the same order as [`ParamSet::tensors`].
    fn tensors_mut(&mut self) -> Vec<&mut [S]>;

    fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.data.len()).sum()
    }

    /// `self += scale * other`
    fn add_scaled(&mut self, other: &Self, scale: S)
    where
        Self: Sized,
    {
        let theirs = other.tensors();
        for (mine, t) in self.tensors_mut().into_iter().zip(theirs) {
            for (a, &b) in mine.iter_mut().zip(t.data) {
                *a += scale * b;
            }
        }
    }

    fn scale(&mut self, factor: S) {
        for t in self.tensors_mut() {
            for x in t.iter_mut() {
                *x *= factor;
            }
        }
    }

    fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.data.iter().all(|x| x.is_finite()))
    }

    fn max_abs(&self) -> S {
        self.tensors()
            .iter()
            .flat_map(|t| t.data.iter())
            .fold(S::zero(), |m, x| m.max(x.abs()))
    }
}
