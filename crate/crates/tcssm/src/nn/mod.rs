//! Hand-written layers with explicit backward passes.

mod act;
mod cnn;
mod embed;
mod layers;
mod norm;
mod optim;

pub use act::{cross_entropy, log_softmax, relu, sigmoid, silu, silu_grad, softplus, softplus_inverse};
pub use cnn::{BatchNorm, BnCache, BnStats, Cnn, CnnCache, ConvBlock, Conv2d};
pub use embed::HashedEmbedder;
pub use layers::{Linear, LinearCache};
pub use norm::{rms_norm, rms_norm_backward, RmsCache};
pub use optim::{Adam, AdamConfig};

/// Named walk over the trainable tensors of a module.
///
/// Gradient containers reuse the weight type, so visiting weights and their
/// gradients yields tensors in the same order with the same lengths.
pub trait Parameters {
    fn visit(&self, f: &mut dyn FnMut(&str, &[f64]));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64]));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, v| n += v.len());
        n
    }

    fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.visit(&mut |_, v| out.extend_from_slice(v));
        out
    }

    fn zeros_like(&self) -> Self
    where
        Self: Clone + Sized,
    {
        let mut z = self.clone();
        z.visit_mut(&mut |_, v| v.iter_mut().for_each(|x| *x = 0.0));
        z
    }

    /// `(name, len)` in visiting order.
    fn groups(&self) -> Vec<(String, usize)> {
        let mut out = Vec::new();
        self.visit(&mut |n, v| out.push((n.to_string(), v.len())));
        out
    }

    /// Adds `other` elementwise; both must share a layout.
    fn add_assign(&mut self, other: &Self)
    where
        Self: Sized,
    {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, v| {
            for (x, g) in v.iter_mut().zip(&flat[offset..]) {
                *x += g;
            }
            offset += v.len();
        });
    }
}

/// Visits a child module with its names prefixed by `prefix.`.
pub(crate) fn visit_child<P: Parameters + ?Sized>(
    prefix: &str,
    child: &P,
    f: &mut dyn FnMut(&str, &[f64]),
) {
    child.visit(&mut |n, v| f(&format!("{prefix}.{n}"), v));
}

pub(crate) fn visit_child_mut<P: Parameters + ?Sized>(
    prefix: &str,
    child: &mut P,
    f: &mut dyn FnMut(&str, &mut [f64]),
) {
    child.visit_mut(&mut |n, v| f(&format!("{prefix}.{n}"), v));
}
