//! Named parameter traversal shared by optimizers, checkpoints and counts.

use rand::Rng;
use sfa_tensor::{Real, Tensor};

/// Anything that owns learnable tensors. Both visitors walk parameters in the
/// same fixed order with the same dotted names.
pub trait Params<T: Real> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>));

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t| n += t.numel());
        n
    }

    fn named_params(&self, prefix: &str) -> Vec<(String, &Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(prefix, &mut |name, t| out.push((name, t)));
        out
    }
}

pub(crate) fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

/// Glorot-uniform weight of shape `fan_in × fan_out`, marked differentiable.
pub(crate) fn glorot<T: Real, R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Tensor<T> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    Tensor::uniform(&[fan_in, fan_out], -bound, bound, rng).with_grad()
}

pub(crate) fn zero_bias<T: Real>(width: usize) -> Tensor<T> {
    Tensor::zeros(&[1, width]).with_grad()
}
