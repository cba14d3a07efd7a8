use rand::Rng;
use sfa_tensor::{Real, Tape, Tensor, Var};

use crate::error::{config_err, Result};
use crate::params::{glorot, join, zero_bias, Params};

/// Position-wise affine map `x·W + b`, applied row by row. This is both a
/// fully connected layer on a `1 × in` descriptor and a kernel-size-1
/// convolution on an `L × in` sequence.
#[derive(Debug, Clone)]
pub struct Linear<T> {
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
    names: (&'static str, &'static str),
}

impl<T: Real> Linear<T> {
    pub fn new<R: Rng + ?Sized>(fan_in: usize, fan_out: usize, rng: &mut R) -> Self {
        Linear {
            weight: glorot(fan_in, fan_out, rng),
            bias: zero_bias(fan_out),
            names: ("weight", "bias"),
        }
    }

    /// Builds from explicit tensors; `weight` is `in × out`, `bias` is
    /// `1 × out` or `out`.
    pub fn from_parts(weight: Tensor<T>, bias: Tensor<T>) -> Result<Self> {
        if weight.rank() != 2 {
            return Err(config_err(format!("weight must be 2-D, got {:?}", weight.shape())));
        }
        let out = weight.shape()[1];
        if bias.numel() != out {
            return Err(config_err(format!(
                "bias has {} entries, weight produces {out}",
                bias.numel()
            )));
        }
        let bias = Tensor::from_vec(&[1, out], bias.data().to_vec())?.with_grad();
        Ok(Linear {
            weight: weight.with_grad(),
            bias,
            names: ("weight", "bias"),
        })
    }

    pub(crate) fn named(mut self, weight: &'static str, bias: &'static str) -> Self {
        self.names = (weight, bias);
        self
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let h = tape.matmul(x, w)?;
        Ok(tape.add(h, b)?)
    }

    /// Closed-form parameter count.
    pub fn count(fan_in: usize, fan_out: usize) -> usize {
        fan_in * fan_out + fan_out
    }
}

impl<T: Real> Params<T> for Linear<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, self.names.0), &self.weight);
        f(join(prefix, self.names.1), &self.bias);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, self.names.0), &mut self.weight);
        f(join(prefix, self.names.1), &mut self.bias);
    }
}
