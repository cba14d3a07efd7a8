//! Gated recurrent units, bidirectional layers and the stacked encoder whose
//! layers serve as SFA branches.

use rand::Rng;
use sfa_tensor::{Real, Tape, Tensor, Var};

use crate::error::{config_err, Result};
use crate::params::{join, zero_bias, Params};

/// One gate: input kernel `in × H`, recurrent kernel `H × H`, bias `1 × H`.
#[derive(Debug, Clone)]
pub struct Gate<T> {
    pub input: Tensor<T>,
    pub recurrent: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> Gate<T> {
    fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        // glorot bound of the concatenated (in + H) × H kernel
        let bound = (6.0 / (in_dim + 2 * hidden) as f64).sqrt();
        Gate {
            input: Tensor::uniform(&[in_dim, hidden], -bound, bound, rng).with_grad(),
            recurrent: Tensor::uniform(&[hidden, hidden], -bound, bound, rng).with_grad(),
            bias: zero_bias(hidden),
        }
    }

    fn zeroed(in_dim: usize, hidden: usize) -> Self {
        Gate {
            input: Tensor::zeros(&[in_dim, hidden]).with_grad(),
            recurrent: Tensor::zeros(&[hidden, hidden]).with_grad(),
            bias: zero_bias(hidden),
        }
    }

    fn tensors_mut(&mut self) -> [&mut Tensor<T>; 3] {
        [&mut self.input, &mut self.recurrent, &mut self.bias]
    }
}

/// A single-direction GRU:
/// `z = σ(x·Wz + h·Uz + bz)`, `r = σ(x·Wr + h·Ur + br)`,
/// `c = tanh(x·Wc + (r⊙h)·Uc + bc)`, `h' = (1 − z)⊙c + z⊙h`.
#[derive(Debug, Clone)]
pub struct GruCell<T> {
    pub update: Gate<T>,
    pub reset: Gate<T>,
    pub candidate: Gate<T>,
}

impl<T: Real> GruCell<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        GruCell {
            update: Gate::new(in_dim, hidden, rng),
            reset: Gate::new(in_dim, hidden, rng),
            candidate: Gate::new(in_dim, hidden, rng),
        }
    }

    pub fn zeroed(in_dim: usize, hidden: usize) -> Self {
        GruCell {
            update: Gate::zeroed(in_dim, hidden),
            reset: Gate::zeroed(in_dim, hidden),
            candidate: Gate::zeroed(in_dim, hidden),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.update.input.shape()[0]
    }

    pub fn hidden(&self) -> usize {
        self.update.input.shape()[1]
    }

    pub fn count(in_dim: usize, hidden: usize) -> usize {
        3 * ((in_dim + hidden) * hidden + hidden)
    }

    /// Runs over `x: L × in` and returns `L × H` hidden states in position
    /// order. The initial state is zero; positions where `mask` is false
    /// carry the previous state through unchanged.
    pub fn run(&self, tape: &mut Tape<T>, x: Var, mask: &[bool], reverse: bool) -> Result<Var> {
        let len = tape.shape(x)[0];
        if mask.len() != len {
            return Err(config_err(format!(
                "mask has {} entries for a sequence of length {len}",
                mask.len()
            )));
        }
        let gates = [&self.update, &self.reset, &self.candidate];
        let w: Vec<Var> = gates.iter().map(|g| tape.leaf(&g.input)).collect();
        let b: Vec<Var> = gates.iter().map(|g| tape.leaf(&g.bias)).collect();
        let u: Vec<Var> = gates.iter().map(|g| tape.leaf(&g.recurrent)).collect();
        let w = tape.concat(&w, 1)?;
        let b = tape.concat(&b, 1)?;
        let u = tape.concat(&u, 1)?;
        let proj = tape.matmul(x, w)?;
        let proj = tape.add(proj, b)?;
        Ok(tape.gru_sequence(proj, u, mask, reverse)?)
    }
}

impl<T: Real> Params<T> for GruCell<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        for (gname, g) in [("z", &self.update), ("r", &self.reset), ("c", &self.candidate)] {
            f(join(prefix, &format!("W_{gname}")), &g.input);
            f(join(prefix, &format!("U_{gname}")), &g.recurrent);
            f(join(prefix, &format!("b_{gname}")), &g.bias);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        for (gname, g) in [
            ("z", &mut self.update),
            ("r", &mut self.reset),
            ("c", &mut self.candidate),
        ] {
            let [w, u, b] = g.tensors_mut();
            f(join(prefix, &format!("W_{gname}")), w);
            f(join(prefix, &format!("U_{gname}")), u);
            f(join(prefix, &format!("b_{gname}")), b);
        }
    }
}

/// Forward and backward GRUs over the same input; output `L × 2H` with the
/// forward states in the first `H` columns.
#[derive(Debug, Clone)]
pub struct BiGru<T> {
    pub forward: GruCell<T>,
    pub backward: GruCell<T>,
}

impl<T: Real> BiGru<T> {
    pub fn new<R: Rng + ?Sized>(in_dim: usize, hidden: usize, rng: &mut R) -> Self {
        BiGru {
            forward: GruCell::new(in_dim, hidden, rng),
            backward: GruCell::new(in_dim, hidden, rng),
        }
    }

    pub fn zeroed(in_dim: usize, hidden: usize) -> Self {
        BiGru {
            forward: GruCell::zeroed(in_dim, hidden),
            backward: GruCell::zeroed(in_dim, hidden),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.forward.in_dim()
    }

    pub fn hidden(&self) -> usize {
        self.forward.hidden()
    }

    pub fn count(in_dim: usize, hidden: usize) -> usize {
        2 * GruCell::<T>::count(in_dim, hidden)
    }

    pub fn run(&self, tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
        let f = self.forward.run(tape, x, mask, false)?;
        let b = self.backward.run(tape, x, mask, true)?;
        Ok(tape.concat(&[f, b], 1)?)
    }
}

impl<T: Real> Params<T> for BiGru<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.forward.visit(&join(prefix, "fwd"), f);
        self.backward.visit(&join(prefix, "bwd"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.forward.visit_mut(&join(prefix, "fwd"), f);
        self.backward.visit_mut(&join(prefix, "bwd"), f);
    }
}

/// Runs the stacked bidirectional encoder and returns every layer's output.
/// Layer `n` consumes layer `n − 1`'s `L × 2H` output; each output is one
/// branch.
pub fn sbigru_split<T: Real>(
    tape: &mut Tape<T>,
    x: Var,
    stack: &[BiGru<T>],
    mask: &[bool],
) -> Result<Vec<Var>> {
    if stack.is_empty() {
        return Err(config_err("stacked encoder has no layers"));
    }
    let mut input = x;
    let mut branches = Vec::with_capacity(stack.len());
    for (n, layer) in stack.iter().enumerate() {
        let width = tape.shape(input)[1];
        if layer.in_dim() != width {
            return Err(config_err(format!(
                "layer {} expects {} input features, got {width}",
                n + 1,
                layer.in_dim()
            )));
        }
        let out = layer.run(tape, input, mask)?;
        branches.push(out);
        input = out;
    }
    Ok(branches)
}
