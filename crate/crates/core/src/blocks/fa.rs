//! Feature attention: squeeze the sequence into a per-feature descriptor,
//! excite it through a tanh/sigmoid bottleneck, and rescale every position's
//! features by the resulting gate.

use rand::Rng;
use sfa_tensor::{Real, Tape, Tensor, Var};

use super::linear::Linear;
use crate::error::{config_err, Result};
use crate::params::Params;

#[derive(Debug, Clone)]
pub struct FaParams<T> {
    /// `D × D/r` reducer with tanh.
    pub fc1: Linear<T>,
    /// `D/r × D` expander with sigmoid.
    pub fc2: Linear<T>,
    r: usize,
}

impl<T: Real> FaParams<T> {
    pub fn new<R: Rng + ?Sized>(dim: usize, r: usize, rng: &mut R) -> Result<Self> {
        let bottleneck = Self::bottleneck_width(dim, r)?;
        Ok(FaParams {
            fc1: Linear::new(dim, bottleneck, rng).named("W_FC1", "b_FC1"),
            fc2: Linear::new(bottleneck, dim, rng).named("W_FC2", "b_FC2"),
            r,
        })
    }

    pub fn from_parts(
        w_fc1: Tensor<T>,
        b_fc1: Tensor<T>,
        w_fc2: Tensor<T>,
        b_fc2: Tensor<T>,
        r: usize,
    ) -> Result<Self> {
        let fc1 = Linear::from_parts(w_fc1, b_fc1)?.named("W_FC1", "b_FC1");
        let fc2 = Linear::from_parts(w_fc2, b_fc2)?.named("W_FC2", "b_FC2");
        let dim = fc1.fan_in();
        if Self::bottleneck_width(dim, r)? != fc1.fan_out()
            || fc2.fan_in() != fc1.fan_out()
            || fc2.fan_out() != dim
        {
            return Err(config_err(format!(
                "FA weights {:?} / {:?} do not form a D → D/r → D bottleneck with r = {r}",
                fc1.weight.shape(),
                fc2.weight.shape()
            )));
        }
        Ok(FaParams { fc1, fc2, r })
    }

    pub fn bottleneck_width(dim: usize, r: usize) -> Result<usize> {
        if r == 0 || dim == 0 || !dim.is_multiple_of(r) {
            return Err(config_err(format!("FA needs D mod r == 0, got D = {dim}, r = {r}")));
        }
        Ok(dim / r)
    }

    pub fn dim(&self) -> usize {
        self.fc1.fan_in()
    }

    pub fn r(&self) -> usize {
        self.r
    }

    /// `D·(D/r) + (D/r)·D + D/r + D`.
    pub fn count(dim: usize, r: usize) -> Result<usize> {
        let b = Self::bottleneck_width(dim, r)?;
        Ok(Linear::<T>::count(dim, b) + Linear::<T>::count(b, dim))
    }

    /// The gate `e` (`1 × D`) for an `L × D` input.
    pub fn excitation(&self, tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
        let s = tape.mean(x, 0, Some(mask))?;
        let s = self.fc1.forward(tape, s)?;
        let s = tape.tanh(s);
        let e = self.fc2.forward(tape, s)?;
        Ok(tape.sigmoid(e))
    }
}

impl<T: Real> Params<T> for FaParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        self.fc1.visit(prefix, f);
        self.fc2.visit(prefix, f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        self.fc1.visit_mut(prefix, f);
        self.fc2.visit_mut(prefix, f);
    }
}

/// `u = σ(tanh(mean_L(x)·W1 + b1)·W2 + b2) ⊙ x`, gate broadcast over `L`.
/// Pad positions (mask false) are excluded from the mean.
pub fn fa_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &FaParams<T>, mask: &[bool]) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != p.dim() {
        return Err(config_err(format!(
            "FA block of width {} applied to input {:?}",
            p.dim(),
            shape
        )));
    }
    let e = p.excitation(tape, x, mask)?;
    Ok(tape.mul(x, e)?)
}
