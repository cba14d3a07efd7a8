//! Central finite differences, used as the independent oracle for every
//! backward rule.

use crate::error::Result;
use crate::real::Real;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Relative error floor: below this magnitude a difference is judged
/// against the floor instead of the (near zero) values themselves.
pub const REL_FLOOR: f64 = 1e-4;

/// `(f(x + eps·e_i) − f(x − eps·e_i)) / 2eps` for every coordinate `i`.
pub fn finite_diff_gradient<T, F>(mut f: F, x: &Tensor<T>, eps: f64) -> Tensor<T>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> T,
{
    assert!(eps > 0.0, "finite_diff_gradient: eps must be positive");
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + T::of(eps);
        let up = f(&probe).as_f64();
        probe.data_mut()[i] = orig - T::of(eps);
        let down = f(&probe).as_f64();
        probe.data_mut()[i] = orig;
        out.push(T::of((up - down) / (2.0 * eps)));
    }
    Tensor::from_vec(x.shape(), out).expect("same shape as x")
}

/// `|a − b| / max(|a|, |b|, REL_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(REL_FLOOR);
    (a - b).abs() / denom
}

/// Outcome of comparing autodiff gradients to finite differences.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct GradCheck {
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub coords: usize,
}

impl GradCheck {
    pub fn merge(self, other: GradCheck) -> GradCheck {
        GradCheck {
            max_abs_err: self.max_abs_err.max(other.max_abs_err),
            max_rel_err: self.max_rel_err.max(other.max_rel_err),
            coords: self.coords + other.coords,
        }
    }

    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares two gradient vectors coordinate by coordinate.
pub fn compare<T: Real>(analytic: &[T], numeric: &[T]) -> GradCheck {
    assert_eq!(analytic.len(), numeric.len());
    let mut out = GradCheck {
        coords: analytic.len(),
        ..Default::default()
    };
    for (&a, &n) in analytic.iter().zip(numeric) {
        let (a, n) = (a.as_f64(), n.as_f64());
        out.max_abs_err = out.max_abs_err.max((a - n).abs());
        out.max_rel_err = out.max_rel_err.max(relative_error(a, n));
    }
    out
}

/// Checks `build` (which must return a one-element loss) against finite
/// differences with respect to every tensor in `inputs`.
pub fn check_gradients<T, F>(build: F, inputs: &[Tensor<T>], eps: f64) -> Result<GradCheck>
where
    T: Real,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var>,
{
    let eval = |values: &[Tensor<T>]| -> Result<(Tape<T>, Vec<Var>, Var)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t)).collect();
        let loss = build(&mut tape, &vars)?;
        Ok((tape, vars, loss))
    };
    let (mut tape, vars, loss) = eval(inputs)?;
    let grads = tape.backward(loss)?;
    let mut report = GradCheck::default();
    for (k, input) in inputs.iter().enumerate() {
        let analytic = grads.of(vars[k]).expect("param leaves always get gradients");
        let mut err = None;
        let numeric = finite_diff_gradient(
            |probe| {
                let mut values: Vec<Tensor<T>> = inputs.to_vec();
                values[k] = probe.clone();
                match eval(&values) {
                    Ok((t, _, l)) => t.item(l),
                    Err(e) => {
                        err = Some(e);
                        T::nan()
                    }
                }
            },
            input,
            eps,
        );
        if let Some(e) = err {
            return Err(e);
        }
        report = report.merge(compare(analytic, numeric.data()));
    }
    Ok(report)
}
