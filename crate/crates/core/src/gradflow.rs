//! Numerical checks of how gradients reach the SFA branches: the frozen-gate
//! direct path, its uniformity without selection, and full-chain agreement
//! with finite differences.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::{compare, finite_diff_gradient, GradCheck, Tape, Tensor};

use crate::blocks::{ae_project, sbigru_split, sfa_head, BlockConfig, BlockKind, FeatureBlock, SfaParams};
use crate::error::{Error, Result};
use crate::params::Params;

/// Tolerance on the frozen-gate Jacobian.
pub const DIRECT_PATH_TOL: f64 = 1e-6;
/// Tolerance on branch-coefficient spread for the single-gate variant.
pub const UNIFORM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchCoefficients {
    /// 1-based branch index.
    pub branch: usize,
    /// Gate readout per feature (the normalized weight, or the shared gate
    /// without selection).
    pub gate: Vec<f64>,
    /// Largest deviation of the frozen-gate Jacobian from `diag(gate)`.
    pub jacobian_max_err: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub label: String,
    pub eps: f64,
    pub max_abs_err: f64,
    pub max_rel_err: f64,
    pub coords: usize,
    pub tol: f64,
    pub pass: bool,
}

impl FdEntry {
    fn new(label: impl Into<String>, eps: f64, tol: f64, check: &GradCheck) -> Self {
        FdEntry {
            label: label.into(),
            eps,
            max_abs_err: check.max_abs_err,
            max_rel_err: check.max_rel_err,
            coords: check.coords,
            tol,
            pass: check.passes(tol),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contrast {
    pub spread_with_selection: f64,
    pub spread_without_selection: f64,
    pub without_is_uniform: bool,
    pub with_is_differentiated: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GradFlowReport {
    pub block: String,
    pub branches: usize,
    pub selection: bool,
    /// One entry per branch.
    pub direct_path: Vec<BranchCoefficients>,
    /// Largest pairwise deviation of per-branch direct coefficients.
    pub spread: Option<f64>,
    pub contrast: Option<Contrast>,
    pub finite_difference: Vec<FdEntry>,
    pub pass: bool,
}

impl GradFlowReport {
    fn finish(mut self) -> Self {
        let jac_ok = self
            .direct_path
            .iter()
            .all(|b| b.jacobian_max_err.is_none_or(|e| e < DIRECT_PATH_TOL));
        let contrast_ok = self.contrast.as_ref().is_none_or(|c| c.without_is_uniform);
        let fd_ok = self.finite_difference.iter().all(|f| f.pass);
        self.pass = jac_ok && contrast_ok && fd_ok;
        self
    }

    pub fn merge(mut self, other: GradFlowReport) -> Self {
        if self.direct_path.is_empty() {
            self.direct_path = other.direct_path;
            self.spread = other.spread;
        }
        self.contrast = self.contrast.or(other.contrast);
        self.finite_difference.extend(other.finite_difference);
        self.finish()
    }
}

/// Branch outputs of the block for `x`, as fresh differentiable tensors.
pub fn branch_values(p: &SfaParams<f64>, x: &Tensor<f64>, mask: &[bool]) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let reduced = match &p.ae_down {
        Some(ae) => ae_project(&mut tape, v, ae)?,
        None => v,
    };
    let branches = sbigru_split(&mut tape, reduced, &p.stack, mask)?;
    Ok(branches.into_iter().map(|b| tape.tensor(b).with_grad()).collect())
}

/// Per-branch gradient of `Σ u` with frozen gates (the direct coefficient at
/// every position and feature), plus the gate readouts.
fn frozen_coefficients(
    p: &SfaParams<f64>,
    branches: &[Tensor<f64>],
    mask: &[bool],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let mut tape = Tape::new();
    let vars: Vec<_> = branches.iter().map(|b| tape.leaf(b)).collect();
    let head = sfa_head(&mut tape, &vars, mask, p, true)?;
    let gates = head.selection.weights.iter().map(|&w| tape.value(w).to_vec()).collect();
    let loss = tape.sum_all(head.selection.output);
    let grads = tape.backward(loss)?;
    let coeffs = branches
        .iter()
        .map(|b| grads.wrt(b).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; b.numel()]))
        .collect();
    Ok((coeffs, gates))
}

fn spread_of(coeffs: &[Vec<f64>]) -> f64 {
    let mut spread: f64 = 0.0;
    for a in coeffs {
        for b in coeffs {
            for (x, y) in a.iter().zip(b) {
                spread = spread.max((x - y).abs());
            }
        }
    }
    spread
}

/// Largest pairwise deviation of the frozen-gate direct coefficients across
/// branches.
pub fn coefficient_spread(p: &SfaParams<f64>, x: &Tensor<f64>, mask: &[bool]) -> Result<f64> {
    let branches = branch_values(p, x, mask)?;
    Ok(spread_of(&frozen_coefficients(p, &branches, mask)?.0))
}

/// Full Jacobian of the selected output with respect to each branch, gates
/// frozen, compared entry by entry with `diag(ẽ)`.
pub fn direct_path_check(p: &SfaParams<f64>, x: &Tensor<f64>, mask: &[bool]) -> Result<GradFlowReport> {
    let dims = *p.dims();
    if dims.flags.disable_selection {
        return Err(Error::Contract("direct-path check needs the selection mechanism".into()));
    }
    let branches = branch_values(p, x, mask)?;
    let (len, f) = (branches[0].shape()[0], branches[0].shape()[1]);
    let (coeffs, gates) = frozen_coefficients(p, &branches, mask)?;

    let mut tape = Tape::new();
    let vars: Vec<_> = branches.iter().map(|b| tape.leaf(b)).collect();
    let head = sfa_head(&mut tape, &vars, mask, p, true)?;
    let flat = tape.reshape(head.selection.output, &[1, len * f])?;
    let mut errs = vec![0.0f64; branches.len()];
    for out in 0..len * f {
        let picked = tape.narrow(flat, 1, out, 1)?;
        tape.reset_backward();
        let grads = tape.backward(picked)?;
        let (lo, dout) = (out / f, out % f);
        for (n, b) in branches.iter().enumerate() {
            let g = grads.wrt(b).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len * f]);
            for (k, &gk) in g.iter().enumerate() {
                let expected = if k / f == lo && k % f == dout {
                    gates[n][dout]
                } else {
                    0.0
                };
                errs[n] = errs[n].max((gk - expected).abs());
            }
        }
    }
    let direct_path = gates
        .into_iter()
        .zip(errs)
        .enumerate()
        .map(|(n, (gate, err))| BranchCoefficients {
            branch: n + 1,
            gate,
            jacobian_max_err: Some(err),
        })
        .collect();
    Ok(GradFlowReport {
        block: "sfa".into(),
        branches: dims.branches,
        selection: true,
        direct_path,
        spread: Some(spread_of(&coeffs)),
        ..Default::default()
    }
    .finish())
}

/// Direct-coefficient spread of a block with selection against the same
/// block without it.
pub fn uniformity_contrast(
    with: &SfaParams<f64>,
    without: &SfaParams<f64>,
    x: &Tensor<f64>,
    mask: &[bool],
) -> Result<GradFlowReport> {
    let (dw, dn) = (with.dims(), without.dims());
    if dw.flags.disable_selection || !dn.flags.disable_selection {
        return Err(Error::Contract(
            "contrast needs one block with selection and one without".into(),
        ));
    }
    if (dw.dim, dw.r1, dw.r2, dw.branches) != (dn.dim, dn.r1, dn.r2, dn.branches) {
        return Err(Error::Contract(format!("contrasted blocks differ in shape: {dw:?} vs {dn:?}")));
    }
    let spread_with = coefficient_spread(with, x, mask)?;
    let branches = branch_values(without, x, mask)?;
    let (coeffs, gates) = frozen_coefficients(without, &branches, mask)?;
    let spread_without = spread_of(&coeffs);
    Ok(GradFlowReport {
        block: "sfa".into(),
        branches: dn.branches,
        selection: false,
        direct_path: gates
            .into_iter()
            .enumerate()
            .map(|(n, gate)| BranchCoefficients {
                branch: n + 1,
                gate,
                jacobian_max_err: None,
            })
            .collect(),
        spread: Some(spread_without),
        contrast: Some(Contrast {
            spread_with_selection: spread_with,
            spread_without_selection: spread_without,
            without_is_uniform: spread_without < UNIFORM_TOL,
            with_is_differentiated: spread_with > 0.0,
        }),
        ..Default::default()
    }
    .finish())
}

/// A fixed, seeded cotangent so every output coordinate carries a distinct
/// weight in the scalar test loss.
fn cotangent(shape: &[usize]) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    Tensor::uniform(shape, -1.0, 1.0, &mut rng)
}

fn block_loss(block: &FeatureBlock<f64>, x: &Tensor<f64>, mask: &[bool], c: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = block.forward(&mut tape, v, mask)?;
    let cv = tape.leaf(c);
    let w = tape.mul(out, cv)?;
    let loss = tape.sum_all(w);
    Ok(tape.item(loss))
}

/// Autodiff `∂loss/∂x` through the whole block against central differences.
pub fn full_chain_fd_check(
    block: &FeatureBlock<f64>,
    x: &Tensor<f64>,
    mask: &[bool],
    eps: f64,
    tol: f64,
) -> Result<FdEntry> {
    let x = x.clone().with_grad();
    let c = cotangent(x.shape());
    let mut tape = Tape::new();
    let v = tape.leaf(&x);
    let out = block.forward(&mut tape, v, mask)?;
    let cv = tape.leaf(&c);
    let w = tape.mul(out, cv)?;
    let loss = tape.sum_all(w);
    let grads = tape.backward(loss)?;
    let analytic = grads.wrt(&x).unwrap_or(&[]).to_vec();
    let mut failure = None;
    let numeric = finite_diff_gradient(
        |xp| match block_loss(block, xp, mask, &c) {
            Ok(l) => l,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &x,
        eps,
    );
    if let Some(e) = failure {
        return Err(e);
    }
    let label = format!("{} d/dx", block_label(block));
    Ok(FdEntry::new(label, eps, tol, &compare(&analytic, numeric.data())))
}

/// Autodiff gradients of every block parameter against central differences.
pub fn param_fd_check(
    block: &FeatureBlock<f64>,
    x: &Tensor<f64>,
    mask: &[bool],
    eps: f64,
    tol: f64,
) -> Result<FdEntry> {
    let c = cotangent(x.shape());
    let mut tape = Tape::new();
    let v = tape.leaf(x);
    let out = block.forward(&mut tape, v, mask)?;
    let cv = tape.leaf(&c);
    let w = tape.mul(out, cv)?;
    let loss = tape.sum_all(w);
    let grads = tape.backward(loss)?;

    let params = block.named_params("");
    let mut total = GradCheck::default();
    for (k, (_, t)) in params.iter().enumerate() {
        let analytic = grads.wrt(t).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; t.numel()]);
        let mut failure = None;
        let numeric = finite_diff_gradient(
            |perturbed| {
                let mut copy = block.clone();
                let mut idx = 0;
                copy.visit_mut("", &mut |_, p| {
                    if idx == k {
                        p.data_mut().copy_from_slice(perturbed.data());
                    }
                    idx += 1;
                });
                match block_loss(&copy, x, mask, &c) {
                    Ok(l) => l,
                    Err(e) => {
                        failure.get_or_insert(e);
                        f64::NAN
                    }
                }
            },
            t,
            eps,
        );
        if let Some(e) = failure {
            return Err(e);
        }
        total = total.merge(compare(&analytic, numeric.data()));
    }
    let label = format!("{} d/dparams", block_label(block));
    Ok(FdEntry::new(label, eps, tol, &total))
}

/// Full-chain error at each step size.
pub fn eps_sweep(block: &FeatureBlock<f64>, x: &Tensor<f64>, mask: &[bool], steps: &[f64]) -> Result<Vec<FdEntry>> {
    steps
        .iter()
        .map(|&eps| full_chain_fd_check(block, x, mask, eps, f64::INFINITY))
        .collect()
}

fn block_label(block: &FeatureBlock<f64>) -> String {
    match block {
        FeatureBlock::None => "none".into(),
        FeatureBlock::Fa(_) => "fa".into(),
        FeatureBlock::Sfa(p) => format!("sfa[{}]", p.dims().flags.label()),
    }
}

/// Settings for the standard suite run by the command line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSettings {
    pub seq_len: usize,
    pub seed: u64,
    pub eps: f64,
    pub tol: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        GradcheckSettings {
            seq_len: 4,
            seed: 0,
            eps: 1e-5,
            tol: 1e-4,
        }
    }
}

/// Finite-difference checks of the configured block (input and parameters);
/// for SFA with selection also the direct-path check and the contrast with a
/// single-gate twin of the same shape.
pub fn run_gradcheck(cfg: &BlockConfig, dim: usize, s: &GradcheckSettings) -> Result<GradFlowReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(s.seed);
    let block = FeatureBlock::<f64>::new(cfg, dim, &mut rng)?;
    let x = Tensor::uniform(&[s.seq_len, dim], -1.0, 1.0, &mut rng);
    let mask = vec![true; s.seq_len];
    let mut fd = vec![
        full_chain_fd_check(&block, &x, &mask, s.eps, s.tol)?,
        param_fd_check(&block, &x, &mask, s.eps, s.tol)?,
    ];
    let mut report = GradFlowReport {
        block: cfg.kind.to_string(),
        ..Default::default()
    };
    if let (BlockKind::Sfa, FeatureBlock::Sfa(p)) = (cfg.kind, &block) {
        report.branches = p.dims().branches;
        report.selection = !p.dims().flags.disable_selection;
        let mut twin_cfg = *cfg;
        twin_cfg.ablation.disable_selection = report.selection;
        let twin = FeatureBlock::<f64>::new(&twin_cfg, dim, &mut rng)?;
        fd.push(full_chain_fd_check(&twin, &x, &mask, s.eps, s.tol)?);
        let FeatureBlock::Sfa(q) = &twin else {
            unreachable!("same kind")
        };
        let (with, without) = if report.selection { (p, q) } else { (q, p) };
        let contrast = uniformity_contrast(with, without, &x, &mask)?;
        if report.selection {
            let direct = direct_path_check(p, &x, &mask)?;
            report.direct_path = direct.direct_path;
            report.spread = direct.spread;
        } else {
            report.direct_path = contrast.direct_path.clone();
            report.spread = contrast.spread;
        }
        report.contrast = contrast.contrast;
    }
    report.finite_difference = fd;
    Ok(report.finish())
}
