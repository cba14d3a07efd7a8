//! Selective feature attention: a stacked BiGRU splits the (optionally
//! down-projected) input into multi-scale branches, a shared squeeze and
//! per-branch excitations score every feature of every branch, and a softmax
//! over branches selects a per-feature convex mix.

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::{Real, Tape, Tensor, Var};

use super::gru::{sbigru_split, BiGru};
use super::linear::Linear;
use crate::error::{config_err, Error, Result};
use crate::params::{join, Params};

/// Component switches for ablations. All false is the full block.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationFlags {
    pub disable_ae: bool,
    pub disable_gmp: bool,
    pub disable_gap: bool,
    pub disable_selection: bool,
}

impl AblationFlags {
    pub fn validate(&self) -> Result<()> {
        if self.disable_gmp && self.disable_gap {
            return Err(config_err("GMP and GAP cannot both be disabled"));
        }
        Ok(())
    }

    /// Parses a component name as used on the command line and in ablation
    /// lists: `ae`, `gmp`, `gap` or `selection`.
    pub fn with_disabled(mut self, component: &str) -> Result<Self> {
        match component {
            "ae" => self.disable_ae = true,
            "gmp" => self.disable_gmp = true,
            "gap" => self.disable_gap = true,
            "selection" => self.disable_selection = true,
            other => return Err(config_err(format!("unknown SFA component `{other}`"))),
        }
        Ok(self)
    }

    pub fn label(&self) -> String {
        let mut parts = Vec::new();
        for (on, name) in [
            (self.disable_ae, "ae"),
            (self.disable_gmp, "gmp"),
            (self.disable_gap, "gap"),
            (self.disable_selection, "selection"),
        ] {
            if on {
                parts.push(format!("w/o {name}"));
            }
        }
        if parts.is_empty() {
            "full".into()
        } else {
            parts.join(", ")
        }
    }
}

/// Shape parameters of an SFA block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SfaDims {
    pub dim: usize,
    pub r1: usize,
    pub r2: usize,
    pub branches: usize,
    pub flags: AblationFlags,
}

impl SfaDims {
    pub fn new(dim: usize, r1: usize, r2: usize, branches: usize) -> Self {
        SfaDims {
            dim,
            r1,
            r2,
            branches,
            flags: AblationFlags::default(),
        }
    }

    pub fn with_flags(mut self, flags: AblationFlags) -> Self {
        self.flags = flags;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.flags.validate()?;
        let (d, r1, r2) = (self.dim, self.r1, self.r2);
        if d == 0 || self.branches == 0 || r1 == 0 || r2 == 0 {
            return Err(config_err(format!(
                "SFA needs positive D, N, r1, r2; got D = {d}, N = {}, r1 = {r1}, r2 = {r2}",
                self.branches
            )));
        }
        if self.flags.disable_ae {
            if d % 2 != 0 {
                return Err(config_err(format!("SFA without AE needs even D, got {d}")));
            }
        } else if d % r1 != 0 {
            return Err(config_err(format!("SFA needs D mod r1 == 0, got D = {d}, r1 = {r1}")));
        }
        let f = self.fused_width();
        if !f.is_multiple_of(r2) {
            return Err(config_err(format!(
                "SFA needs 2D/r1 mod r2 == 0, got 2D/r1 = {f}, r2 = {r2}"
            )));
        }
        Ok(())
    }

    /// Input width of the first GRU layer.
    pub fn gru_in(&self) -> usize {
        if self.flags.disable_ae {
            self.dim
        } else {
            self.dim / self.r1
        }
    }

    /// Hidden width per direction.
    pub fn hidden(&self) -> usize {
        if self.flags.disable_ae {
            self.dim / 2
        } else {
            self.dim / self.r1
        }
    }

    /// Branch width `F`.
    pub fn fused_width(&self) -> usize {
        2 * self.hidden()
    }

    pub fn reduced_width(&self) -> usize {
        self.fused_width() / self.r2
    }

    pub fn exciter_count(&self) -> usize {
        if self.flags.disable_selection {
            1
        } else {
            self.branches
        }
    }

    /// Closed-form counts per component, in parameter order.
    pub fn count_by_component(&self) -> Result<Vec<(String, usize)>> {
        self.validate()?;
        let (d, f, b, h) = (self.dim, self.fused_width(), self.reduced_width(), self.hidden());
        let mut out = Vec::new();
        if !self.flags.disable_ae {
            out.push(("ae_down".to_string(), Linear::<f64>::count(d, h)));
        }
        for n in 0..self.branches {
            let input = if n == 0 { self.gru_in() } else { f };
            out.push((format!("gru.{}", n + 1), BiGru::<f64>::count(input, h)));
        }
        out.push(("reducer".to_string(), Linear::<f64>::count(f, b)));
        for n in 0..self.exciter_count() {
            out.push((format!("exciter.{}", n + 1), Linear::<f64>::count(b, f)));
        }
        if !self.flags.disable_ae {
            out.push(("ae_up".to_string(), Linear::<f64>::count(f, d)));
        }
        Ok(out)
    }

    pub fn count(&self) -> Result<usize> {
        Ok(self.count_by_component()?.iter().map(|(_, n)| n).sum())
    }
}

#[derive(Debug, Clone)]
pub struct SfaParams<T> {
    dims: SfaDims,
    /// `D × D/r1`, absent when the AE is ablated.
    pub ae_down: Option<Linear<T>>,
    pub stack: Vec<BiGru<T>>,
    /// Shared `F × F/r2` reducer (tanh).
    pub reducer: Linear<T>,
    /// One `F/r2 × F` sigmoid head per branch, or one in total without
    /// selection.
    pub exciters: Vec<Linear<T>>,
    /// `F × D`, absent when the AE is ablated.
    pub ae_up: Option<Linear<T>>,
}

impl<T: Real> SfaParams<T> {
    pub fn new<R: Rng + ?Sized>(dims: SfaDims, rng: &mut R) -> Result<Self> {
        dims.validate()?;
        let (d, f, b, h) = (dims.dim, dims.fused_width(), dims.reduced_width(), dims.hidden());
        let ae_down = (!dims.flags.disable_ae).then(|| Linear::new(d, h, rng));
        let stack = (0..dims.branches)
            .map(|n| BiGru::new(if n == 0 { dims.gru_in() } else { f }, h, rng))
            .collect();
        let reducer = Linear::new(f, b, rng).named("W_FC1", "b_FC1");
        let exciters = (0..dims.exciter_count())
            .map(|_| Linear::new(b, f, rng).named("W_FC2", "b_FC2"))
            .collect();
        let ae_up = (!dims.flags.disable_ae).then(|| Linear::new(f, d, rng));
        Ok(SfaParams {
            dims,
            ae_down,
            stack,
            reducer,
            exciters,
            ae_up,
        })
    }

    /// Same layout as [`SfaParams::new`] with every GRU weight and bias zero.
    pub fn with_zero_gru<R: Rng + ?Sized>(dims: SfaDims, rng: &mut R) -> Result<Self> {
        let mut p = Self::new(dims, rng)?;
        let (f, h) = (dims.fused_width(), dims.hidden());
        p.stack = (0..dims.branches)
            .map(|n| BiGru::zeroed(if n == 0 { dims.gru_in() } else { f }, h))
            .collect();
        Ok(p)
    }

    pub fn dims(&self) -> &SfaDims {
        &self.dims
    }

    /// Forces every exciter to share the first one's values (fresh tensors).
    pub fn tie_exciters(&mut self) {
        let first = self.exciters[0].clone();
        for e in self.exciters.iter_mut().skip(1) {
            e.weight.data_mut().copy_from_slice(first.weight.data());
            e.bias.data_mut().copy_from_slice(first.bias.data());
        }
    }
}

impl<T: Real> Params<T> for SfaParams<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        if let Some(ae) = &self.ae_down {
            ae.visit(&join(prefix, "ae_down"), f);
        }
        for (n, layer) in self.stack.iter().enumerate() {
            layer.visit(&join(prefix, &format!("gru{}", n + 1)), f);
        }
        self.reducer.visit(prefix, f);
        for (n, e) in self.exciters.iter().enumerate() {
            e.visit(&join(prefix, &format!("exciter{}", n + 1)), f);
        }
        if let Some(ae) = &self.ae_up {
            ae.visit(&join(prefix, "ae_up"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        if let Some(ae) = &mut self.ae_down {
            ae.visit_mut(&join(prefix, "ae_down"), f);
        }
        for (n, layer) in self.stack.iter_mut().enumerate() {
            layer.visit_mut(&join(prefix, &format!("gru{}", n + 1)), f);
        }
        self.reducer.visit_mut(prefix, f);
        for (n, e) in self.exciters.iter_mut().enumerate() {
            e.visit_mut(&join(prefix, &format!("exciter{}", n + 1)), f);
        }
        if let Some(ae) = &mut self.ae_up {
            ae.visit_mut(&join(prefix, "ae_up"), f);
        }
    }
}

/// Position-wise projection of `L × F_in` to `L × F_out`.
pub fn ae_project<T: Real>(tape: &mut Tape<T>, x: Var, layer: &Linear<T>) -> Result<Var> {
    let shape = tape.shape(x);
    if shape.len() != 2 || shape[1] != layer.fan_in() {
        return Err(config_err(format!(
            "projection expects L × {}, got {:?}",
            layer.fan_in(),
            shape
        )));
    }
    layer.forward(tape, x)
}

/// Stacks `N` equally shaped `L × F` branches into `N × L × F`.
pub fn fuse<T: Real>(tape: &mut Tape<T>, branches: &[Var]) -> Result<Var> {
    if branches.is_empty() {
        return Err(config_err("no branches to fuse"));
    }
    let first = tape.shape(branches[0]).to_vec();
    if first.len() != 2 {
        return Err(config_err(format!("branches must be L × F, got {first:?}")));
    }
    Ok(tape.stack(branches)?)
}

/// `1 × F` descriptor: average plus max over branches and valid positions.
pub fn squeeze<T: Real>(tape: &mut Tape<T>, fused: Var, mask: &[bool], flags: &AblationFlags) -> Result<Var> {
    flags.validate()?;
    let shape = tape.shape(fused).to_vec();
    if shape.len() != 3 {
        return Err(config_err(format!("squeeze expects N × L × F, got {shape:?}")));
    }
    let f = shape[2];
    let mut terms = Vec::with_capacity(2);
    if !flags.disable_gap {
        let m = tape.mean(fused, 1, Some(mask))?;
        terms.push(tape.mean(m, 0, None)?);
    }
    if !flags.disable_gmp {
        let m = tape.max(fused, 1, Some(mask))?;
        terms.push(tape.max(m, 0, None)?);
    }
    let s = match terms[..] {
        [one] => one,
        [a, b] => tape.add(a, b)?,
        _ => unreachable!("validated above"),
    };
    Ok(tape.reshape(s, &[1, f])?)
}

/// Shared tanh reducer followed by one sigmoid head per exciter.
pub fn excite<T: Real>(tape: &mut Tape<T>, s: Var, p: &SfaParams<T>) -> Result<Vec<Var>> {
    let f = p.dims.fused_width();
    if tape.shape(s) != [1, f] {
        return Err(config_err(format!("excite expects 1 × {f}, got {:?}", tape.shape(s))));
    }
    let h = p.reducer.forward(tape, s)?;
    let h = tape.tanh(h);
    p.exciters
        .iter()
        .map(|head| {
            let e = head.forward(tape, h)?;
            Ok(tape.sigmoid(e))
        })
        .collect()
}

/// Result of combining branches under their gates.
#[derive(Debug, Clone)]
pub struct Selection {
    /// `L × F` combined representation.
    pub output: Var,
    /// The effective per-branch coefficient on `x^(n)`, each `1 × F`. With
    /// selection these are the softmax-normalized gates; without, the single
    /// gate is repeated for every branch.
    pub weights: Vec<Var>,
}

/// Combines branches under their excitations. With `freeze`, the gates are
/// detached so that gradients reach the branches only through the direct
/// multiplicative path.
pub fn select<T: Real>(
    tape: &mut Tape<T>,
    excitations: &[Var],
    branches: &[Var],
    disable_selection: bool,
    freeze: bool,
) -> Result<Selection> {
    let n = branches.len();
    let expected = if disable_selection { 1 } else { n };
    if n == 0 || excitations.len() != expected {
        return Err(config_err(format!(
            "{} excitations for {n} branches",
            excitations.len()
        )));
    }
    let shape = tape.shape(branches[0]).to_vec();
    let f = shape[1];
    for &e in excitations {
        if tape.shape(e) != [1, f] {
            return Err(config_err(format!(
                "excitation {:?} does not match branch width {f}",
                tape.shape(e)
            )));
        }
    }
    if disable_selection {
        let mut gate = excitations[0];
        if freeze {
            gate = tape.detach(gate);
        }
        let stacked = tape.stack(branches)?;
        let total = tape.sum(stacked, 0, None)?;
        let total = tape.reshape(total, &shape)?;
        let output = tape.mul(total, gate)?;
        return Ok(Selection {
            output,
            weights: vec![gate; n],
        });
    }
    let e = tape.stack(excitations)?; // N × 1 × F
    let mut w = tape.softmax(e, 0)?;
    if freeze {
        w = tape.detach(w);
    }
    let x = tape.stack(branches)?; // N × L × F
    let weighted = tape.mul(x, w)?;
    let u = tape.sum(weighted, 0, None)?;
    let output = tape.reshape(u, &shape)?;
    let weights = (0..n)
        .map(|k| {
            let wk = tape.narrow(w, 0, k, 1)?;
            Ok(tape.reshape(wk, &[1, f])?)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Selection { output, weights })
}

/// Everything recorded by one pass of the block.
#[derive(Debug, Clone)]
pub struct SfaTrace {
    pub reduced: Var,
    pub branches: Vec<Var>,
    pub head: HeadTrace,
    pub output: Var,
}

/// The branch-consuming half of the block.
#[derive(Debug, Clone)]
pub struct HeadTrace {
    pub fused: Var,
    pub descriptor: Var,
    pub excitations: Vec<Var>,
    pub selection: Selection,
}

/// Fuse, squeeze, excite and select on externally supplied branches.
pub fn sfa_head<T: Real>(
    tape: &mut Tape<T>,
    branches: &[Var],
    mask: &[bool],
    p: &SfaParams<T>,
    freeze: bool,
) -> Result<HeadTrace> {
    if branches.len() != p.dims.branches {
        return Err(config_err(format!(
            "{} branches for a block configured with N = {}",
            branches.len(),
            p.dims.branches
        )));
    }
    let fused = fuse(tape, branches)?;
    let descriptor = squeeze(tape, fused, mask, &p.dims.flags)?;
    let excitations = excite(tape, descriptor, p)?;
    let selection = select(tape, &excitations, branches, p.dims.flags.disable_selection, freeze)?;
    Ok(HeadTrace {
        fused,
        descriptor,
        excitations,
        selection,
    })
}

pub fn sfa_trace<T: Real>(tape: &mut Tape<T>, x: Var, p: &SfaParams<T>, mask: &[bool]) -> Result<SfaTrace> {
    let shape = tape.shape(x).to_vec();
    if shape.len() != 2 || shape[1] != p.dims.dim {
        return Err(config_err(format!(
            "SFA block of width {} applied to input {shape:?}",
            p.dims.dim
        )));
    }
    if !mask.iter().any(|&m| m) {
        return Err(Error::Contract("SFA input has no valid positions".into()));
    }
    let reduced = match &p.ae_down {
        Some(ae) => ae_project(tape, x, ae)?,
        None => x,
    };
    let branches = sbigru_split(tape, reduced, &p.stack, mask)?;
    let head = sfa_head(tape, &branches, mask, p, false)?;
    let output = match &p.ae_up {
        Some(ae) => ae_project(tape, head.selection.output, ae)?,
        None => head.selection.output,
    };
    Ok(SfaTrace {
        reduced,
        branches,
        head,
        output,
    })
}

/// `L × D → L × D`.
pub fn sfa_forward<T: Real>(tape: &mut Tape<T>, x: Var, p: &SfaParams<T>, mask: &[bool]) -> Result<Var> {
    Ok(sfa_trace(tape, x, p, mask)?.output)
}
