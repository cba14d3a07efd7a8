//! Shape-preserving `L × D → L × D` feature blocks and their building parts.

pub mod fa;
pub mod gru;
pub mod linear;
pub mod sfa;

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::{Real, Tape, Tensor, Var};

pub use fa::{fa_forward, FaParams};
pub use gru::{sbigru_split, BiGru, GruCell};
pub use linear::Linear;
pub use sfa::{
    ae_project, excite, fuse, select, sfa_forward, sfa_head, sfa_trace, squeeze, AblationFlags, HeadTrace,
    Selection, SfaDims, SfaParams, SfaTrace,
};

use crate::error::{config_err, Result};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    None,
    Fa,
    Sfa,
}

impl fmt::Display for BlockKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BlockKind::None => "none",
            BlockKind::Fa => "fa",
            BlockKind::Sfa => "sfa",
        })
    }
}

impl FromStr for BlockKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(BlockKind::None),
            "fa" => Ok(BlockKind::Fa),
            "sfa" => Ok(BlockKind::Sfa),
            other => Err(config_err(format!("unknown block kind `{other}` (none|fa|sfa)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BlockConfig {
    pub kind: BlockKind,
    /// FA reduction ratio.
    pub r: usize,
    pub r1: usize,
    pub r2: usize,
    /// SFA branch count `N`.
    pub branches: usize,
    pub ablation: AblationFlags,
}

impl Default for BlockConfig {
    fn default() -> Self {
        BlockConfig {
            kind: BlockKind::Sfa,
            r: 1,
            r1: 4,
            r2: 1,
            branches: 2,
            ablation: AblationFlags::default(),
        }
    }
}

impl BlockConfig {
    pub fn none() -> Self {
        BlockConfig {
            kind: BlockKind::None,
            ..Default::default()
        }
    }

    pub fn fa(r: usize) -> Self {
        BlockConfig {
            kind: BlockKind::Fa,
            r,
            ..Default::default()
        }
    }

    pub fn sfa(r1: usize, r2: usize, branches: usize) -> Self {
        BlockConfig {
            kind: BlockKind::Sfa,
            r1,
            r2,
            branches,
            ..Default::default()
        }
    }

    pub fn with_ablation(mut self, flags: AblationFlags) -> Self {
        self.ablation = flags;
        self
    }

    pub fn sfa_dims(&self, dim: usize) -> SfaDims {
        SfaDims::new(dim, self.r1, self.r2, self.branches).with_flags(self.ablation)
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        match self.kind {
            BlockKind::None => Ok(()),
            BlockKind::Fa => FaParams::<f64>::bottleneck_width(dim, self.r).map(|_| ()),
            BlockKind::Sfa => self.sfa_dims(dim).validate(),
        }
    }
}

/// Closed-form parameter count of one block.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    pub total: usize,
    pub by_component: Vec<(String, usize)>,
}

pub fn count_params(cfg: &BlockConfig, dim: usize) -> Result<ParamCount> {
    let by_component = match cfg.kind {
        BlockKind::None => Vec::new(),
        BlockKind::Fa => {
            let b = FaParams::<f64>::bottleneck_width(dim, cfg.r)?;
            vec![
                ("fc1".to_string(), Linear::<f64>::count(dim, b)),
                ("fc2".to_string(), Linear::<f64>::count(b, dim)),
            ]
        }
        BlockKind::Sfa => cfg.sfa_dims(dim).count_by_component()?,
    };
    Ok(ParamCount {
        total: by_component.iter().map(|(_, n)| n).sum(),
        by_component,
    })
}

/// A block instance; one per Siamese branch.
#[derive(Debug, Clone)]
pub enum FeatureBlock<T> {
    None,
    Fa(FaParams<T>),
    Sfa(SfaParams<T>),
}

impl<T: Real> FeatureBlock<T> {
    pub fn new<R: Rng + ?Sized>(cfg: &BlockConfig, dim: usize, rng: &mut R) -> Result<Self> {
        cfg.validate(dim)?;
        Ok(match cfg.kind {
            BlockKind::None => FeatureBlock::None,
            BlockKind::Fa => FeatureBlock::Fa(FaParams::new(dim, cfg.r, rng)?),
            BlockKind::Sfa => FeatureBlock::Sfa(SfaParams::new(cfg.sfa_dims(dim), rng)?),
        })
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            FeatureBlock::None => BlockKind::None,
            FeatureBlock::Fa(_) => BlockKind::Fa,
            FeatureBlock::Sfa(_) => BlockKind::Sfa,
        }
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
        match self {
            FeatureBlock::None => Ok(x),
            FeatureBlock::Fa(p) => fa_forward(tape, x, p, mask),
            FeatureBlock::Sfa(p) => sfa_forward(tape, x, p, mask),
        }
    }
}

impl<T: Real> Params<T> for FeatureBlock<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        match self {
            FeatureBlock::None => {}
            FeatureBlock::Fa(p) => p.visit(prefix, f),
            FeatureBlock::Sfa(p) => p.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        match self {
            FeatureBlock::None => {}
            FeatureBlock::Fa(p) => p.visit_mut(prefix, f),
            FeatureBlock::Sfa(p) => p.visit_mut(prefix, f),
        }
    }
}

/// The 8.33 constant of the bottleneck rule.
pub const BOTTLENECK_COEFF: f64 = 8.33;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum LogBase {
    #[default]
    #[serde(rename = "e")]
    Natural,
    #[serde(rename = "2")]
    Two,
    #[serde(rename = "10")]
    Ten,
}

impl LogBase {
    pub fn log(self, x: f64) -> f64 {
        match self {
            LogBase::Natural => x.ln(),
            LogBase::Two => x.log2(),
            LogBase::Ten => x.log10(),
        }
    }
}

impl FromStr for LogBase {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "e" | "ln" | "natural" => Ok(LogBase::Natural),
            "2" => Ok(LogBase::Two),
            "10" => Ok(LogBase::Ten),
            other => Err(config_err(format!("unknown log base `{other}` (e|2|10)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckTerm {
    pub name: String,
    pub value: f64,
    /// `value − threshold`; positive means the term passes.
    pub margin: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BottleneckReport {
    pub seq_len: usize,
    pub log_base: LogBase,
    pub threshold: f64,
    pub terms: Vec<BottleneckTerm>,
    pub pass: bool,
}

impl fmt::Display for BottleneckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "threshold 8.33*log(L={}) = {:.4}", self.seq_len, self.threshold)?;
        for t in &self.terms {
            writeln!(
                f,
                "  {:<14} {:>10.4}  margin {:>+10.4}  {}",
                t.name,
                t.value,
                t.margin,
                if t.pass { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "overall: {}", if self.pass { "pass" } else { "FAIL" })
    }
}

/// Checks `D/r`, `2D/r1` and `2D/(r1·r2)` against `8.33·log L`. Terms whose
/// ratio is not given are skipped.
pub fn check_bottleneck(
    dim: usize,
    r: Option<usize>,
    r1: Option<usize>,
    r2: Option<usize>,
    seq_len: usize,
    base: LogBase,
) -> BottleneckReport {
    let threshold = BOTTLENECK_COEFF * base.log(seq_len.max(1) as f64);
    let d = dim as f64;
    let mut quantities = Vec::new();
    if let Some(r) = r {
        quantities.push(("D/r", d / r as f64));
    }
    if let Some(r1) = r1 {
        quantities.push(("2D/r1", 2.0 * d / r1 as f64));
        if let Some(r2) = r2 {
            quantities.push(("2D/(r1*r2)", 2.0 * d / (r1 * r2) as f64));
        }
    }
    let terms: Vec<BottleneckTerm> = quantities
        .into_iter()
        .map(|(name, value)| BottleneckTerm {
            name: name.to_string(),
            value,
            margin: value - threshold,
            pass: value > threshold,
        })
        .collect();
    BottleneckReport {
        seq_len,
        log_base: base,
        threshold,
        pass: terms.iter().all(|t| t.pass),
        terms,
    }
}

/// The bottleneck check that applies to a block configuration.
pub fn check_block_bottleneck(cfg: &BlockConfig, dim: usize, seq_len: usize, base: LogBase) -> BottleneckReport {
    match cfg.kind {
        BlockKind::None => check_bottleneck(dim, None, None, None, seq_len, base),
        BlockKind::Fa => check_bottleneck(dim, Some(cfg.r), None, None, seq_len, base),
        BlockKind::Sfa => check_bottleneck(dim, None, Some(cfg.r1), Some(cfg.r2), seq_len, base),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn block_kind_round_trip() {
        for k in [BlockKind::None, BlockKind::Fa, BlockKind::Sfa] {
            assert_eq!(k.to_string().parse::<BlockKind>().unwrap(), k);
        }
        assert!("lstm".parse::<BlockKind>().is_err());
    }

    #[test]
    fn block_config_rejects_unknown_fields() {
        let bad = r#"{"kind":"fa","rr":2}"#;
        assert!(serde_json::from_str::<BlockConfig>(bad).is_err());
        let ok: BlockConfig = serde_json::from_str(r#"{"kind":"fa","r":2}"#).unwrap();
        assert_eq!(ok.r, 2);
    }

    #[test]
    fn none_block_has_no_terms() {
        let rep = check_block_bottleneck(&BlockConfig::none(), 32, 12, LogBase::Natural);
        assert!(rep.pass && rep.terms.is_empty());
    }
}
