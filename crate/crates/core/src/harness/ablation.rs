//! One training run per removed SFA component plus the full-block control,
//! all on the same seeds.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::Tensor;

use super::config::{ExperimentConfig, Seeds};
use super::heatmap::csv_err;
use super::run::{run_in_memory, write_file, RunExtras, TrainedModel};
use super::train::EpochMetrics;
use crate::blocks::{AblationFlags, BlockKind, FeatureBlock, SfaParams};
use crate::error::{config_err, Error, Result};
use crate::gradflow::coefficient_spread;

pub const COMPONENTS: [&str; 4] = ["ae", "gmp", "gap", "selection"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub test_accuracy: f64,
    /// Direct-coefficient spread of the trained `block_x`.
    pub spread: f64,
    pub epochs: Vec<EpochMetrics>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VariantResult {
    /// `control` or the removed component.
    pub name: String,
    pub flags: AblationFlags,
    pub mean_test_accuracy: f64,
    /// Relative to the control, in accuracy points (×100).
    pub delta_points: f64,
    pub mean_spread: f64,
    pub seeds: Vec<SeedResult>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub variants: Vec<VariantResult>,
}

fn sfa_params(model: &TrainedModel) -> Option<SfaParams<f64>> {
    let cast = |p: &FeatureBlock<_>| match p {
        FeatureBlock::Sfa(p) => Some(p.clone()),
        _ => None,
    };
    match model {
        TrainedModel::F64(m) => cast(&m.block_x),
        TrainedModel::F32(m) => {
            let p = match &m.block_x {
                FeatureBlock::Sfa(p) => p,
                _ => return None,
            };
            let mut q = SfaParams::<f64>::new(*p.dims(), &mut ChaCha8Rng::seed_from_u64(0)).ok()?;
            let values: Vec<Tensor<f64>> = crate::params::Params::named_params(p, "")
                .into_iter()
                .map(|(_, t)| t.cast())
                .collect();
            let mut it = values.iter();
            crate::params::Params::visit_mut(&mut q, "", &mut |_, t| {
                t.data_mut().copy_from_slice(it.next().expect("same layout").data())
            });
            Some(q)
        }
    }
}

/// Spread on a fixed probe input of length 4.
fn trained_spread(model: &TrainedModel, dim: usize) -> Result<f64> {
    let p = sfa_params(model).ok_or_else(|| config_err("ablation needs an SFA block"))?;
    let x = Tensor::uniform(&[4, dim], -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(7));
    coefficient_spread(&p, &x, &[true; 4])
}

pub fn run_ablation(cfg: &ExperimentConfig, components: &[String], seeds: &[u64]) -> Result<AblationReport> {
    if cfg.model.block.kind != BlockKind::Sfa {
        return Err(config_err("ablations apply to the SFA block"));
    }
    if seeds.is_empty() {
        return Err(config_err("ablation needs at least one seed"));
    }
    let mut variants = vec![("control".to_string(), cfg.model.block.ablation)];
    for c in components {
        let flags = cfg.model.block.ablation.with_disabled(c)?;
        flags.validate()?;
        variants.push((c.clone(), flags));
    }
    let mut results: Vec<VariantResult> = Vec::new();
    for (name, flags) in variants {
        let mut seed_results = Vec::new();
        for &seed in seeds {
            let mut run_cfg = *cfg;
            run_cfg.model.block.ablation = flags;
            run_cfg.seeds = Seeds::all(seed);
            let res = run_in_memory(&run_cfg, RunExtras::NONE)?;
            seed_results.push(SeedResult {
                seed,
                test_accuracy: res.report.test_accuracy,
                spread: trained_spread(&res.model, cfg.model.dim)?,
                epochs: res.report.epochs,
            });
        }
        let n = seed_results.len() as f64;
        let mean_test_accuracy = seed_results.iter().map(|s| s.test_accuracy).sum::<f64>() / n;
        let mean_spread = seed_results.iter().map(|s| s.spread).sum::<f64>() / n;
        let control = results.first().map_or(mean_test_accuracy, |c| c.mean_test_accuracy);
        results.push(VariantResult {
            name,
            flags,
            mean_test_accuracy,
            delta_points: 100.0 * (mean_test_accuracy - control),
            mean_spread,
            seeds: seed_results,
        });
    }
    Ok(AblationReport { variants: results })
}

impl AblationReport {
    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["variant", "mean_test_acc", "delta_points", "mean_spread", "seeds"])
            .map_err(csv_err)?;
        for v in &self.variants {
            w.write_record([
                v.name.clone(),
                v.mean_test_accuracy.to_string(),
                v.delta_points.to_string(),
                v.mean_spread.to_string(),
                v.seeds.len().to_string(),
            ])
            .map_err(csv_err)?;
        }
        finish(w)
    }

    /// Loss-curve series of one variant: every seed's epochs.
    pub fn series_csv(v: &VariantResult) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["seed", "epoch", "train_loss", "dev_loss", "dev_acc"])
            .map_err(csv_err)?;
        for s in &v.seeds {
            for e in &s.epochs {
                w.write_record([
                    s.seed.to_string(),
                    e.epoch.to_string(),
                    e.train_loss.to_string(),
                    e.dev_loss.to_string(),
                    e.dev_acc.to_string(),
                ])
                .map_err(csv_err)?;
            }
        }
        finish(w)
    }

    /// Writes `ablation.json`, `ablation_summary.csv` and one
    /// `series_<variant>.csv` per variant. Returns the series paths.
    pub fn write(&self, dir: &Path) -> Result<Vec<std::path::PathBuf>> {
        write_file(&dir.join("ablation.json"), serde_json::to_string_pretty(self)?)?;
        write_file(&dir.join("ablation_summary.csv"), self.summary_csv()?)?;
        let mut paths = Vec::new();
        for v in &self.variants {
            let p = dir.join(format!("series_{}.csv", v.name));
            write_file(&p, Self::series_csv(v)?)?;
            paths.push(p);
        }
        Ok(paths)
    }
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}
