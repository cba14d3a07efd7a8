//! One end-to-end run: data, training, evaluation, accounting and artifacts.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sfa_tensor::Real;

use super::config::{ExperimentConfig, Precision};
use super::data::{generate_dataset, Dataset};
use super::heatmap::csv_err;
use super::latency::{measure_latency, LatencyStats};
use super::train::{evaluate, train, EpochMetrics, TrainOutcome};
use crate::blocks::{count_params, BottleneckReport, ParamCount};
use crate::error::{Error, Result};
use crate::gradflow::{run_gradcheck, GradFlowReport, GradcheckSettings};
use crate::matcher::{Checkpoint, SiameseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSummary {
    pub base: usize,
    /// Both blocks together.
    pub added: usize,
    /// `100 · added / base`.
    pub added_percent: f64,
    /// One block.
    pub per_block: ParamCount,
}

impl ParamSummary {
    pub fn of(cfg: &ExperimentConfig) -> Result<Self> {
        let base = cfg.model.base_count();
        let per_block = count_params(&cfg.model.block, cfg.model.dim)?;
        let added = 2 * per_block.total;
        Ok(ParamSummary {
            base,
            added,
            added_percent: 100.0 * added as f64 / base as f64,
            per_block,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckSummary {
    pub pass: bool,
    pub max_rel_err: f64,
    pub spread: Option<f64>,
}

impl From<&GradFlowReport> for GradcheckSummary {
    fn from(r: &GradFlowReport) -> Self {
        GradcheckSummary {
            pass: r.pass,
            max_rel_err: r.finite_difference.iter().map(|f| f.max_rel_err).fold(0.0, f64::max),
            spread: r.spread,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub config: ExperimentConfig,
    pub config_hash: String,
    pub epochs: Vec<EpochMetrics>,
    pub best_epoch: usize,
    pub initial_dev_acc: f64,
    pub stopped_early: bool,
    pub aborted: Option<String>,
    pub test_loss: f64,
    pub test_accuracy: f64,
    pub params: ParamSummary,
    pub bottleneck: BottleneckReport,
    pub latency: Option<LatencyStats>,
    pub gradcheck: Option<GradcheckSummary>,
    pub wall_clock_s: f64,
}

/// Extras that cost time and are optional for bulk experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RunExtras {
    pub latency: bool,
    pub gradcheck: bool,
}

impl RunExtras {
    pub const ALL: RunExtras = RunExtras {
        latency: true,
        gradcheck: true,
    };
    pub const NONE: RunExtras = RunExtras {
        latency: false,
        gradcheck: false,
    };
}

/// A trained model in either precision.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    F32(SiameseModel<f32>),
    F64(SiameseModel<f64>),
}

impl TrainedModel {
    pub fn checkpoint(&self) -> Checkpoint {
        match self {
            TrainedModel::F32(m) => Checkpoint::capture(m),
            TrainedModel::F64(m) => Checkpoint::capture(m),
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: RunReport,
    /// Full gradient-flow report behind `report.gradcheck`.
    pub gradflow: Option<GradFlowReport>,
    pub model: TrainedModel,
    pub data: Dataset,
}

fn run_typed<T: Real>(
    cfg: &ExperimentConfig,
    data: &Dataset,
    extras: RunExtras,
) -> Result<(RunReport, Option<GradFlowReport>, SiameseModel<T>)> {
    let t0 = Instant::now();
    let TrainOutcome {
        model,
        history,
        best_epoch,
        initial_dev_acc,
        stopped_early,
        aborted,
    } = train::<T>(cfg, data)?;
    let (test_loss, test_accuracy) = evaluate(&model, &data.test)?;
    let latency = if extras.latency {
        let l = cfg.latency;
        let pairs = &data.test[..l.pairs.min(data.test.len())];
        Some(measure_latency(&model, pairs, l.repeats, l.warmup)?)
    } else {
        None
    };
    let gradflow = if extras.gradcheck {
        let settings = GradcheckSettings {
            seed: cfg.seeds.init,
            ..Default::default()
        };
        Some(run_gradcheck(&cfg.model.block, cfg.model.dim, &settings)?)
    } else {
        None
    };
    let gradcheck = gradflow.as_ref().map(GradcheckSummary::from);
    let report = RunReport {
        config: *cfg,
        config_hash: cfg.hash(),
        epochs: history,
        best_epoch,
        initial_dev_acc,
        stopped_early,
        aborted,
        test_loss,
        test_accuracy,
        params: ParamSummary::of(cfg)?,
        bottleneck: cfg.bottleneck_report(),
        latency,
        gradcheck,
        wall_clock_s: t0.elapsed().as_secs_f64(),
    };
    Ok((report, gradflow, model))
}

/// Trains and evaluates without touching the filesystem.
pub fn run_in_memory(cfg: &ExperimentConfig, extras: RunExtras) -> Result<RunResult> {
    cfg.validate()?;
    let mut gen = cfg.data;
    gen.seed = cfg.seeds.data;
    let data = generate_dataset(&gen)?;
    let (report, gradflow, model) = match cfg.precision {
        Precision::F32 => {
            let (r, g, m) = run_typed::<f32>(cfg, &data, extras)?;
            (r, g, TrainedModel::F32(m))
        }
        Precision::F64 => {
            let (r, g, m) = run_typed::<f64>(cfg, &data, extras)?;
            (r, g, TrainedModel::F64(m))
        }
    };
    Ok(RunResult {
        report,
        gradflow,
        model,
        data,
    })
}

pub fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// `<root>/<config hash>-<UTC timestamp>`, suffixed when taken.
pub fn fresh_run_dir(root: &Path, cfg: &ExperimentConfig) -> Result<PathBuf> {
    let stamp = chrono::Utc::now().format("%Y%m%dT%H%M%SZ");
    let base = format!("{}-{stamp}", cfg.hash());
    let mut dir = root.join(&base);
    let mut k = 1;
    while dir.exists() {
        dir = root.join(format!("{base}-{k}"));
        k += 1;
    }
    create_dir(&dir)?;
    Ok(dir)
}

pub fn metrics_csv(epochs: &[EpochMetrics]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["epoch", "train_loss", "dev_loss", "dev_acc"]).map_err(csv_err)?;
    for e in epochs {
        w.write_record([
            e.epoch.to_string(),
            e.train_loss.to_string(),
            e.dev_loss.to_string(),
            e.dev_acc.to_string(),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Config(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

/// Writes `config.json`, `metrics.csv`, `report.json`, `checkpoint.json` and,
/// when the check ran, `gradcheck.json` into `dir`.
pub fn write_run(dir: &Path, result: &RunResult) -> Result<()> {
    let r = &result.report;
    write_file(&dir.join("config.json"), r.config.to_json())?;
    write_file(&dir.join("metrics.csv"), metrics_csv(&r.epochs)?)?;
    write_file(&dir.join("report.json"), serde_json::to_string_pretty(r)?)?;
    if let Some(g) = &result.gradflow {
        write_file(&dir.join("gradcheck.json"), serde_json::to_string_pretty(g)?)?;
    }
    result.model.checkpoint().save(&dir.join("checkpoint.json"))
}

/// Full run with all extras, written to a fresh directory under `root`.
pub fn run_experiment(cfg: &ExperimentConfig, root: &Path) -> Result<(PathBuf, RunResult)> {
    let result = run_in_memory(cfg, RunExtras::ALL)?;
    let dir = fresh_run_dir(root, cfg)?;
    write_run(&dir, &result)?;
    Ok((dir, result))
}
