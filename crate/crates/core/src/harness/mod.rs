//! Synthetic matching task, training, ablations, heatmaps and latency.

pub mod ablation;
pub mod config;
pub mod data;
pub mod heatmap;
pub mod latency;
pub mod run;
pub mod train;

pub use ablation::{run_ablation, AblationReport, SeedResult, VariantResult, COMPONENTS};
pub use config::{BottleneckPolicy, ExperimentConfig, LatencyConfig, OptimConfig, Precision, Seeds};
pub use data::{bow_probe, generate_dataset, Dataset, GenConfig, ProbeReport};
pub use heatmap::{export_heatmap, feature_averaged_dot, Heatmap};
pub use latency::{hardware_descriptor, measure_latency, LatencyStats};
pub use run::{
    fresh_run_dir, metrics_csv, run_experiment, run_in_memory, write_file, write_run, GradcheckSummary, ParamSummary,
    RunExtras, RunReport, RunResult, TrainedModel,
};
pub use train::{batch_gradients, evaluate, train, AdamState, EpochMetrics, TrainOutcome};
