//! Wall-clock inference latency per sentence pair.

use std::time::Instant;

use serde::{Deserialize, Serialize};
use sfa_tensor::Real;

use crate::error::{config_err, Result};
use crate::matcher::{ExamplePair, SiameseModel};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyStats {
    pub pairs: usize,
    pub repeats: usize,
    pub warmup: usize,
    pub median_ms: f64,
    pub mean_ms: f64,
    pub min_ms: f64,
    pub max_ms: f64,
    pub hardware: String,
}

/// CPU model, core count, OS and architecture.
pub fn hardware_descriptor() -> String {
    let cpu = std::fs::read_to_string("/proc/cpuinfo")
        .ok()
        .and_then(|s| {
            s.lines()
                .find(|l| l.starts_with("model name"))
                .and_then(|l| l.split_once(':'))
                .map(|(_, v)| v.trim().to_string())
        })
        .unwrap_or_else(|| "unknown cpu".to_string());
    let cores = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{cpu}; {cores} logical cores; {}-{}",
        std::env::consts::OS,
        std::env::consts::ARCH
    )
}

/// Times `repeats` passes over `pairs` after `warmup` untimed predictions.
pub fn measure_latency<T: Real>(
    model: &SiameseModel<T>,
    pairs: &[ExamplePair],
    repeats: usize,
    warmup: usize,
) -> Result<LatencyStats> {
    if pairs.is_empty() || repeats == 0 {
        return Err(config_err("latency needs at least one pair and one repeat"));
    }
    for pair in pairs.iter().cycle().take(warmup) {
        std::hint::black_box(model.probabilities(pair)?);
    }
    let mut samples = Vec::with_capacity(pairs.len() * repeats);
    for _ in 0..repeats {
        for pair in pairs {
            let t0 = Instant::now();
            std::hint::black_box(model.probabilities(pair)?);
            samples.push(t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    samples.sort_by(f64::total_cmp);
    let n = samples.len();
    let median_ms = if n % 2 == 1 {
        samples[n / 2]
    } else {
        0.5 * (samples[n / 2 - 1] + samples[n / 2])
    };
    Ok(LatencyStats {
        pairs: pairs.len(),
        repeats,
        warmup,
        median_ms,
        mean_ms: samples.iter().sum::<f64>() / n as f64,
        min_ms: samples[0],
        max_ms: samples[n - 1],
        hardware: hardware_descriptor(),
    })
}
