//! `sfa`: train, evaluate and inspect feature attention matchers.
//!
//! Exit status: 0 on success, 1 when a check fails, 2 on usage or
//! configuration errors.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use log::info;
use sfa_core::blocks::{check_bottleneck, BlockKind, LogBase};
use sfa_core::gradflow::{run_gradcheck, GradcheckSettings};
use sfa_core::harness::{
    evaluate, export_heatmap, generate_dataset, run_ablation, run_experiment, write_file, ExperimentConfig,
    ParamSummary, COMPONENTS,
};
use sfa_core::matcher::{Checkpoint, ExamplePair, SiameseModel};

#[derive(Parser, Debug)]
#[command(name = "sfa", version, about = "Feature attention and selective feature attention for text matching")]
struct Cli {
    /// More progress output on stderr (repeatable).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    /// Only errors on stderr.
    #[arg(short, long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// Experiment config (JSON); defaults are used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override a config value by dotted path, e.g. `model.dim=64` (repeatable, last wins).
    #[arg(short = 's', long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output root directory.
    #[arg(short, long, env = "SFA_OUTPUT_ROOT", default_value = "runs")]
    out: PathBuf,
}

impl ConfigArgs {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p)?,
            None => ExperimentConfig::default(),
        };
        cfg.apply_overrides(&self.overrides)?;
        Ok(cfg)
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Split {
    Train,
    Dev,
    Test,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train one model and write its run directory.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Evaluate a checkpoint on a split of the configured dataset.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// checkpoint.json written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
    },
    /// Finite-difference and gradient-path checks of the configured block.
    Gradcheck {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Relative error tolerance.
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
        /// Central-difference step.
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        /// Sequence length of the random probe input.
        #[arg(long, default_value_t = 4)]
        seq_len: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train the control and each single-component ablation over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Components to disable one at a time (ae, gmp, gap, selection).
        #[arg(long, value_delimiter = ',', default_values_t = COMPONENTS.map(String::from))]
        components: Vec<String>,
        /// Seeds per variant.
        #[arg(long, value_delimiter = ',', default_values_t = [0u64, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Word-level interaction map of one pair as CSV.
    Heatmap {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Take the pair from this split of the configured dataset.
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Index of the pair in the split.
        #[arg(long, default_value_t = 0)]
        index: usize,
        /// Token ids of side a (comma separated); with --b replaces the split pair.
        #[arg(long, value_delimiter = ',', requires = "b")]
        a: Vec<usize>,
        /// Token ids of side b (comma separated).
        #[arg(long, value_delimiter = ',', requires = "a")]
        b: Vec<usize>,
    },
    /// Evaluate the bottleneck rule and print each term's margin.
    BottleneckCheck {
        /// Feature width.
        #[arg(long = "D")]
        dim: usize,
        /// FA reduction ratio.
        #[arg(long)]
        r: Option<usize>,
        /// SFA down-projection ratio.
        #[arg(long)]
        r1: Option<usize>,
        /// SFA excitation ratio.
        #[arg(long)]
        r2: Option<usize>,
        /// Sequence length.
        #[arg(long = "L")]
        seq_len: usize,
        /// Logarithm base: e, 2 or 10.
        #[arg(long, default_value = "e")]
        log_base: String,
    },
    /// Parameter counts of the configured base model and block.
    ParamCount {
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

enum Status {
    Ok,
    ChecksFailed,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => log::LevelFilter::Error,
        (_, 0) => log::LevelFilter::Warn,
        (_, 1) => log::LevelFilter::Info,
        _ => log::LevelFilter::Debug,
    };
    env_logger::Builder::new().filter_level(level).format_timestamp(None).init();
    match dispatch(cli.command) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::ChecksFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::load(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

fn pick(data: &sfa_core::harness::Dataset, split: Split) -> &[ExamplePair] {
    match split {
        Split::Train => &data.train,
        Split::Dev => &data.dev,
        Split::Test => &data.test,
    }
}

fn dispatch(cmd: Command) -> Result<Status> {
    match cmd {
        Command::Train { cfg } => {
            let c = cfg.load()?;
            let rep = c.bottleneck_report();
            if c.model.block.kind == BlockKind::Sfa && !rep.pass && !c.bottleneck.override_check {
                eprintln!("{rep}");
                eprintln!("bottleneck rule fails and bottleneck.override is false");
                return Ok(Status::ChecksFailed);
            }
            c.validate()?;
            info!("training {:?} block, config {}", c.model.block.kind, c.hash());
            let (dir, res) = run_experiment(&c, &cfg.out)?;
            info!("test accuracy {:.4}", res.report.test_accuracy);
            println!("{}", dir.display());
            Ok(Status::Ok)
        }
        Command::Eval { cfg, checkpoint, split } => {
            let c = cfg.load()?;
            c.validate()?;
            let ck = load_checkpoint(&checkpoint)?;
            let data = generate_dataset(&c.data)?;
            let pairs = pick(&data, split);
            let (loss, acc) = match ck.precision.as_str() {
                "f32" => evaluate(&ck.restore::<f32>()?, pairs)?,
                _ => evaluate(&ck.restore::<f64>()?, pairs)?,
            };
            let report = serde_json::json!({
                "checkpoint": checkpoint.display().to_string(),
                "split": format!("{split:?}").to_lowercase(),
                "pairs": pairs.len(),
                "loss": loss,
                "accuracy": acc,
            });
            ensure_dir(&cfg.out)?;
            let path = cfg.out.join("eval.json");
            write_file(&path, serde_json::to_string_pretty(&report)?)?;
            info!("accuracy {acc:.4}, loss {loss:.4}");
            println!("{}", path.display());
            Ok(Status::Ok)
        }
        Command::Gradcheck {
            cfg,
            tol,
            eps,
            seq_len,
            seed,
        } => {
            let c = cfg.load()?;
            c.model.block.validate(c.model.dim)?;
            if c.model.block.kind == BlockKind::None {
                bail!("gradcheck needs an fa or sfa block");
            }
            let settings = GradcheckSettings { seq_len, seed, eps, tol };
            let rep = run_gradcheck(&c.model.block, c.model.dim, &settings)?;
            ensure_dir(&cfg.out)?;
            let path = cfg.out.join("gradcheck.json");
            write_file(&path, serde_json::to_string_pretty(&rep)?)?;
            for f in &rep.finite_difference {
                info!("{}: max rel err {:.3e}", f.label, f.max_rel_err);
            }
            println!("{}", path.display());
            if rep.pass {
                Ok(Status::Ok)
            } else {
                eprintln!("gradient check failed at tolerance {tol:e}");
                Ok(Status::ChecksFailed)
            }
        }
        Command::Ablate { cfg, components, seeds } => {
            let c = cfg.load()?;
            c.validate()?;
            info!("{} variants x {} seeds", components.len() + 1, seeds.len());
            let rep = run_ablation(&c, &components, &seeds)?;
            let dir = cfg.out.join(format!("ablation-{}", c.hash()));
            ensure_dir(&dir)?;
            rep.write(&dir)?;
            println!("{}", dir.display());
            Ok(Status::Ok)
        }
        Command::Heatmap {
            cfg,
            checkpoint,
            split,
            index,
            a,
            b,
        } => {
            let c = cfg.load()?;
            c.validate()?;
            let ck = load_checkpoint(&checkpoint)?;
            let pair = if a.is_empty() {
                let data = generate_dataset(&c.data)?;
                let pairs = pick(&data, split);
                pairs
                    .get(index)
                    .cloned()
                    .ok_or_else(|| anyhow!("index {index} out of range for {} pairs", pairs.len()))?
            } else {
                ExamplePair {
                    tokens_a: a,
                    tokens_b: b,
                    label: 0,
                }
            };
            let name = |t| c.data.token_name(t);
            let map = match ck.precision.as_str() {
                "f32" => export_heatmap(&ck.restore::<f32>()?, &pair, name)?,
                _ => export_heatmap(&ck.restore::<f64>()?, &pair, name)?,
            };
            ensure_dir(&cfg.out)?;
            let path = cfg.out.join("heatmap.csv");
            map.write(&path)?;
            println!("{}", path.display());
            Ok(Status::Ok)
        }
        Command::BottleneckCheck {
            dim,
            r,
            r1,
            r2,
            seq_len,
            log_base,
        } => {
            let base: LogBase = log_base.parse()?;
            if r.is_none() && r1.is_none() && r2.is_none() {
                bail!("give at least one of --r, --r1, --r2");
            }
            let rep = check_bottleneck(dim, r, r1, r2, seq_len, base);
            eprintln!("{rep}");
            Ok(if rep.pass { Status::Ok } else { Status::ChecksFailed })
        }
        Command::ParamCount { cfg } => {
            let c = cfg.load()?;
            c.validate()?;
            let summary = ParamSummary::of(&c)?;
            let model = SiameseModel::<f32>::new(c.model, c.seeds.init)?;
            if model.block_param_count() != summary.added || model.base_param_count() != summary.base {
                bail!("instantiated parameter count disagrees with the closed form");
            }
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(Status::Ok)
        }
    }
}
