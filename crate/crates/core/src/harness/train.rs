//! Mini-batch Adam training with best-dev model selection.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::{Gradients, Real, Tape};

use super::config::{ExperimentConfig, OptimConfig};
use super::data::Dataset;
use crate::error::Result;
use crate::matcher::{argmax, cross_entropy, ExamplePair, ForwardOptions, SiameseModel};
use crate::params::Params;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_loss: f64,
    pub dev_loss: f64,
    pub dev_acc: f64,
}

/// First and second moment estimates, one buffer per parameter in visit
/// order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
    step: i32,
}

impl<T: Real> AdamState<T> {
    pub fn new<P: Params<T>>(model: &P) -> Self {
        let shapes: Vec<usize> = model.named_params("").iter().map(|(_, t)| t.numel()).collect();
        AdamState {
            m: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            v: shapes.iter().map(|&n| vec![T::zero(); n]).collect(),
            step: 0,
        }
    }

    /// One bias-corrected Adam update. Parameters the loss never reached get
    /// a zero gradient.
    pub fn step<P: Params<T>>(&mut self, model: &mut P, grads: &Gradients<T>, o: &OptimConfig) {
        self.step += 1;
        let (b1, b2) = (T::of(o.beta1), T::of(o.beta2));
        let c1 = T::one() - b1.powi(self.step);
        let c2 = T::one() - b2.powi(self.step);
        let (lr, eps) = (T::of(o.lr), T::of(o.eps));
        let mut k = 0;
        let (ms, vs) = (&mut self.m, &mut self.v);
        model.visit_mut("", &mut |_, p| {
            let g = grads.wrt(p);
            let (m, v) = (&mut ms[k], &mut vs[k]);
            k += 1;
            for (i, x) in p.data_mut().iter_mut().enumerate() {
                let gi = g.map_or(T::zero(), |g| g[i]);
                m[i] = b1 * m[i] + (T::one() - b1) * gi;
                v[i] = b2 * v[i] + (T::one() - b2) * gi * gi;
                let mh = m[i] / c1;
                let vh = v[i] / c2;
                *x = *x - lr * mh / (vh.sqrt() + eps);
            }
        });
    }
}

/// Mean cross-entropy over `batch` and its gradients.
pub fn batch_gradients<T: Real>(
    model: &SiameseModel<T>,
    batch: &[&ExamplePair],
    opts: ForwardOptions,
) -> Result<(f64, Gradients<T>)> {
    let mut tape = Tape::new();
    let mut losses = Vec::with_capacity(batch.len());
    for pair in batch {
        let trace = model.forward_pair(&mut tape, pair, opts)?;
        losses.push(cross_entropy(&mut tape, trace.logits, pair.label)?);
    }
    let all = tape.concat(&losses, 0)?;
    let total = tape.sum_all(all);
    let mean = tape.scale(total, T::one() / T::of(batch.len() as f64));
    let loss = tape.item(mean).as_f64();
    Ok((loss, tape.backward(mean)?))
}

/// Mean loss and accuracy.
pub fn evaluate<T: Real>(model: &SiameseModel<T>, pairs: &[ExamplePair]) -> Result<(f64, f64)> {
    let mut loss = 0.0;
    let mut right = 0usize;
    for pair in pairs {
        let probs = model.probabilities(pair)?;
        loss -= probs[pair.label].as_f64().max(f64::MIN_POSITIVE).ln();
        if argmax(&probs) == pair.label {
            right += 1;
        }
    }
    let n = pairs.len().max(1) as f64;
    Ok((loss / n, right as f64 / n))
}

#[derive(Debug, Clone)]
pub struct TrainOutcome<T> {
    /// Parameters from the epoch with the lowest dev loss.
    pub model: SiameseModel<T>,
    pub history: Vec<EpochMetrics>,
    /// 0 means the untrained initialization was never beaten.
    pub best_epoch: usize,
    pub initial_dev_acc: f64,
    pub stopped_early: bool,
    pub aborted: Option<String>,
}

pub fn train<T: Real>(cfg: &ExperimentConfig, data: &Dataset) -> Result<TrainOutcome<T>> {
    let mut model = SiameseModel::<T>::new(cfg.model, cfg.seeds.init)?;
    let o = cfg.optim;
    let mut adam = AdamState::new(&model);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seeds.shuffle);
    let mut order: Vec<usize> = (0..data.train.len()).collect();

    let (init_loss, initial_dev_acc) = evaluate(&model, &data.dev)?;
    let mut best = (init_loss, 0usize, model.clone());
    let mut history = Vec::new();
    let mut stale = 0;
    let mut aborted = None;
    let mut stopped_early = false;

    'epochs: for epoch in 1..=o.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (b, chunk) in order.chunks(o.batch_size).enumerate() {
            let batch: Vec<&ExamplePair> = chunk.iter().map(|&i| &data.train[i]).collect();
            let (loss, grads) = batch_gradients(&model, &batch, ForwardOptions::default())?;
            if !loss.is_finite() {
                aborted = Some(format!("non-finite training loss at epoch {epoch}, batch {}", b + 1));
                break 'epochs;
            }
            sum += loss * batch.len() as f64;
            adam.step(&mut model, &grads, &o);
        }
        let train_loss = sum / order.len() as f64;
        let (dev_loss, dev_acc) = evaluate(&model, &data.dev)?;
        history.push(EpochMetrics {
            epoch,
            train_loss,
            dev_loss,
            dev_acc,
        });
        if !dev_loss.is_finite() {
            aborted = Some(format!("non-finite dev loss at epoch {epoch}"));
            break;
        }
        if dev_loss < best.0 {
            best = (dev_loss, epoch, model.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= o.patience {
                stopped_early = epoch < o.epochs;
                break;
            }
        }
    }
    Ok(TrainOutcome {
        model: best.2,
        history,
        best_epoch: best.1,
        initial_dev_acc,
        stopped_early,
        aborted,
    })
}
