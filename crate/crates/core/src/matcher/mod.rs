//! Reference Siamese matcher: shared embedding and contextual encoder, soft
//! alignment between the two sentences, a per-sentence feature block, and a
//! pooled MLP classifier.

mod checkpoint;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sfa_tensor::{Real, Tape, Tensor, Var};

pub use checkpoint::{Checkpoint, StoredTensor, CHECKPOINT_FORMAT, CHECKPOINT_VERSION};

use crate::blocks::{count_params, BiGru, BlockConfig, FeatureBlock, Linear};
use crate::error::{config_err, Error, Result};
use crate::params::{join, Params};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Embedding width `D`.
    pub dim: usize,
    pub vocab: usize,
    pub max_len: usize,
    /// Number of labels `|Ω|`.
    pub labels: usize,
    /// Classifier hidden width.
    pub hidden: usize,
    pub block: BlockConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            dim: 32,
            vocab: 100,
            max_len: 12,
            labels: 2,
            hidden: 256,
            block: BlockConfig::default(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || !self.dim.is_multiple_of(2) {
            return Err(config_err(format!("D must be positive and even, got {}", self.dim)));
        }
        if self.vocab == 0 || self.max_len == 0 || self.hidden == 0 {
            return Err(config_err("vocab, max_len and hidden must be positive"));
        }
        if self.labels < 2 {
            return Err(config_err(format!("need at least 2 labels, got {}", self.labels)));
        }
        self.block.validate(self.dim)
    }

    /// Parameters outside the two feature blocks.
    pub fn base_count(&self) -> usize {
        let d = self.dim;
        self.vocab * d
            + BiGru::<f64>::count(d, d / 2)
            + 2 * Linear::<f64>::count(4 * d, d)
            + Linear::<f64>::count(8 * d, self.hidden)
            + Linear::<f64>::count(self.hidden, self.labels)
    }

    /// Parameters added by both feature blocks together.
    pub fn block_count(&self) -> Result<usize> {
        Ok(2 * count_params(&self.block, self.dim)?.total)
    }
}

/// A tokenized sentence pair and its label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    pub tokens_a: Vec<usize>,
    pub tokens_b: Vec<usize>,
    pub label: usize,
}

impl ExamplePair {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        for (name, toks) in [("a", &self.tokens_a), ("b", &self.tokens_b)] {
            if toks.is_empty() || toks.len() > cfg.max_len {
                return Err(config_err(format!(
                    "sentence {name} has length {}, allowed 1..={}",
                    toks.len(),
                    cfg.max_len
                )));
            }
            if let Some(&bad) = toks.iter().find(|&&t| t >= cfg.vocab) {
                return Err(config_err(format!("token id {bad} outside vocabulary of {}", cfg.vocab)));
            }
        }
        if self.label >= cfg.labels {
            return Err(config_err(format!("label {} outside {} labels", self.label, cfg.labels)));
        }
        Ok(())
    }
}

/// Knobs for a single forward pass.
#[derive(Debug, Clone, Copy, Default)]
pub struct ForwardOptions {
    /// Cut the graph after the second sentence's block so nothing on that
    /// side receives gradient.
    pub detach_y: bool,
}

/// Intermediate values of one pair.
#[derive(Debug, Clone)]
pub struct PairTrace {
    /// Contextual encodings.
    pub a: Var,
    pub b: Var,
    /// Interaction outputs, inputs to the blocks.
    pub x: Var,
    pub y: Var,
    /// Block outputs.
    pub u: Var,
    pub v: Var,
    /// `1 × |Ω|`.
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct SiameseModel<T> {
    config: ModelConfig,
    pub embedding: Tensor<T>,
    pub context: BiGru<T>,
    pub proj_x: Linear<T>,
    pub proj_y: Linear<T>,
    pub block_x: FeatureBlock<T>,
    pub block_y: FeatureBlock<T>,
    pub cls_hidden: Linear<T>,
    pub cls_out: Linear<T>,
}

impl<T: Real> SiameseModel<T> {
    /// Base parameters are drawn from one seeded stream and block parameters
    /// from another, so models differing only in block kind share their base
    /// initialization.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let embedding = Tensor::uniform(&[config.vocab, d], -1.0, 1.0, &mut rng).with_grad();
        let context = BiGru::new(d, d / 2, &mut rng);
        let proj_x = Linear::new(4 * d, d, &mut rng);
        let proj_y = Linear::new(4 * d, d, &mut rng);
        let cls_hidden = Linear::new(8 * d, config.hidden, &mut rng);
        let cls_out = Linear::new(config.hidden, config.labels, &mut rng);
        let mut block_rng = ChaCha8Rng::seed_from_u64(seed);
        block_rng.set_stream(1);
        let block_x = FeatureBlock::new(&config.block, d, &mut block_rng)?;
        let block_y = FeatureBlock::new(&config.block, d, &mut block_rng)?;
        Ok(SiameseModel {
            config,
            embedding,
            context,
            proj_x,
            proj_y,
            block_x,
            block_y,
            cls_hidden,
            cls_out,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn block_param_count(&self) -> usize {
        self.block_x.param_count() + self.block_y.param_count()
    }

    pub fn base_param_count(&self) -> usize {
        self.param_count() - self.block_param_count()
    }

    /// Embedding lookup and contextual BiGRU; pad rows are zero.
    pub fn embed_encode(&self, tape: &mut Tape<T>, tokens: &[usize], mask: &[bool]) -> Result<Var> {
        if tokens.len() != mask.len() {
            return Err(config_err(format!(
                "{} tokens with a mask of {}",
                tokens.len(),
                mask.len()
            )));
        }
        if !mask.iter().any(|&m| m) {
            return Err(Error::Contract("sentence has no valid positions".into()));
        }
        let table = tape.leaf(&self.embedding);
        let emb = tape.gather_rows(table, tokens)?;
        let h = self.context.run(tape, emb, mask)?;
        zero_pads(tape, h, mask)
    }

    /// Soft alignment and projection back to `D` for both sentences.
    pub fn interaction(
        &self,
        tape: &mut Tape<T>,
        a: Var,
        b: Var,
        mask_a: &[bool],
        mask_b: &[bool],
    ) -> Result<(Var, Var)> {
        let bt = tape.transpose(b)?;
        let sim = tape.matmul(a, bt)?; // L_a × L_b
        let attn_a = tape.masked_softmax(sim, 1, Some(mask_b))?;
        let a_bar = tape.matmul(attn_a, b)?;
        let sim_t = tape.transpose(sim)?;
        let attn_b = tape.masked_softmax(sim_t, 1, Some(mask_a))?;
        let b_bar = tape.matmul(attn_b, a)?;
        let x = enhance(tape, a, a_bar, &self.proj_x)?;
        let y = enhance(tape, b, b_bar, &self.proj_y)?;
        Ok((zero_pads(tape, x, mask_a)?, zero_pads(tape, y, mask_b)?))
    }

    /// Pools both block outputs and returns `1 × |Ω|` logits.
    pub fn classify(&self, tape: &mut Tape<T>, u: Var, v: Var, mask_a: &[bool], mask_b: &[bool]) -> Result<Var> {
        let pu = pool(tape, u, mask_a)?;
        let pv = pool(tape, v, mask_b)?;
        let diff = tape.sub(pu, pv)?;
        let diff = tape.abs(diff);
        let prod = tape.mul(pu, pv)?;
        let feats = tape.concat(&[pu, pv, diff, prod], 1)?;
        let h = self.cls_hidden.forward(tape, feats)?;
        let h = tape.tanh(h);
        self.cls_out.forward(tape, h)
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        tokens_a: &[usize],
        mask_a: &[bool],
        tokens_b: &[usize],
        mask_b: &[bool],
        opts: ForwardOptions,
    ) -> Result<PairTrace> {
        let a = self.embed_encode(tape, tokens_a, mask_a)?;
        let b = self.embed_encode(tape, tokens_b, mask_b)?;
        let (x, y) = self.interaction(tape, a, b, mask_a, mask_b)?;
        let u = self.block_x.forward(tape, x, mask_a)?;
        let mut v = self.block_y.forward(tape, y, mask_b)?;
        if opts.detach_y {
            v = tape.detach(v);
        }
        let logits = self.classify(tape, u, v, mask_a, mask_b)?;
        Ok(PairTrace {
            a,
            b,
            x,
            y,
            u,
            v,
            logits,
        })
    }

    /// Forward on an unpadded pair.
    pub fn forward_pair(&self, tape: &mut Tape<T>, pair: &ExamplePair, opts: ForwardOptions) -> Result<PairTrace> {
        pair.validate(&self.config)?;
        let mask_a = vec![true; pair.tokens_a.len()];
        let mask_b = vec![true; pair.tokens_b.len()];
        self.forward(tape, &pair.tokens_a, &mask_a, &pair.tokens_b, &mask_b, opts)
    }

    /// Label probabilities for one pair.
    pub fn probabilities(&self, pair: &ExamplePair) -> Result<Vec<T>> {
        let mut tape = Tape::new();
        let trace = self.forward_pair(&mut tape, pair, ForwardOptions::default())?;
        let p = tape.softmax(trace.logits, 1)?;
        Ok(tape.value(p).to_vec())
    }

    pub fn predict(&self, pair: &ExamplePair) -> Result<usize> {
        Ok(argmax(&self.probabilities(pair)?))
    }
}

impl<T: Real> Params<T> for SiameseModel<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<T>)) {
        f(join(prefix, "embedding"), &self.embedding);
        self.context.visit(&join(prefix, "context"), f);
        self.proj_x.visit(&join(prefix, "proj_x"), f);
        self.proj_y.visit(&join(prefix, "proj_y"), f);
        self.block_x.visit(&join(prefix, "block_x"), f);
        self.block_y.visit(&join(prefix, "block_y"), f);
        self.cls_hidden.visit(&join(prefix, "classifier.hidden"), f);
        self.cls_out.visit(&join(prefix, "classifier.out"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<T>)) {
        f(join(prefix, "embedding"), &mut self.embedding);
        self.context.visit_mut(&join(prefix, "context"), f);
        self.proj_x.visit_mut(&join(prefix, "proj_x"), f);
        self.proj_y.visit_mut(&join(prefix, "proj_y"), f);
        self.block_x.visit_mut(&join(prefix, "block_x"), f);
        self.block_y.visit_mut(&join(prefix, "block_y"), f);
        self.cls_hidden.visit_mut(&join(prefix, "classifier.hidden"), f);
        self.cls_out.visit_mut(&join(prefix, "classifier.out"), f);
    }
}

/// `−ln softmax(logits)[label]` as a one-element node.
pub fn cross_entropy<T: Real>(tape: &mut Tape<T>, logits: Var, label: usize) -> Result<Var> {
    let classes = tape.shape(logits)[1];
    if label >= classes {
        return Err(config_err(format!("label {label} outside {classes} classes")));
    }
    let lp = tape.log_softmax(logits, 1)?;
    let picked = tape.narrow(lp, 1, label, 1)?;
    Ok(tape.neg(picked))
}

/// `−ln probs[label]`.
pub fn nll<T: Real>(probs: &[T], label: usize) -> T {
    -probs[label].ln()
}

pub fn argmax<T: Real>(values: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

fn enhance<T: Real>(tape: &mut Tape<T>, a: Var, a_bar: Var, proj: &Linear<T>) -> Result<Var> {
    let diff = tape.sub(a, a_bar)?;
    let prod = tape.mul(a, a_bar)?;
    let m = tape.concat(&[a, a_bar, diff, prod], 1)?;
    let h = proj.forward(tape, m)?;
    Ok(tape.tanh(h))
}

fn zero_pads<T: Real>(tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
    if mask.iter().all(|&m| m) {
        return Ok(x);
    }
    let keep = mask.iter().map(|&m| if m { T::one() } else { T::zero() }).collect();
    let keep = tape.constant(&[mask.len(), 1], keep)?;
    Ok(tape.mul(x, keep)?)
}

/// `[masked mean; masked max]` over positions, `1 × 2D`.
fn pool<T: Real>(tape: &mut Tape<T>, x: Var, mask: &[bool]) -> Result<Var> {
    let mean = tape.mean(x, 0, Some(mask))?;
    let max = tape.max(x, 0, Some(mask))?;
    Ok(tape.concat(&[mean, max], 1)?)
}
