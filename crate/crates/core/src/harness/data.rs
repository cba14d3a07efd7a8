//! Synthetic sentence-pair task.
//!
//! The vocabulary starts with `classes × synonyms` key tokens (token
//! `c·S + s` is synonym `s` of class `c`); the rest is filler. Every pair
//! plants a key phrase of distinct classes in the first sentence. A relevant
//! second sentence contains the same classes in the same order, each token
//! possibly swapped for a synonym. An irrelevant one contains the key classes
//! reordered, or with one class replaced. Filler slots occasionally hold a
//! stray key token as a distractor.

use std::collections::HashSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::matcher::ExamplePair;

pub const RELEVANT: usize = 1;
pub const IRRELEVANT: usize = 0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenConfig {
    pub vocab: usize,
    pub max_len: usize,
    pub min_len: usize,
    pub n_train: usize,
    pub n_dev: usize,
    pub n_test: usize,
    /// Length of the planted key phrase.
    pub key_len: usize,
    pub classes: usize,
    pub synonyms: usize,
    /// Chance that a key token in the second sentence is a different
    /// synonym than in the first.
    pub substitution_rate: f64,
    /// Chance that a filler slot holds a stray key token instead.
    pub distractor_rate: f64,
    /// Share of irrelevant pairs built by reordering (the rest replace one
    /// class).
    pub reorder_rate: f64,
    pub seed: u64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            vocab: 100,
            max_len: 12,
            min_len: 4,
            n_train: 2000,
            n_dev: 500,
            n_test: 500,
            key_len: 3,
            classes: 46,
            synonyms: 2,
            substitution_rate: 0.3,
            distractor_rate: 0.0,
            reorder_rate: 0.0,
            seed: 0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let keys = self.classes * self.synonyms;
        if self.synonyms == 0 || self.vocab < 2 * self.classes || self.vocab <= keys {
            return Err(config_err(format!(
                "vocabulary of {} cannot hold {} classes × {} synonyms plus filler",
                self.vocab, self.classes, self.synonyms
            )));
        }
        if self.key_len < 2 || self.classes <= self.key_len {
            return Err(config_err(format!(
                "key phrases need 2 ≤ key_len < classes, got key_len = {}, classes = {}",
                self.key_len, self.classes
            )));
        }
        if self.min_len < self.key_len || self.min_len > self.max_len {
            return Err(config_err(format!(
                "need key_len ≤ min_len ≤ max_len, got {} / {} / {}",
                self.key_len, self.min_len, self.max_len
            )));
        }
        for (name, v) in [
            ("substitution_rate", self.substitution_rate),
            ("distractor_rate", self.distractor_rate),
            ("reorder_rate", self.reorder_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(config_err(format!("{name} must lie in [0, 1], got {v}")));
            }
        }
        if self.n_train == 0 || self.n_dev == 0 || self.n_test == 0 {
            return Err(config_err("every split needs at least one example"));
        }
        Ok(())
    }

    pub fn key_tokens(&self) -> usize {
        self.classes * self.synonyms
    }

    /// Printable name of a token id.
    pub fn token_name(&self, id: usize) -> String {
        if id < self.key_tokens() {
            format!("k{}.{}", id / self.synonyms, id % self.synonyms)
        } else {
            format!("w{id}")
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: GenConfig,
    pub train: Vec<ExamplePair>,
    pub dev: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

pub fn generate_dataset(cfg: &GenConfig) -> Result<Dataset> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut seen = HashSet::new();
    let mut split = |n: usize, rng: &mut ChaCha8Rng| {
        let mut out = Vec::with_capacity(n);
        while out.len() < n {
            let label = if out.len() % 2 == 0 { RELEVANT } else { IRRELEVANT };
            let pair = make_pair(cfg, label, rng);
            if seen.insert((pair.tokens_a.clone(), pair.tokens_b.clone())) {
                out.push(pair);
            }
        }
        out.shuffle(rng);
        out
    };
    let train = split(cfg.n_train, &mut rng);
    let dev = split(cfg.n_dev, &mut rng);
    let test = split(cfg.n_test, &mut rng);
    Ok(Dataset {
        config: *cfg,
        train,
        dev,
        test,
    })
}

fn make_pair(cfg: &GenConfig, label: usize, rng: &mut ChaCha8Rng) -> ExamplePair {
    let mut classes: Vec<usize> = (0..cfg.classes).collect();
    classes.shuffle(rng);
    let key = &classes[..cfg.key_len];
    let spare = &classes[cfg.key_len..];

    let syn_a: Vec<usize> = key.iter().map(|_| rng.gen_range(0..cfg.synonyms)).collect();
    let tokens_a = sentence(cfg, key, &syn_a, rng);

    let mut key_b = key.to_vec();
    if label == IRRELEVANT {
        if rng.gen_bool(cfg.reorder_rate) {
            while key_b == key {
                key_b.shuffle(rng);
            }
        } else {
            let at = rng.gen_range(0..cfg.key_len);
            key_b[at] = spare[rng.gen_range(0..spare.len())];
        }
    }
    let syn_b: Vec<usize> = key_b
        .iter()
        .map(|c| {
            let same = key.iter().position(|k| k == c).map(|i| syn_a[i]);
            match same {
                Some(s) if !rng.gen_bool(cfg.substitution_rate) => s,
                _ => rng.gen_range(0..cfg.synonyms),
            }
        })
        .collect();
    let tokens_b = sentence(cfg, &key_b, &syn_b, rng);
    ExamplePair {
        tokens_a,
        tokens_b,
        label,
    }
}

fn sentence(cfg: &GenConfig, key: &[usize], syn: &[usize], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let len = rng.gen_range(cfg.min_len..=cfg.max_len);
    let keys = cfg.key_tokens();
    let mut out: Vec<usize> = (0..len)
        .map(|_| {
            if rng.gen_bool(cfg.distractor_rate) {
                rng.gen_range(0..keys)
            } else {
                rng.gen_range(keys..cfg.vocab)
            }
        })
        .collect();
    let start = rng.gen_range(0..=len - key.len());
    for (i, (&c, &s)) in key.iter().zip(syn).enumerate() {
        out[start + i] = c * cfg.synonyms + s;
    }
    out
}

/// Accuracy of a logistic-regression probe on bag-of-words pair features
/// `[bow_a ⊙ bow_b ; |bow_a − bow_b|]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub train_accuracy: f64,
    pub dev_accuracy: f64,
}

pub fn bow_probe(data: &Dataset, epochs: usize, lr: f64) -> ProbeReport {
    let v = data.config.vocab;
    let feats = |p: &ExamplePair| {
        let mut a = vec![0.0; v];
        let mut b = vec![0.0; v];
        p.tokens_a.iter().for_each(|&t| a[t] += 1.0);
        p.tokens_b.iter().for_each(|&t| b[t] += 1.0);
        let mut f: Vec<f64> = a.iter().zip(&b).map(|(x, y)| x * y).collect();
        f.extend(a.iter().zip(&b).map(|(x, y)| (x - y).abs()));
        f
    };
    let train: Vec<(Vec<f64>, f64)> = data.train.iter().map(|p| (feats(p), p.label as f64)).collect();
    let dev: Vec<(Vec<f64>, f64)> = data.dev.iter().map(|p| (feats(p), p.label as f64)).collect();
    let mut w = vec![0.0; 2 * v];
    let mut bias = 0.0;
    let n = train.len() as f64;
    for _ in 0..epochs {
        let mut gw = vec![0.0; 2 * v];
        let mut gb = 0.0;
        for (x, y) in &train {
            let z: f64 = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
            let err = 1.0 / (1.0 + (-z).exp()) - y;
            gb += err;
            for (g, xi) in gw.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        bias -= lr * gb / n;
        for (wi, g) in w.iter_mut().zip(&gw) {
            *wi -= lr * g / n;
        }
    }
    let acc = |set: &[(Vec<f64>, f64)]| {
        let right = set
            .iter()
            .filter(|(x, y)| {
                let z: f64 = bias + x.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>();
                (z > 0.0) == (*y > 0.5)
            })
            .count();
        right as f64 / set.len() as f64
    };
    ProbeReport {
        train_accuracy: acc(&train),
        dev_accuracy: acc(&dev),
    }
}
