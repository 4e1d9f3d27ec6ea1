//! Freezable next-character model.
//!
//! Mean-pooled embeddings feed `n_blocks` residual blocks
//! `h <- h + tanh(W h + b)` and a linear head. Blocks are numbered from the
//! input upwards; freezing depth `k` trains the head and the top `k` blocks,
//! and the embedding only when `k == n_blocks`.

mod checkpoint;
mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::{self, Purpose};

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use train::{backward, evaluate, forward_loss, Evaluation, ForwardCache};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub n_blocks: usize,
    pub context_window: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("vocab_size", self.vocab_size),
            ("model.embed_dim", self.embed_dim),
            ("model.hidden_dim", self.hidden_dim),
            ("model.n_blocks", self.n_blocks),
            ("model.context_window", self.context_window),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        // residual connections need matching widths
        if self.embed_dim != self.hidden_dim {
            return Err(Error::Config(format!(
                "model.embed_dim ({}) must equal model.hidden_dim ({})",
                self.embed_dim, self.hidden_dim
            )));
        }
        Ok(())
    }

    pub fn embedding_params(&self) -> usize {
        self.vocab_size * self.embed_dim
    }

    pub fn block_params(&self) -> usize {
        self.hidden_dim * self.hidden_dim + self.hidden_dim
    }

    pub fn head_params(&self) -> usize {
        self.hidden_dim * self.vocab_size + self.vocab_size
    }

    pub fn total_params(&self) -> usize {
        self.embedding_params() + self.n_blocks * self.block_params() + self.head_params()
    }

    pub fn check_depth(&self, k: usize) -> Result<()> {
        if k == 0 || k > self.n_blocks {
            return Err(Error::InvalidDepth {
                k,
                n_blocks: self.n_blocks,
            });
        }
        Ok(())
    }

    /// Number of tensors in canonical order:
    /// embedding, (weight, bias) per block bottom-up, head weight, head bias.
    pub fn n_tensors(&self) -> usize {
        2 * self.n_blocks + 3
    }

    /// Element count of each tensor in canonical order.
    pub fn tensor_sizes(&self) -> Vec<usize> {
        let mut sizes = Vec::with_capacity(self.n_tensors());
        sizes.push(self.embedding_params());
        for _ in 0..self.n_blocks {
            sizes.push(self.hidden_dim * self.hidden_dim);
            sizes.push(self.hidden_dim);
        }
        sizes.push(self.hidden_dim * self.vocab_size);
        sizes.push(self.vocab_size);
        sizes
    }

    /// Which canonical tensors receive updates at freezing depth `k`.
    pub fn trainable_mask(&self, k: usize) -> Vec<bool> {
        let first_trainable_block = self.n_blocks.saturating_sub(k);
        let mut mask = Vec::with_capacity(self.n_tensors());
        mask.push(k >= self.n_blocks);
        for block in 0..self.n_blocks {
            let on = block >= first_trainable_block;
            mask.push(on);
            mask.push(on);
        }
        mask.push(true);
        mask.push(true);
        mask
    }
}

/// Trainable parameter count at freezing depth `k`.
pub fn active_params(cfg: &ModelConfig, k: usize) -> Result<usize> {
    cfg.check_depth(k)?;
    let embedding = if k == cfg.n_blocks {
        cfg.embedding_params()
    } else {
        0
    };
    Ok(cfg.head_params() + k * cfg.block_params() + embedding)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    /// `hidden_dim x hidden_dim`, row-major, output index first.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub cfg: ModelConfig,
    /// `vocab_size x embed_dim`, row-major.
    pub embedding: Vec<f64>,
    pub blocks: Vec<Block>,
    /// `hidden_dim x vocab_size`, row-major.
    pub head_weight: Vec<f64>,
    pub head_bias: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(cfg: ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        ModelParams {
            cfg,
            embedding: vec![0.0; cfg.embedding_params()],
            blocks: (0..cfg.n_blocks)
                .map(|_| Block {
                    weight: vec![0.0; d * d],
                    bias: vec![0.0; d],
                })
                .collect(),
            head_weight: vec![0.0; d * cfg.vocab_size],
            head_bias: vec![0.0; cfg.vocab_size],
        }
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::with_capacity(self.cfg.n_tensors());
        out.push(&self.embedding);
        for b in &self.blocks {
            out.push(&b.weight);
            out.push(&b.bias);
        }
        out.push(&self.head_weight);
        out.push(&self.head_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::with_capacity(self.cfg.n_tensors());
        out.push(&mut self.embedding);
        for b in &mut self.blocks {
            out.push(&mut b.weight);
            out.push(&mut b.bias);
        }
        out.push(&mut self.head_weight);
        out.push(&mut self.head_bias);
        out
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|x| x.is_finite()))
    }

    fn check_same_shape(&self, other: &ModelParams) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::Shape(format!(
                "parameter sets built for {:?} and {:?}",
                self.cfg, other.cfg
            )));
        }
        Ok(())
    }

    /// `params <- params - lr * grad`, elementwise.
    pub fn sgd_step(&mut self, grads: &Gradients, lr: f64) -> Result<()> {
        self.check_same_shape(&grads.values)?;
        for (p, g) in self.tensors_mut().into_iter().zip(grads.values.tensors()) {
            for (x, dx) in p.iter_mut().zip(g) {
                *x -= lr * dx;
            }
        }
        if !self.is_finite() {
            return Err(Error::NonFinite("sgd step"));
        }
        Ok(())
    }

    pub fn apply_delta(&mut self, delta: &UpdateDelta) -> Result<()> {
        self.check_same_shape(&delta.values)?;
        let mask = self.cfg.trainable_mask(delta.k);
        for ((p, d), on) in self
            .tensors_mut()
            .into_iter()
            .zip(delta.values.tensors())
            .zip(mask)
        {
            if on {
                for (x, dx) in p.iter_mut().zip(d) {
                    *x += dx;
                }
            }
        }
        Ok(())
    }
}

/// Draws weights uniformly with standard deviation `1/sqrt(fan_in)`; biases
/// start at zero. The embedding is treated as a linear map from one-hot
/// vectors, so its fan-in is the vocabulary size.
pub fn init_model(cfg: ModelConfig, seed: u64) -> Result<ModelParams> {
    cfg.validate()?;
    let mut rng = seed::rng(seed, Purpose::Init, 0, 0);
    let mut params = ModelParams::zeros(cfg);
    let mut fill = |t: &mut [f64], fan_in: usize| {
        let a = (3.0 / fan_in as f64).sqrt();
        for x in t {
            *x = rng.gen_range(-a..a);
        }
    };
    fill(&mut params.embedding, cfg.vocab_size);
    for b in &mut params.blocks {
        fill(&mut b.weight, cfg.hidden_dim);
    }
    fill(&mut params.head_weight, cfg.hidden_dim);
    Ok(params)
}

/// Parameter gradients at freezing depth `k`; frozen tensors are exact zeros.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub k: usize,
    pub values: ModelParams,
}

impl Gradients {
    pub fn zeros(cfg: ModelConfig, k: usize) -> Self {
        Gradients {
            k,
            values: ModelParams::zeros(cfg),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) -> Result<()> {
        self.values.check_same_shape(&other.values)?;
        for (a, b) in self.values.tensors_mut().into_iter().zip(other.values.tensors()) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for t in self.values.tensors_mut() {
            for x in t {
                *x *= factor;
            }
        }
    }
}

/// `after - before` on the tensors trainable at depth `k`, zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateDelta {
    pub k: usize,
    pub values: ModelParams,
}

impl UpdateDelta {
    pub fn zeros(cfg: ModelConfig, k: usize) -> Self {
        UpdateDelta {
            k,
            values: ModelParams::zeros(cfg),
        }
    }

    pub fn cfg(&self) -> &ModelConfig {
        &self.values.cfg
    }

    pub fn max_abs(&self) -> f64 {
        self.values
            .tensors()
            .iter()
            .flat_map(|t| t.iter())
            .fold(0.0, |m, x| m.max(x.abs()))
    }
}

pub fn delta(after: &ModelParams, before: &ModelParams, k: usize) -> Result<UpdateDelta> {
    after.check_same_shape(before)?;
    after.cfg.check_depth(k)?;
    let mut out = UpdateDelta::zeros(after.cfg, k);
    let mask = after.cfg.trainable_mask(k);
    for (((d, a), b), on) in out
        .values
        .tensors_mut()
        .into_iter()
        .zip(after.tensors())
        .zip(before.tensors())
        .zip(mask)
    {
        if on {
            for ((x, ya), yb) in d.iter_mut().zip(a).zip(b) {
                *x = ya - yb;
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelConfig {
        ModelConfig {
            vocab_size: 65,
            embed_dim: 32,
            hidden_dim: 32,
            n_blocks: 4,
            context_window: 8,
        }
    }

    #[test]
    fn active_param_counts() {
        let cfg = small();
        assert_eq!(cfg.block_params(), 1056);
        assert_eq!(cfg.head_params(), 2145);
        assert_eq!(active_params(&cfg, 1).unwrap(), 3201);
        assert_eq!(active_params(&cfg, 2).unwrap(), 4257);
        assert_eq!(active_params(&cfg, 4).unwrap(), cfg.total_params());
        assert!(active_params(&cfg, 0).is_err());
        assert!(active_params(&cfg, 5).is_err());
    }

    #[test]
    fn active_params_strictly_increasing() {
        for n_blocks in 1..6 {
            let cfg = ModelConfig { n_blocks, ..small() };
            let counts: Vec<usize> = (1..=n_blocks)
                .map(|k| active_params(&cfg, k).unwrap())
                .collect();
            assert!(counts.windows(2).all(|w| w[0] < w[1]));
        }
    }

    #[test]
    fn mask_matches_active_params() {
        let cfg = small();
        for k in 1..=cfg.n_blocks {
            let n: usize = cfg
                .tensor_sizes()
                .iter()
                .zip(cfg.trainable_mask(k))
                .filter(|(_, on)| *on)
                .map(|(s, _)| s)
                .sum();
            assert_eq!(n, active_params(&cfg, k).unwrap());
        }
    }

    #[test]
    fn init_is_deterministic_with_zero_biases() {
        let a = init_model(small(), 11).unwrap();
        let b = init_model(small(), 11).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, init_model(small(), 12).unwrap());
        assert!(a.blocks.iter().all(|b| b.bias.iter().all(|&x| x == 0.0)));
        assert!(a.head_bias.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_scale_matches_fan_in() {
        let cfg = ModelConfig {
            vocab_size: 10,
            embed_dim: 256,
            hidden_dim: 256,
            n_blocks: 1,
            context_window: 4,
        };
        let p = init_model(cfg, 5).unwrap();
        let w = &p.blocks[0].weight;
        let n = w.len() as f64;
        let mean = w.iter().sum::<f64>() / n;
        let sd = (w.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd - 1.0 / 16.0).abs() < 0.1 / 16.0, "sd = {sd}");
    }

    #[test]
    fn sgd_arithmetic() {
        let cfg = ModelConfig {
            vocab_size: 1,
            embed_dim: 1,
            hidden_dim: 1,
            n_blocks: 1,
            context_window: 1,
        };
        let mut p = ModelParams::zeros(cfg);
        p.head_weight[0] = 1.0;
        let mut g = Gradients::zeros(cfg, 1);
        g.values.head_weight[0] = 0.5;
        p.sgd_step(&g, 0.1).unwrap();
        assert_eq!(p.head_weight[0], 0.95);

        let before = p.clone();
        p.sgd_step(&g, 0.0).unwrap();
        assert_eq!(p, before);
        p.sgd_step(&Gradients::zeros(cfg, 1), 0.3).unwrap();
        assert_eq!(p, before);

        g.values.head_weight[0] = f64::INFINITY;
        assert!(matches!(p.sgd_step(&g, 0.1), Err(Error::NonFinite(_))));
    }

    #[test]
    fn delta_roundtrip_and_freeze() {
        let cfg = small();
        let before = init_model(cfg, 1).unwrap();
        assert!(delta(&before, &before, 4)
            .unwrap()
            .values
            .tensors()
            .iter()
            .all(|t| t.iter().all(|&x| x == 0.0)));

        let mut after = init_model(cfg, 2).unwrap();
        let d = delta(&after, &before, 1).unwrap();
        let mask = cfg.trainable_mask(1);
        for (t, on) in d.values.tensors().iter().zip(&mask) {
            if !on {
                assert!(t.iter().all(|&x| x == 0.0));
            }
        }
        // frozen tensors of `after` carry no meaning at depth 1
        for (a, (b, on)) in after
            .tensors_mut()
            .into_iter()
            .zip(before.tensors().into_iter().zip(&mask))
        {
            if !on {
                a.copy_from_slice(b);
            }
        }
        let mut rebuilt = before.clone();
        rebuilt.apply_delta(&d).unwrap();
        for (r, a) in rebuilt.tensors().iter().zip(after.tensors()) {
            for (x, y) in r.iter().zip(a) {
                assert!((x - y).abs() <= 4.0 * f64::EPSILON * y.abs().max(1.0));
            }
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = ModelParams::zeros(small());
        let b = ModelParams::zeros(ModelConfig {
            vocab_size: 3,
            ..small()
        });
        assert!(matches!(delta(&a, &b, 1), Err(Error::Shape(_))));
    }

    #[test]
    fn config_validation() {
        assert!(small().validate().is_ok());
        assert!(ModelConfig { n_blocks: 0, ..small() }.validate().is_err());
        assert!(ModelConfig {
            hidden_dim: 16,
            ..small()
        }
        .validate()
        .is_err());
    }
}
