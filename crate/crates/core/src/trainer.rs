//! Optimizer settings and batching helpers shared by the decoder and
//! denoiser training loops.

use autograd::{AdamWConfig, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainerConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub warmup: u64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip: f64,
    pub weight_decay: f64,
    pub ema: f64,
    /// Validation interval for early stopping; 0 disables it.
    pub eval_every: usize,
    pub patience: usize,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch: 32,
            lr: 1e-3,
            warmup: 100,
            clip: 1.0,
            weight_decay: 0.01,
            ema: 0.999,
            eval_every: 200,
            patience: 3,
        }
    }
}

impl TrainerConfig {
    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            warmup_steps: self.warmup,
            clip_norm: (self.clip > 0.0).then_some(self.clip),
            weight_decay: self.weight_decay,
            ema_decay: self.ema,
            ..AdamWConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::Config("batch size must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if !(0.0..1.0).contains(&self.ema) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema)));
        }
        Ok(())
    }
}

/// `batch` indices drawn uniformly with replacement from `0..n`.
pub fn sample_indices(rng: &mut impl Rng, n: usize, batch: usize) -> Vec<usize> {
    (0..batch).map(|_| rng.random_range(0..n)).collect()
}

/// Leading-axis slabs of `z` at `idx`, in that order.
pub fn select(z: &Tensor, idx: &[usize]) -> Tensor {
    let n = z.shape()[0];
    let per = z.numel() / n.max(1);
    let mut data = Vec::with_capacity(idx.len() * per);
    for &i in idx {
        data.extend_from_slice(&z.data()[i * per..(i + 1) * per]);
    }
    let mut shape = z.shape().to_vec();
    shape[0] = idx.len();
    Tensor::new(&shape, data).expect("select keeps the slab size")
}

/// Early-stopping bookkeeping on a higher-is-better score.
#[derive(Clone, Debug)]
pub(crate) struct Plateau<T> {
    pub best: f64,
    pub best_state: T,
    stale: usize,
    patience: usize,
}

impl<T> Plateau<T> {
    pub fn new(score: f64, state: T, patience: usize) -> Self {
        Self {
            best: score,
            best_state: state,
            stale: 0,
            patience,
        }
    }

    /// Records a score; returns true when training should stop.
    pub fn update(&mut self, score: f64, state: impl FnOnce() -> T) -> bool {
        if score > self.best {
            self.best = score;
            self.best_state = state();
            self.stale = 0;
            false
        } else {
            self.stale += 1;
            self.patience > 0 && self.stale >= self.patience
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn select_reorders_slabs() {
        let z = Tensor::from_fn(&[3, 2], |i| i as f64);
        let s = select(&z, &[2, 0, 2]);
        assert_eq!(s.shape(), &[3, 2]);
        assert_eq!(s.data(), &[4.0, 5.0, 0.0, 1.0, 4.0, 5.0]);
    }

    #[test]
    fn plateau_keeps_best() {
        let mut p = Plateau::new(0.1, 0, 2);
        assert!(!p.update(0.5, || 1));
        assert!(!p.update(0.4, || 2));
        assert!(p.update(0.5, || 3));
        assert_eq!((p.best, p.best_state), (0.5, 1));
    }
}
