//! AdamW with global-norm clipping, linear warmup and an EMA shadow copy.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamStore};
use crate::tensor::Tensor;

/// Optimizer hyperparameters. Defaults are the large-scale training values
/// (betas 0.9/0.98, decay 0.01, clip 1, warmup 500, EMA 0.9999); small runs
/// usually override `lr`, `warmup_steps` and `ema_decay`.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Learning rate ramps linearly over this many steps, then stays
    /// constant.
    pub warmup_steps: u64,
    pub ema_decay: f64,
    /// Use `min(ema_decay, (1 + n) / (10 + n))` so the shadow tracks
    /// early training instead of staying pinned to the initialization.
    pub ema_warmup: bool,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 2e-4,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-8,
            weight_decay: 0.01,
            clip_norm: Some(1.0),
            warmup_steps: 500,
            ema_decay: 0.9999,
            ema_warmup: true,
        }
    }
}

/// Moments, step counter and EMA shadow weights.
#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub first_moment: Vec<Tensor>,
    pub second_moment: Vec<Tensor>,
    pub ema: Vec<Tensor>,
}

/// Diagnostics returned by [`AdamW::step`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepStats {
    /// Gradient norm before clipping.
    pub grad_norm: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct AdamW {
    pub config: AdamWConfig,
    state: OptimizerState,
}

impl AdamW {
    /// Fresh optimizer; the EMA shadow starts equal to the parameters.
    pub fn new(config: AdamWConfig, store: &ParamStore) -> Self {
        let zeros = || store.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
        Self {
            config,
            state: OptimizerState {
                step: 0,
                first_moment: zeros(),
                second_moment: zeros(),
                ema: store.tensors().to_vec(),
            },
        }
    }

    pub fn from_state(config: AdamWConfig, state: OptimizerState, store: &ParamStore) -> Result<Self> {
        let n = store.len();
        if state.first_moment.len() != n || state.second_moment.len() != n || state.ema.len() != n {
            return Err(Error::Shape(format!(
                "optimizer state covers {} parameters, store has {n}",
                state.first_moment.len()
            )));
        }
        for (i, p) in store.tensors().iter().enumerate() {
            p.expect_same_shape(&state.first_moment[i])?;
            p.expect_same_shape(&state.second_moment[i])?;
            p.expect_same_shape(&state.ema[i])?;
        }
        Ok(Self { config, state })
    }

    pub fn state(&self) -> &OptimizerState {
        &self.state
    }

    pub fn step_count(&self) -> u64 {
        self.state.step
    }

    /// Learning rate used for the update with 0-based index `step`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let w = self.config.warmup_steps;
        if w == 0 || step >= w {
            self.config.lr
        } else {
            self.config.lr * (step + 1) as f64 / w as f64
        }
    }

    /// Decay applied at the EMA update following step `step` (0-based).
    pub fn ema_decay_at(&self, step: u64) -> f64 {
        if self.config.ema_warmup {
            let n = step as f64;
            self.config.ema_decay.min((1.0 + n) / (10.0 + n))
        } else {
            self.config.ema_decay
        }
    }

    /// Clips, applies one AdamW update and refreshes the EMA shadow.
    /// Parameters without a gradient entry are treated as having zero
    /// gradient (weight decay still applies).
    pub fn step(&mut self, store: &mut ParamStore, mut grads: Gradients) -> Result<StepStats> {
        if store.len() != self.state.first_moment.len() {
            return Err(Error::Shape(format!(
                "optimizer tracks {} parameters, store has {}",
                self.state.first_moment.len(),
                store.len()
            )));
        }
        let grad_norm = grads.global_norm();
        if !grad_norm.is_finite() {
            return Err(Error::NonFinite {
                op: "adamw_step",
                node: 0,
            });
        }
        if let Some(clip) = self.config.clip_norm {
            if grad_norm > clip {
                grads.scale(clip / grad_norm);
            }
        }

        let cfg = &self.config;
        let lr = self.lr_at(self.state.step);
        let t = (self.state.step + 1) as i32;
        let bc1 = 1.0 - cfg.beta1.powi(t);
        let bc2 = 1.0 - cfg.beta2.powi(t);
        let decay = self.ema_decay_at(self.state.step);

        for id in store.ids().collect::<Vec<_>>() {
            let i = id.index();
            let param = store.get_mut(id);
            let m = &mut self.state.first_moment[i];
            let v = &mut self.state.second_moment[i];
            if m.shape() != param.shape() || v.shape() != param.shape() {
                return Err(Error::Shape(format!(
                    "moment shape {:?} does not match parameter {:?}",
                    m.shape(),
                    param.shape()
                )));
            }
            let grad = grads.param(id);
            if let Some(g) = grad {
                g.expect_same_shape(param)?;
            }
            let pd = param.data_mut();
            let (md, vd) = (m.data_mut(), v.data_mut());
            for j in 0..pd.len() {
                let gj = grad.map_or(0.0, |g| g.data()[j]);
                md[j] = cfg.beta1 * md[j] + (1.0 - cfg.beta1) * gj;
                vd[j] = cfg.beta2 * vd[j] + (1.0 - cfg.beta2) * gj * gj;
                let m_hat = md[j] / bc1;
                let v_hat = vd[j] / bc2;
                pd[j] -= lr * cfg.weight_decay * pd[j];
                pd[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
            }
            let shadow = self.state.ema[i].data_mut();
            for (s, &p) in shadow.iter_mut().zip(pd.iter()) {
                *s = decay * *s + (1.0 - decay) * p;
            }
        }
        self.state.step += 1;
        Ok(StepStats { grad_norm, lr })
    }

    pub fn ema(&self) -> &[Tensor] {
        &self.state.ema
    }

    /// Copy of `store` holding the EMA weights.
    pub fn ema_store(&self, store: &ParamStore) -> Result<ParamStore> {
        let mut out = store.clone();
        out.assign(&self.state.ema)?;
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single(value: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.add("p", Tensor::scalar(value)).unwrap();
        s
    }

    fn no_frills() -> AdamWConfig {
        AdamWConfig {
            lr: 1.0,
            weight_decay: 0.0,
            clip_norm: None,
            warmup_steps: 0,
            ..AdamWConfig::default()
        }
    }

    #[test]
    fn zero_gradient_zero_decay_leaves_params() {
        let mut store = single(0.7);
        let mut opt = AdamW::new(no_frills(), &store);
        opt.step(&mut store, Gradients::default()).unwrap();
        assert_eq!(store.tensors()[0].data(), &[0.7]);
        assert_eq!(opt.step_count(), 1);
    }

    #[test]
    fn decoupled_weight_decay_is_exact() {
        let mut store = single(1.0);
        let cfg = AdamWConfig {
            weight_decay: 0.01,
            ..no_frills()
        };
        let mut opt = AdamW::new(cfg, &store);
        opt.step(&mut store, Gradients::default()).unwrap();
        assert_eq!(store.tensors()[0].data(), &[1.0 - 0.01]);
    }

    #[test]
    fn warmup_is_linear_then_constant() {
        let store = single(0.0);
        let opt = AdamW::new(
            AdamWConfig {
                lr: 1.0,
                warmup_steps: 4,
                ..AdamWConfig::default()
            },
            &store,
        );
        let lrs: Vec<f64> = (0..6).map(|s| opt.lr_at(s)).collect();
        assert_eq!(lrs, vec![0.25, 0.5, 0.75, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn clipping_caps_the_norm() {
        let mut store = single(0.0);
        let mut grads = Gradients::default();
        grads.params.insert(store.id("p").unwrap(), Tensor::scalar(10.0));
        let mut opt = AdamW::new(
            AdamWConfig {
                clip_norm: Some(1.0),
                ..no_frills()
            },
            &store,
        );
        let stats = opt.step(&mut store, grads).unwrap();
        assert_eq!(stats.grad_norm, 10.0);
        // clipped grad 1.0: m = 0.1, v = 0.02·1, bias corrected to 1, 1
        let m = &opt.state().first_moment[0];
        assert!((m.data()[0] - 0.1).abs() < 1e-15);
    }

    #[test]
    fn ema_starts_at_params() {
        let store = single(3.0);
        let opt = AdamW::new(AdamWConfig::default(), &store);
        assert_eq!(opt.ema()[0].data(), &[3.0]);
    }
}
