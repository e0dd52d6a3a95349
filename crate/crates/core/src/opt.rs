//! AdamW with linear warmup and optional cosine decay.
//!
//! Decoupled weight decay is applied to matrix-shaped parameters only;
//! vectors (biases, norm gains, embeddings stored as single rows) decay
//! toward zero too eagerly at these scales.

use crate::error::{CoreError, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Debug, Clone)]
pub struct AdamWConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    /// When set, the rate follows a cosine from `lr` down to `min_lr_ratio *
    /// lr` between the end of warmup and this step count.
    pub total_steps: Option<usize>,
    pub min_lr_ratio: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            warmup_steps: 50,
            total_steps: None,
            min_lr_ratio: 0.1,
        }
    }
}

pub struct AdamW {
    cfg: AdamWConfig,
    step: usize,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, store: &ParamStore) -> Self {
        let m = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).rows(), store.get(i).cols()))
            .collect();
        let v = (0..store.len())
            .map(|i| Tensor::zeros(store.get(i).rows(), store.get(i).cols()))
            .collect();
        AdamW { cfg, step: 0, m, v }
    }

    pub fn step_count(&self) -> usize {
        self.step
    }

    /// Effective learning rate for the next step: linear warmup, then either
    /// constant or cosine-decayed to `min_lr_ratio * lr`.
    pub fn current_lr(&self) -> f64 {
        let w = self.cfg.warmup_steps;
        let t = (self.step + 1) as f64;
        if w > 0 && t < w as f64 {
            return self.cfg.lr * t / w as f64;
        }
        match self.cfg.total_steps {
            None => self.cfg.lr,
            Some(total) if total <= w => self.cfg.lr,
            Some(total) => {
                let span = (total - w) as f64;
                let progress = ((t - w as f64) / span).clamp(0.0, 1.0);
                let floor = self.cfg.min_lr_ratio;
                let cosine = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
                self.cfg.lr * (floor + (1.0 - floor) * cosine)
            }
        }
    }

    /// One update over all parameters. `grads` is index-aligned with `store`.
    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) -> Result<()> {
        assert_eq!(grads.len(), store.len(), "gradient/parameter count");
        for (i, g) in grads.iter().enumerate() {
            if !g.is_finite() {
                return Err(CoreError::NonFiniteGradient(store.name(i).to_string()));
            }
        }
        let lr = self.current_lr();
        self.step += 1;
        let t = self.step as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for i in 0..store.len() {
            let decay = if store.get(i).rows() > 1 { self.cfg.weight_decay } else { 0.0 };
            let p = store.get_mut(i);
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            let g = grads[i].data();
            for (j, pj) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * g[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * g[j] * g[j];
                let mhat = m[j] / bc1;
                let vhat = v[j] / bc2;
                *pj -= lr * (mhat / (vhat.sqrt() + self.cfg.eps) + decay * *pj);
            }
        }
        Ok(())
    }
}

/// Polyak average of parameters, tracked alongside an optimizer and written
/// back once training ends.
pub struct Ema {
    decay: f64,
    shadow: Vec<Tensor>,
}

impl Ema {
    pub fn new(decay: f64, store: &ParamStore) -> Self {
        assert!((0.0..1.0).contains(&decay), "ema decay must be in [0, 1)");
        let shadow = (0..store.len()).map(|i| store.get(i).clone()).collect();
        Ema { decay, shadow }
    }

    pub fn update(&mut self, store: &ParamStore) {
        for (i, s) in self.shadow.iter_mut().enumerate() {
            let p = store.get(i).data();
            for (sj, &pj) in s.data_mut().iter_mut().zip(p) {
                *sj = self.decay * *sj + (1.0 - self.decay) * pj;
            }
        }
    }

    pub fn write_back(self, store: &mut ParamStore) {
        for (i, s) in self.shadow.into_iter().enumerate() {
            *store.get_mut(i) = s;
        }
    }
}
