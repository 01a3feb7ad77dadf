//! Adam with a warm-hold-decay learning-rate schedule.
//!
//! Entries hidden by a pruning mask are left untouched, moments included,
//! so a masked weight keeps its stored value until a later pruning pass
//! revives it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, clip_norm: 5.0 }
    }
}

/// Linear warm-up to `peak`, a flat hold, then exponential decay towards
/// `peak * final_ratio`, all measured in steps.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WarmHoldDecay {
    pub peak: f64,
    pub warmup: usize,
    pub hold: usize,
    pub decay: usize,
    pub final_ratio: f64,
}

impl WarmHoldDecay {
    pub fn new(peak: f64, warmup: usize, hold: usize, decay: usize, final_ratio: f64) -> Result<Self> {
        if !(peak > 0.0) || !(final_ratio > 0.0 && final_ratio <= 1.0) {
            return Err(Error::Config(format!(
                "learning rate {peak} and final ratio {final_ratio} must be positive (ratio at most 1)"
            )));
        }
        Ok(Self { peak, warmup, hold, decay, final_ratio })
    }

    /// Splits `total` steps by fractions for the warm-up and hold segments.
    pub fn over(peak: f64, total: usize, warmup_frac: f64, hold_frac: f64, final_ratio: f64) -> Result<Self> {
        let warmup = (total as f64 * warmup_frac).round() as usize;
        let hold = (total as f64 * hold_frac).round() as usize;
        Self::new(peak, warmup, hold, total.saturating_sub(warmup + hold), final_ratio)
    }

    pub fn lr(&self, step: usize) -> f64 {
        if step < self.warmup {
            return self.peak * (step + 1) as f64 / self.warmup as f64;
        }
        let s = step - self.warmup;
        if s < self.hold {
            return self.peak;
        }
        let s = s - self.hold;
        if self.decay == 0 || s >= self.decay {
            return self.peak * self.final_ratio;
        }
        self.peak * self.final_ratio.powf(s as f64 / self.decay as f64)
    }
}

#[derive(Clone, Debug)]
pub struct Adam {
    pub config: AdamConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: Vec<u64>,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Self { config, m: Vec::new(), v: Vec::new(), t: Vec::new() }
    }

    /// Applies one update to `params` using their accumulated gradients,
    /// then clears every gradient in the store. Returns the pre-clip norm.
    pub fn step(&mut self, store: &mut ParamStore, params: &[ParamId], lr: f64) -> f64 {
        let norm = params
            .iter()
            .filter_map(|&id| store.value(id).grad.as_ref())
            .flat_map(|g| g.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt();
        let scale = if self.config.clip_norm > 0.0 && norm > self.config.clip_norm {
            self.config.clip_norm / norm
        } else {
            1.0
        };
        let AdamConfig { beta1, beta2, eps, .. } = self.config;
        for &id in params {
            let i = id.index();
            if self.m.len() <= i {
                self.m.resize(i + 1, Vec::new());
                self.v.resize(i + 1, Vec::new());
                self.t.resize(i + 1, 0);
            }
            let p = store.get_mut(id);
            let Some(grad) = p.value.grad.take() else { continue };
            let n = grad.len();
            if self.m[i].len() != n {
                self.m[i] = vec![0.0; n];
                self.v[i] = vec![0.0; n];
                self.t[i] = 0;
            }
            self.t[i] += 1;
            let t = self.t[i] as i32;
            let c1 = 1.0 - beta1.powi(t);
            let c2 = 1.0 - beta2.powi(t);
            let mask = p.mask.clone();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let w = p.value.data_mut();
            for j in 0..n {
                if mask.as_ref().is_some_and(|mk| !mk.is_kept(j)) {
                    continue;
                }
                let g = grad[j] * scale;
                m[j] = beta1 * m[j] + (1.0 - beta1) * g;
                v[j] = beta2 * v[j] + (1.0 - beta2) * g * g;
                w[j] -= lr * (m[j] / c1) / ((v[j] / c2).sqrt() + eps);
            }
        }
        store.zero_grad();
        norm
    }
}
