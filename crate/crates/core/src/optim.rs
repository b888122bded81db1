//! AdamW with decoupled weight decay, a cosine learning-rate schedule and
//! global-norm gradient clipping.

use serde::{Deserialize, Serialize};

use crate::real::Real;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        AdamWConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.05,
        }
    }
}

/// Linear warmup from zero over `warmup` steps, then cosine decay from
/// `start` to `end` so that step `total - 1` lands on `end`.
pub fn warmup_cosine_lr(start: f64, end: f64, warmup: usize, step: usize, total: usize) -> f64 {
    if step < warmup {
        return start * (step + 1) as f64 / (warmup + 1) as f64;
    }
    cosine_lr(start, end, step - warmup, total.saturating_sub(warmup))
}

/// Cosine decay from `start` to `end` over `total` steps; step `total - 1`
/// lands on `end`.
pub fn cosine_lr(start: f64, end: f64, step: usize, total: usize) -> f64 {
    if total <= 1 {
        return start;
    }
    let p = (step.min(total - 1)) as f64 / (total - 1) as f64;
    end + 0.5 * (start - end) * (1.0 + (std::f64::consts::PI * p).cos())
}

/// Scales `grad` in place so its L2 norm is at most `max_norm`. Returns the
/// norm before clipping.
pub fn clip_global_norm<F: Real>(grads: &mut [&mut [F]], max_norm: f64) -> f64 {
    let norm = grads
        .iter()
        .flat_map(|g| g.iter())
        .map(|v| v.to_f64_lossy().powi(2))
        .sum::<f64>()
        .sqrt();
    if norm > max_norm && norm > 0.0 {
        let s = F::from_f64_lossy(max_norm / norm);
        for g in grads.iter_mut() {
            for v in g.iter_mut() {
                *v *= s;
            }
        }
    }
    norm
}

/// Optimizer state for one flat parameter buffer.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, len: usize) -> Self {
        AdamW {
            cfg,
            m: vec![0.0; len],
            v: vec![0.0; len],
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update. `decay[i]` says whether parameter `i` gets weight decay.
    /// With `lr == 0` parameters are left bit-identical.
    pub fn step<F: Real>(&mut self, params: &mut [F], grads: &[F], lr: f64, decay: &dyn Fn(usize) -> bool) {
        assert_eq!(params.len(), self.m.len());
        assert_eq!(grads.len(), self.m.len());
        self.t += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i].to_f64_lossy();
            self.m[i] = c.beta1 * self.m[i] + (1.0 - c.beta1) * g;
            self.v[i] = c.beta2 * self.v[i] + (1.0 - c.beta2) * g * g;
            if lr == 0.0 {
                continue;
            }
            let mhat = self.m[i] / bc1;
            let vhat = self.v[i] / bc2;
            let mut p = params[i].to_f64_lossy();
            if decay(i) {
                p -= lr * c.weight_decay * p;
            }
            p -= lr * mhat / (vhat.sqrt() + c.eps);
            params[i] = F::from_f64_lossy(p);
        }
    }
}
