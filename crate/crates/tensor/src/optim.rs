use std::collections::BTreeMap;

use crate::params::{ParamId, ParamStore};
use crate::{Result, TensorError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Moments {
    pub m: Vec<f32>,
    pub v: Vec<f32>,
}

/// Adam moment buffers keyed by parameter, plus the shared step counter.
#[derive(Debug, Clone)]
pub struct OptimState {
    pub config: AdamConfig,
    pub step: u64,
    moments: BTreeMap<ParamId, Moments>,
}

/// One Adam update of `param` in place. `step` is the 1-based step index
/// used for bias correction.
pub fn adam_update(
    param: &mut [f32],
    grad: &[f32],
    moments: &mut Moments,
    cfg: &AdamConfig,
    step: u64,
) -> Result<()> {
    if param.len() != grad.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!("{} params vs {} grads", param.len(), grad.len()),
        ));
    }
    if moments.m.is_empty() {
        moments.m = vec![0.0; param.len()];
        moments.v = vec![0.0; param.len()];
    } else if moments.m.len() != param.len() {
        return Err(TensorError::shape(
            "adam_step",
            format!("moment buffer of {} for {} params", moments.m.len(), param.len()),
        ));
    }
    let bc1 = 1.0 - (cfg.beta1 as f64).powi(step as i32);
    let bc2 = 1.0 - (cfg.beta2 as f64).powi(step as i32);
    let (bc1, bc2) = (bc1 as f32, bc2 as f32);
    for i in 0..param.len() {
        let g = grad[i];
        let m = cfg.beta1 * moments.m[i] + (1.0 - cfg.beta1) * g;
        let v = cfg.beta2 * moments.v[i] + (1.0 - cfg.beta2) * g * g;
        moments.m[i] = m;
        moments.v[i] = v;
        let mhat = m / bc1;
        let vhat = v / bc2;
        param[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

impl OptimState {
    pub fn new(config: AdamConfig) -> Self {
        OptimState { config, step: 0, moments: BTreeMap::new() }
    }

    pub fn moments(&self, id: ParamId) -> Option<&Moments> {
        self.moments.get(&id)
    }

    /// Applies one Adam step to every trainable parameter in `store` that
    /// carries a gradient, then increments the step counter.
    pub fn step(&mut self, store: &mut ParamStore) -> Result<()> {
        self.step += 1;
        let cfg = self.config;
        for id in store.trainable_ids() {
            let t = store.get_mut(id);
            let Some(grad) = t.grad.take() else { continue };
            let moments = self.moments.entry(id).or_default();
            let res = adam_update(&mut t.data, &grad, moments, &cfg, self.step);
            t.grad = Some(grad);
            res?;
        }
        Ok(())
    }
}

/// Scales all trainable gradients so their global L2 norm is at most
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f32) -> f32 {
    let ids = store.trainable_ids();
    let mut sq = 0.0f64;
    for &id in &ids {
        if let Some(g) = &store.get(id).grad {
            sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        }
    }
    let norm = sq.sqrt() as f32;
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for id in ids {
            if let Some(g) = store.get_mut(id).grad.as_mut() {
                g.iter_mut().for_each(|v| *v *= s);
            }
        }
    }
    norm
}
