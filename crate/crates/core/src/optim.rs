//! Momentum SGD, Adam and learning-rate schedules.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use advnas_tensor::Tensor;

use crate::error::{Error, Result};
use crate::nn::{GradientMap, ParamId, ParamStore};

/// `base · (1 + cos(π·epoch/total)) / 2`.
pub fn cosine_lr(base: f64, epoch: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    let t = epoch.min(total) as f64 / total as f64;
    base * (1.0 + (PI * t).cos()) / 2.0
}

/// `base · factor^k` where k counts the milestones at or before `epoch`.
pub fn step_decay_lr(base: f64, epoch: usize, milestones: &[usize], factor: f64) -> f64 {
    let k = milestones.iter().filter(|&&m| epoch >= m).count();
    base * factor.powi(k as i32)
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Invalid(format!(
            "{op}: parameter shape {:?} vs gradient/state shape {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `v' = m·v + g + wd·p`, `p' = p − lr·v'`. Returns `(p', v')`.
pub fn sgd_momentum_update(
    param: &Tensor,
    grad: &Tensor,
    velocity: &Tensor,
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<(Tensor, Tensor)> {
    same_shape("sgd", param, grad)?;
    same_shape("sgd", param, velocity)?;
    let n = param.numel();
    let (p, g, v) = (param.data(), grad.data(), velocity.data());
    let mut np = Vec::with_capacity(n);
    let mut nv = Vec::with_capacity(n);
    for i in 0..n {
        let vi = momentum * v[i] + g[i] + weight_decay * p[i];
        nv.push(vi);
        np.push(p[i] - lr * vi);
    }
    Ok((Tensor::new(param.shape(), np)?, Tensor::new(param.shape(), nv)?))
}

/// Adam moments and step count.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Tensor,
    pub v: Tensor,
    pub step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        Self {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }
}

/// Adam with L2 weight decay folded into the gradient:
///
/// ```text
/// g  = grad + wd·p
/// m  = β1·m + (1 − β1)·g
/// v  = β2·v + (1 − β2)·g²
/// p' = p − lr·sqrt(1 − β2^t)/(1 − β1^t) · m / (sqrt(v) + eps_hat)
/// ```
pub fn adam_update(
    param: &Tensor,
    grad: &Tensor,
    state: &AdamState,
    lr: f64,
    betas: (f64, f64),
    weight_decay: f64,
    eps_hat: f64,
) -> Result<(Tensor, AdamState)> {
    same_shape("adam", param, grad)?;
    same_shape("adam", param, &state.m)?;
    same_shape("adam", param, &state.v)?;
    if eps_hat <= 0.0 {
        return Err(Error::Invalid(format!("adam: eps_hat must be positive, got {eps_hat}")));
    }
    let (b1, b2) = betas;
    let t = state.step + 1;
    let lr_t = lr * (1.0 - b2.powi(t as i32)).sqrt() / (1.0 - b1.powi(t as i32));
    let n = param.numel();
    let (p, g, m, v) = (param.data(), grad.data(), state.m.data(), state.v.data());
    let (mut np, mut nm, mut nv) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for i in 0..n {
        let gi = g[i] + weight_decay * p[i];
        let mi = b1 * m[i] + (1.0 - b1) * gi;
        let vi = b2 * v[i] + (1.0 - b2) * gi * gi;
        nm.push(mi);
        nv.push(vi);
        np.push(p[i] - lr_t * mi / (vi.sqrt() + eps_hat));
    }
    let shape = param.shape();
    Ok((
        Tensor::new(shape, np)?,
        AdamState {
            m: Tensor::new(shape, nm)?,
            v: Tensor::new(shape, nv)?,
            step: t,
        },
    ))
}

/// Momentum SGD over a parameter store. Velocities are keyed by parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: BTreeMap<ParamId, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self {
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn velocity(&self, id: ParamId) -> Option<&Tensor> {
        self.velocity.get(&id)
    }

    pub fn velocities(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.velocity.iter().map(|(k, v)| (*k, v))
    }

    pub fn set_velocity(&mut self, id: ParamId, v: Tensor) {
        self.velocity.insert(id, v);
    }

    /// Computes every update first and commits only if all results are finite.
    pub fn step(&mut self, store: &mut ParamStore, grads: &GradientMap, lr: f64) -> Result<()> {
        let mut pending = Vec::with_capacity(grads.len());
        for (id, g) in grads.iter() {
            let p = store.get(id);
            let v = self.velocity.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(p.shape()));
            let (np, nv) = sgd_momentum_update(p, g, &v, lr, self.momentum, self.weight_decay)?;
            if !np.is_finite() || !nv.is_finite() {
                return Err(Error::Divergence(format!(
                    "non-finite update for parameter {}",
                    store.name(id)
                )));
            }
            pending.push((id, np, nv));
        }
        for (id, np, nv) in pending {
            store.set(id, np)?;
            self.velocity.insert(id, nv);
        }
        Ok(())
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub eps_hat: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            betas: (0.5, 0.999),
            weight_decay: 1e-3,
            eps_hat: 1e-8,
        }
    }
}
