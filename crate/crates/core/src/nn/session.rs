use std::collections::BTreeMap;

use advnas_tensor::{Gradients, Tape, Tensor, Var};

use super::params::{GradientMap, ParamId, ParamStore};
use crate::error::Result;

/// Batch-norm behaviour for a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalise with batch statistics and report them for running averages.
    Train,
    /// Normalise with running statistics.
    Eval,
}

/// Momentum of the batch-norm running averages.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

/// Per-forward-pass context: which leaves need gradients, the tape handles of
/// the parameters already bound, and the running-statistics updates produced
/// in training mode. A session lives exactly as long as its tape.
#[derive(Debug)]
pub struct Session {
    mode: Mode,
    weight_grads: bool,
    arch_grads: bool,
    bound: BTreeMap<ParamId, Var>,
    arch: Option<Var>,
    stat_updates: Vec<StatUpdate>,
}

impl Session {
    pub fn new(mode: Mode) -> Self {
        Self {
            mode,
            weight_grads: false,
            arch_grads: false,
            bound: BTreeMap::new(),
            arch: None,
            stat_updates: Vec::new(),
        }
    }

    /// Training mode with weight gradients.
    pub fn train() -> Self {
        Self::new(Mode::Train).with_weight_grads(true)
    }

    /// Evaluation mode without parameter gradients.
    pub fn eval() -> Self {
        Self::new(Mode::Eval)
    }

    pub fn with_weight_grads(mut self, on: bool) -> Self {
        self.weight_grads = on;
        self
    }

    pub fn with_arch_grads(mut self, on: bool) -> Self {
        self.arch_grads = on;
        self
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Tape handle for a stored parameter, creating the leaf on first use.
    pub fn param(&mut self, tape: &mut Tape, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = tape.leaf(store.get(id).clone(), self.weight_grads);
        self.bound.insert(id, v);
        v
    }

    /// Binds a stored parameter to an existing tape node, e.g. an input leaf
    /// of a gradient check.
    pub fn bind_param(&mut self, id: ParamId, var: Var) {
        self.bound.insert(id, var);
    }

    /// Binds architecture parameters to an existing tape node, e.g. an input
    /// leaf of a gradient check.
    pub fn bind_arch(&mut self, var: Var) {
        self.arch = Some(var);
    }

    /// Tape handle for the architecture parameters, creating the leaf on first use.
    pub fn arch(&mut self, tape: &mut Tape, value: &Tensor) -> Var {
        if let Some(v) = self.arch {
            return v;
        }
        let v = tape.leaf(value.clone(), self.arch_grads);
        self.arch = Some(v);
        v
    }

    pub fn arch_var(&self) -> Option<Var> {
        self.arch
    }

    pub(crate) fn record_stats(&mut self, update: StatUpdate) {
        self.stat_updates.push(update);
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate> {
        std::mem::take(&mut self.stat_updates)
    }

    /// Gradients of every bound parameter that received one.
    pub fn weight_gradients(&self, grads: &Gradients) -> GradientMap {
        let mut out = GradientMap::new();
        for (&id, &v) in &self.bound {
            if let Some(g) = grads.get(v) {
                out.insert(id, g.clone());
            }
        }
        out
    }

    pub fn arch_gradient(&self, grads: &Gradients) -> Option<Tensor> {
        self.arch.and_then(|v| grads.get(v).cloned())
    }
}

/// Folds training-mode batch statistics into the running averages
/// (biased batch variance is converted to the unbiased estimate).
pub fn apply_stat_updates(store: &mut ParamStore, updates: Vec<StatUpdate>) -> Result<()> {
    for u in updates {
        let correction = if u.count > 1 {
            u.count as f64 / (u.count - 1) as f64
        } else {
            1.0
        };
        let mean = store
            .get(u.mean)
            .data()
            .iter()
            .zip(&u.batch_mean)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b)
            .collect();
        let var = store
            .get(u.var)
            .data()
            .iter()
            .zip(&u.batch_var)
            .map(|(r, b)| (1.0 - BN_MOMENTUM) * r + BN_MOMENTUM * b * correction)
            .collect();
        let shape = store.get(u.mean).shape().to_vec();
        store.set(u.mean, Tensor::new(&shape, mean)?)?;
        store.set(u.var, Tensor::new(&shape, var)?)?;
    }
    Ok(())
}
