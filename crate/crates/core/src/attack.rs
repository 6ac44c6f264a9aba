//! L∞ adversarial examples (FGSM, PGD) and accuracy under attack.

use advnas_tensor::{sign, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Model, Session};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackKind {
    Fgsm,
    Pgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackConfig {
    pub kind: AttackKind,
    /// L∞ budget in `[0, 1]` pixel units.
    pub epsilon: f64,
    pub step_size: f64,
    pub steps: usize,
    pub random_init: bool,
    pub seed: u64,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_init: false,
            seed: 0,
        }
    }

    pub fn pgd(epsilon: f64, step_size: f64, steps: usize) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            step_size,
            steps,
            random_init: true,
            seed: 0,
        }
    }

    /// 7 steps of 1/510 within 2/255, used while searching.
    pub fn search_default() -> Self {
        Self::pgd(2.0 / 255.0, 1.0 / 510.0, 7)
    }

    /// 7 steps of 0.01 within 8/255, used for final adversarial training.
    pub fn train_default() -> Self {
        Self::pgd(8.0 / 255.0, 0.01, 7)
    }

    /// The alternative training step of 2/255.
    pub fn train_alt_step() -> Self {
        Self::pgd(8.0 / 255.0, 2.0 / 255.0, 7)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn with_random_init(mut self, on: bool) -> Self {
        self.random_init = on;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let e = |m: String| Err(Error::Config(format!("attack: {m}")));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return e(format!("epsilon {} outside [0, 1]", self.epsilon));
        }
        if !(self.step_size >= 0.0 && self.step_size.is_finite()) {
            return e(format!("step size {} must be non-negative", self.step_size));
        }
        if self.steps == 0 {
            return e("steps must be at least 1".into());
        }
        if self.kind == AttackKind::Fgsm && self.steps != 1 {
            return e(format!("FGSM takes exactly 1 step, got {}", self.steps));
        }
        Ok(())
    }

    /// Short label such as `PGD^7` or `FGSM`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::Fgsm => "FGSM".into(),
            AttackKind::Pgd => format!("PGD^{}", self.steps),
        }
    }
}

/// Cross-entropy loss and its gradient with respect to the input. Batch norm
/// uses running statistics; parameters get no gradients.
pub fn input_gradient<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<(f64, Tensor)> {
    let mut tape = Tape::new();
    let xv = tape.leaf(x.clone(), true);
    let mut sess = Session::eval();
    let logits = model.forward(&mut tape, xv, &mut sess)?;
    let loss = tape.cross_entropy(logits, y)?;
    let value = tape.value(loss).item()?;
    if !value.is_finite() {
        return Err(Error::Divergence("non-finite loss while crafting an attack".into()));
    }
    let mut grads = tape.backward(loss)?;
    let g = grads.take(xv).unwrap_or_else(|| Tensor::zeros(x.shape()));
    Ok((value, g))
}

fn check_inputs(x: &Tensor, y: &[usize]) -> Result<()> {
    if x.ndim() != 4 || x.shape()[0] != y.len() {
        return Err(Error::Invalid(format!(
            "attack expects [N, C, H, W] images with N labels, got {:?} and {} labels",
            x.shape(),
            y.len()
        )));
    }
    Ok(())
}

/// `clamp(x + ε·sign(∇x L), 0, 1)`.
pub fn fgsm<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize], epsilon: f64) -> Result<Tensor> {
    check_inputs(x, y)?;
    let (_, g) = input_gradient(model, x, y)?;
    Ok(x.zip_map(&g, |xi, gi| (xi + epsilon * sign(gi)).clamp(0.0, 1.0))?)
}

fn project(v: f64, origin: f64, epsilon: f64) -> f64 {
    v.clamp(origin - epsilon, origin + epsilon).clamp(0.0, 1.0)
}

/// PGD seeded from `cfg.seed`.
pub fn pgd<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize], cfg: &AttackConfig) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    pgd_with_rng(model, x, y, cfg, &mut rng)
}

/// PGD drawing its random start from `rng`. FGSM configs dispatch to [`fgsm`].
pub fn pgd_with_rng<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    cfg.validate()?;
    check_inputs(x, y)?;
    if cfg.kind == AttackKind::Fgsm {
        return fgsm(model, x, y, cfg.epsilon);
    }
    let eps = cfg.epsilon;
    let mut adv = if cfg.random_init && eps > 0.0 {
        x.map(|v| (v + rng.random_range(-eps..=eps)).clamp(0.0, 1.0))
    } else {
        x.clone()
    };
    for k in 1..=cfg.steps {
        let (_, g) = input_gradient(model, &adv, y).map_err(|e| match e {
            Error::Divergence(m) => Error::Divergence(format!("PGD step {k}: {m}")),
            other => other,
        })?;
        let stepped = adv.zip_map(&g, |a, gi| a + cfg.step_size * sign(gi))?;
        adv = stepped.zip_map(x, |a, o| project(a, o, eps))?;
    }
    Ok(adv)
}

/// Mean cross-entropy with running batch-norm statistics.
pub fn eval_loss<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<f64> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, xv, &mut Session::eval())?;
    let loss = tape.cross_entropy(logits, y)?;
    Ok(tape.value(loss).item()?)
}

/// Predicted classes with running batch-norm statistics.
pub fn predict<M: Model + ?Sized>(model: &M, x: &Tensor) -> Result<Vec<usize>> {
    let mut tape = Tape::new();
    let xv = tape.constant(x.clone());
    let logits = model.forward(&mut tape, xv, &mut Session::eval())?;
    let l = tape.value(logits);
    let k = l.shape()[1];
    Ok(l.data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect())
}

pub fn count_correct<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<usize> {
    Ok(predict(model, x)?.iter().zip(y).filter(|(p, t)| p == t).count())
}

/// Exact counts behind an accuracy.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub correct: usize,
    pub total: usize,
}

impl Counts {
    pub fn accuracy(&self) -> f64 {
        if self.total == 0 {
            0.0
        } else {
            self.correct as f64 / self.total as f64
        }
    }
}

fn batches(n: usize, batch: usize) -> impl Iterator<Item = (usize, usize)> {
    let batch = batch.max(1);
    (0..n).step_by(batch).map(move |s| (s, batch.min(n - s)))
}

/// Accuracy on clean inputs, in batches.
pub fn natural_accuracy<M: Model + ?Sized>(model: &M, x: &Tensor, y: &[usize], batch: usize) -> Result<Counts> {
    check_inputs(x, y)?;
    let mut correct = 0;
    for (s, n) in batches(y.len(), batch) {
        correct += count_correct(model, &x.narrow_batch(s, n)?, &y[s..s + n])?;
    }
    Ok(Counts {
        correct,
        total: y.len(),
    })
}

/// Crafts adversarial batches against `source` with one RNG seeded from
/// `cfg.seed`, and counts how many `target` still classifies correctly.
fn attacked_counts<S: Model + ?Sized, T: Model + ?Sized>(
    source: &S,
    target: &T,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    batch: usize,
) -> Result<Counts> {
    check_inputs(x, y)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut correct = 0;
    for (s, n) in batches(y.len(), batch) {
        let xb = x.narrow_batch(s, n)?;
        let yb = &y[s..s + n];
        let adv = pgd_with_rng(source, &xb, yb, cfg, &mut rng)?;
        correct += count_correct(target, &adv, yb)?;
    }
    Ok(Counts {
        correct,
        total: y.len(),
    })
}

/// White-box accuracy under `cfg`.
pub fn adversarial_accuracy<M: Model + ?Sized>(
    model: &M,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    batch: usize,
) -> Result<Counts> {
    attacked_counts(model, model, x, y, cfg, batch)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferReport {
    /// Target accuracy on clean inputs.
    pub natural: Counts,
    /// Target accuracy on examples crafted against the source.
    pub transfer: Counts,
}

/// Black-box transfer: craft with `source`, evaluate `target`.
pub fn transfer_attack<S: Model + ?Sized, T: Model + ?Sized>(
    source: &S,
    target: &T,
    x: &Tensor,
    y: &[usize],
    cfg: &AttackConfig,
    batch: usize,
) -> Result<TransferReport> {
    if source.input_shape() != target.input_shape() {
        return Err(Error::Invalid(format!(
            "source input shape {:?} differs from target {:?}",
            source.input_shape(),
            target.input_shape()
        )));
    }
    Ok(TransferReport {
        natural: natural_accuracy(target, x, y, batch)?,
        transfer: attacked_counts(source, target, x, y, cfg, batch)?,
    })
}
