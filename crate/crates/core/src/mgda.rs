//! Two-objective min-norm gradient combination.

use crate::error::{Error, Result};
use crate::space::ArchParams;

/// Gradients of the natural (`theta`) and adversarial (`theta_bar`)
/// validation losses with respect to the flattened architecture parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientPair {
    theta: Vec<f64>,
    theta_bar: Vec<f64>,
}

impl GradientPair {
    pub fn new(theta: Vec<f64>, theta_bar: Vec<f64>) -> Result<Self> {
        if theta.len() != theta_bar.len() {
            return Err(Error::Invalid(format!(
                "gradient pair lengths differ: {} vs {}",
                theta.len(),
                theta_bar.len()
            )));
        }
        if !theta.iter().chain(&theta_bar).all(|v| v.is_finite()) {
            return Err(Error::Divergence("non-finite entry in gradient pair".into()));
        }
        Ok(Self { theta, theta_bar })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_bar(&self) -> &[f64] {
        &self.theta_bar
    }

    pub fn len(&self) -> usize {
        self.theta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.theta.is_empty()
    }

    /// Each gradient scaled to unit L2 norm; zero vectors stay zero.
    pub fn normalized(&self) -> Self {
        let unit = |v: &[f64]| {
            let n = norm_sq(v).sqrt();
            if n > 0.0 {
                v.iter().map(|x| x / n).collect()
            } else {
                v.to_vec()
            }
        };
        Self {
            theta: unit(&self.theta),
            theta_bar: unit(&self.theta_bar),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CombineResult {
    pub gamma: f64,
    pub direction: Vec<f64>,
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm_sq(a: &[f64]) -> f64 {
    dot(a, a)
}

/// `γ* = clamp(((θ̄ − θ)ᵀθ̄) / ‖θ − θ̄‖², 0, 1)`, or 0.5 when θ = θ̄.
pub fn compute_gamma(pair: &GradientPair) -> f64 {
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, tb) in pair.theta.iter().zip(&pair.theta_bar) {
        let d = tb - t;
        num += d * tb;
        den += d * d;
    }
    if den == 0.0 {
        0.5
    } else {
        (num / den).clamp(0.0, 1.0)
    }
}

/// `γ*·θ + (1 − γ*)·θ̄`, the min-norm point of the segment between the gradients.
pub fn combine(pair: &GradientPair) -> CombineResult {
    let gamma = compute_gamma(pair);
    let direction = pair
        .theta
        .iter()
        .zip(&pair.theta_bar)
        .map(|(t, tb)| gamma * t + (1.0 - gamma) * tb)
        .collect();
    CombineResult { gamma, direction }
}

/// [`combine`], optionally on per-objective normalised gradients.
pub fn combine_with(pair: &GradientPair, normalize: bool) -> CombineResult {
    if normalize {
        combine(&pair.normalized())
    } else {
        combine(pair)
    }
}

/// `(⟨d, θ⟩ − ‖d‖², ⟨d, θ̄⟩ − ‖d‖²)`; both are non-negative for a common
/// descent direction.
pub fn descent_margins(pair: &GradientPair, direction: &[f64]) -> (f64, f64) {
    let n = norm_sq(direction);
    (dot(direction, &pair.theta) - n, dot(direction, &pair.theta_bar) - n)
}

/// `α − lr · direction` in the flattening order of [`ArchParams`].
pub fn mgda_step(alpha: &ArchParams, pair: &GradientPair, lr: f64) -> Result<ArchParams> {
    if pair.len() != alpha.len() {
        return Err(Error::Invalid(format!(
            "gradient pair has {} entries, architecture parameters have {}",
            pair.len(),
            alpha.len()
        )));
    }
    let d = combine(pair).direction;
    let next = alpha.flat().iter().zip(&d).map(|(a, g)| a - lr * g).collect();
    ArchParams::from_flat(alpha.nodes(), next)
}
