use crate::error::TensorError;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Outcome of comparing tape gradients against central differences.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic − numeric| / max(1, |analytic|)
    pub max_rel_error: f64,
    pub worst_index: usize,
    pub checked: usize,
    pub analytic: Tensor,
}

/// Checks the reverse-mode gradient of a scalar function of one tensor.
///
/// `f` receives a fresh tape and the input leaf and must return a scalar node.
/// Only the coordinates in `coords` are perturbed when it is given, which keeps
/// checks of large parameter tensors affordable.
pub fn finite_difference_check<F, E>(
    mut f: F,
    point: &Tensor,
    h: f64,
    coords: Option<&[usize]>,
) -> Result<GradCheckReport, E>
where
    F: FnMut(&mut Tape, Var) -> Result<Var, E>,
    E: From<TensorError>,
{
    if !(h > 0.0 && h.is_finite()) {
        return Err(TensorError::Attr {
            op: "finite_difference_check",
            detail: format!("step must be positive, got {h}"),
        }
        .into());
    }
    let mut tape = Tape::new();
    let x = tape.leaf(point.clone(), true);
    let loss = f(&mut tape, x)?;
    if !tape.value(loss).is_finite() {
        return Err(TensorError::NonFinite("finite_difference_check").into());
    }
    let analytic = tape
        .backward(loss)?
        .take(x)
        .unwrap_or_else(|| Tensor::zeros(point.shape()));

    let mut eval = |p: Tensor| -> Result<f64, E> {
        let mut tape = Tape::new();
        let x = tape.leaf(p, false);
        let out = f(&mut tape, x)?;
        let v = tape.value(out).item()?;
        if !v.is_finite() {
            return Err(TensorError::NonFinite("finite_difference_check").into());
        }
        Ok(v)
    };

    let all: Vec<usize>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = (0..point.numel()).collect();
            &all
        }
    };
    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for &i in coords {
        let mut plus = point.clone();
        plus.data_mut()[i] += h;
        let mut minus = point.clone();
        minus.data_mut()[i] -= h;
        let numeric = (eval(plus)? - eval(minus)?) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        checked: coords.len(),
        analytic,
    })
}
