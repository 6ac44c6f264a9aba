//! Parameters, layers and the candidate-operation blocks.

pub mod layers;
pub mod ops;
pub mod params;
pub mod session;

use std::collections::BTreeMap;

use advnas_tensor::{Tape, Tensor, Var};

pub use layers::{Builder, Fwd, Normalization, BN_EPS};
pub use ops::{apply_op, Head, OpBlock, OpKind, Stem};
pub use params::{fan_in_uniform, GradientMap, ParamId, ParamRole, ParamStore};
pub use session::{apply_stat_updates, Mode, Session, StatUpdate, BN_MOMENTUM};

use crate::error::Result;

/// An image classifier built on the tape.
pub trait Model {
    /// Logits `[N, classes]` for an `[N, C, H, W]` input.
    fn forward(&self, tape: &mut Tape, input: Var, sess: &mut Session) -> Result<Var>;
    fn params(&self) -> &ParamStore;
    fn params_mut(&mut self) -> &mut ParamStore;
    /// `[C, H, W]` of one input image.
    fn input_shape(&self) -> [usize; 3];
    fn classes(&self) -> usize;
}

/// Replaces every batch-norm running average with the exact statistics of
/// `images`, gathered by training-mode forward passes over `batch`-sized
/// chunks. Variances are unbiased.
pub fn recalibrate_batch_norm<M: Model + ?Sized>(model: &mut M, images: &Tensor, batch: usize) -> Result<()> {
    let n = images.shape().first().copied().unwrap_or(0);
    let mut acc: BTreeMap<(ParamId, ParamId), (f64, Vec<f64>, Vec<f64>)> = BTreeMap::new();
    let mut start = 0;
    while start < n {
        let len = batch.max(1).min(n - start);
        let mut tape = Tape::new();
        let x = tape.constant(images.narrow_batch(start, len)?);
        let mut sess = Session::new(Mode::Train);
        model.forward(&mut tape, x, &mut sess)?;
        for u in sess.take_stat_updates() {
            let c = u.count as f64;
            let e = acc
                .entry((u.mean, u.var))
                .or_insert_with(|| (0.0, vec![0.0; u.batch_mean.len()], vec![0.0; u.batch_mean.len()]));
            e.0 += c;
            for (i, (&m, &v)) in u.batch_mean.iter().zip(&u.batch_var).enumerate() {
                e.1[i] += c * m;
                e.2[i] += c * (v + m * m);
            }
        }
        start += len;
    }
    let store = model.params_mut();
    for ((mid, vid), (count, s1, s2)) in acc {
        let correction = if count > 1.0 { count / (count - 1.0) } else { 1.0 };
        let mean: Vec<f64> = s1.iter().map(|s| s / count).collect();
        let var = s2
            .iter()
            .zip(&mean)
            .map(|(s, m)| (s / count - m * m).max(0.0) * correction)
            .collect();
        let shape = store.get(mid).shape().to_vec();
        store.set(mid, Tensor::new(&shape, mean)?)?;
        store.set(vid, Tensor::new(&shape, var)?)?;
    }
    Ok(())
}
