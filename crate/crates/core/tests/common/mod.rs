#![allow(dead_code)]

use advnas_core::nn::{Model, ParamId, ParamRole, ParamStore, Session};
use advnas_core::space::SupernetConfig;
use advnas_core::Result;
use advnas_tensor::{Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

/// Two cells (one reduction), four channels, 8×8 inputs, two intermediate nodes.
pub fn tiny_config() -> SupernetConfig {
    SupernetConfig {
        cells: 2,
        init_channels: 4,
        reduction_positions: Some(vec![1]),
        intermediate_nodes: 2,
        input_shape: [3, 8, 8],
        classes: 3,
        ..SupernetConfig::desk_scale()
    }
}

/// Global average pooling followed by `logits = pooled · W + b`.
#[derive(Debug, Clone)]
pub struct LinearModel {
    pub store: ParamStore,
    pub w: ParamId,
    pub b: ParamId,
    pub shape: [usize; 3],
    pub classes: usize,
}

impl LinearModel {
    pub fn new(shape: [usize; 3], w: Tensor, b: Tensor) -> Self {
        let classes = b.numel();
        let mut store = ParamStore::new();
        let w = store.add("w", w, ParamRole::Weight);
        let b = store.add("b", b, ParamRole::Weight);
        Self {
            store,
            w,
            b,
            shape,
            classes,
        }
    }

    /// Zero weights: the logits are `b` whatever the input.
    pub fn constant(shape: [usize; 3], b: Vec<f64>) -> Self {
        let k = b.len();
        Self::new(shape, Tensor::zeros(&[shape[0], k]), Tensor::from_vec(b))
    }
}

impl Model for LinearModel {
    fn forward(&self, tape: &mut Tape, input: Var, sess: &mut Session) -> Result<Var> {
        let g = tape.global_avg_pool(input)?;
        let w = sess.param(tape, &self.store, self.w);
        let b = sess.param(tape, &self.store, self.b);
        let l = tape.matmul(g, w)?;
        Ok(tape.add_bias(l, b)?)
    }
    fn params(&self) -> &ParamStore {
        &self.store
    }
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }
    fn input_shape(&self) -> [usize; 3] {
        self.shape
    }
    fn classes(&self) -> usize {
        self.classes
    }
}
