use advnas_tensor::{BatchNormStats, Conv2dAttrs, Pool2dAttrs, Tape, Tensor, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::params::{fan_in_uniform, ParamId, ParamRole, ParamStore};
use super::session::{Mode, Session, StatUpdate};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

/// Everything a layer needs during a forward pass.
pub struct Fwd<'a> {
    pub tape: &'a mut Tape,
    pub store: &'a ParamStore,
    pub sess: &'a mut Session,
}

impl Fwd<'_> {
    pub fn param(&mut self, id: ParamId) -> Var {
        self.sess.param(self.tape, self.store, id)
    }
}

/// Creates parameters for one network, naming them hierarchically.
pub struct Builder<'a, R: Rng> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut R,
}

impl<R: Rng> Builder<'_, R> {
    fn conv_weight(&mut self, name: &str, cout: usize, cin_per_group: usize, k: usize) -> ParamId {
        let w = fan_in_uniform(&[cout, cin_per_group, k, k], cin_per_group * k * k, self.rng);
        self.store.add(format!("{name}.weight"), w, ParamRole::Weight)
    }
}

#[derive(Debug, Clone)]
pub struct Conv {
    weight: ParamId,
    attrs: Conv2dAttrs,
}

impl Conv {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, kernel: usize, attrs: Conv2dAttrs) -> Self {
        let weight = b.conv_weight(name, cout, cin / attrs.groups, kernel);
        Self { weight, attrs }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let w = f.param(self.weight);
        Ok(f.tape.conv2d(x, w, self.attrs)?)
    }
}

#[derive(Debug, Clone)]
pub struct BatchNorm {
    affine: Option<(ParamId, ParamId)>,
    running_mean: ParamId,
    running_var: ParamId,
}

impl BatchNorm {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, channels: usize, affine: bool) -> Self {
        let affine = affine.then(|| {
            (
                b.store
                    .add(format!("{name}.gamma"), Tensor::full(&[channels], 1.0), ParamRole::Weight),
                b.store
                    .add(format!("{name}.beta"), Tensor::zeros(&[channels]), ParamRole::Weight),
            )
        });
        let running_mean = b.store.add(
            format!("{name}.running_mean"),
            Tensor::zeros(&[channels]),
            ParamRole::Buffer,
        );
        let running_var = b.store.add(
            format!("{name}.running_var"),
            Tensor::full(&[channels], 1.0),
            ParamRole::Buffer,
        );
        Self {
            affine,
            running_mean,
            running_var,
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let affine = self.affine.map(|(g, b)| (f.param(g), f.param(b)));
        match f.sess.mode() {
            Mode::Train => {
                let out = f.tape.batch_norm2d(x, affine, BatchNormStats::Batch, BN_EPS)?;
                f.sess.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    batch_mean: out.batch_mean,
                    batch_var: out.batch_var,
                    count: out.count,
                });
                Ok(out.output)
            }
            Mode::Eval => {
                let stats = BatchNormStats::Running {
                    mean: f.store.get(self.running_mean).data(),
                    var: f.store.get(self.running_var).data(),
                };
                Ok(f.tape.batch_norm2d(x, affine, stats, BN_EPS)?.output)
            }
        }
    }
}

/// relu → 1×1 conv → batch norm; reconciles channel counts between cells.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    conv: Conv,
    bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, affine: bool) -> Self {
        Self {
            conv: Conv::new(b, &format!("{name}.conv"), cin, cout, 1, Conv2dAttrs::default()),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout, affine),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let r = f.tape.relu(x);
        let c = self.conv.forward(f, r)?;
        self.bn.forward(f, c)
    }
}

/// Halves the spatial extent while keeping all input positions in play:
/// two stride-2 1×1 convolutions, one on a one-pixel-shifted view, concatenated.
#[derive(Debug, Clone)]
pub struct FactorizedReduce {
    even: Conv,
    odd: Conv,
    bn: BatchNorm,
}

impl FactorizedReduce {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, cin: usize, cout: usize, affine: bool) -> Result<Self> {
        if cout % 2 != 0 {
            return Err(Error::Config(format!(
                "{name}: factorized reduction needs an even channel count, got {cout}"
            )));
        }
        let attrs = Conv2dAttrs::new(2, 0, 1, 1);
        Ok(Self {
            even: Conv::new(b, &format!("{name}.conv_a"), cin, cout / 2, 1, attrs),
            odd: Conv::new(b, &format!("{name}.conv_b"), cin, cout / 2, 1, attrs),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout, affine),
        })
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let s = f.tape.shape(x).to_vec();
        if s[2] % 2 != 0 || s[3] % 2 != 0 {
            return Err(Error::Invalid(format!(
                "factorized reduction needs even spatial extent, got {s:?}"
            )));
        }
        let r = f.tape.relu(x);
        let a = self.even.forward(f, r)?;
        let shifted = f.tape.crop2d(r, 1, 1, s[2] - 1, s[3] - 1)?;
        let b = self.odd.forward(f, shifted)?;
        let cat = f.tape.concat(&[a, b])?;
        self.bn.forward(f, cat)
    }
}

/// relu → depthwise k×k (optionally dilated) → pointwise 1×1 → batch norm.
#[derive(Debug, Clone)]
pub struct DepthwiseUnit {
    depthwise: Conv,
    pointwise: Conv,
    bn: BatchNorm,
}

impl DepthwiseUnit {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        cin: usize,
        cout: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        affine: bool,
    ) -> Self {
        let padding = dilation * (kernel - 1) / 2;
        Self {
            depthwise: Conv::new(
                b,
                &format!("{name}.dw"),
                cin,
                cin,
                kernel,
                Conv2dAttrs::new(stride, padding, dilation, cin),
            ),
            pointwise: Conv::new(b, &format!("{name}.pw"), cin, cout, 1, Conv2dAttrs::default()),
            bn: BatchNorm::new(b, &format!("{name}.bn"), cout, affine),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let r = f.tape.relu(x);
        let d = self.depthwise.forward(f, r)?;
        let p = self.pointwise.forward(f, d)?;
        self.bn.forward(f, p)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

/// 3×3 pooling (padding 1) followed by batch norm.
#[derive(Debug, Clone)]
pub struct Pool {
    kind: PoolKind,
    stride: usize,
    bn: BatchNorm,
}

impl Pool {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, kind: PoolKind, channels: usize, stride: usize, affine: bool) -> Self {
        Self {
            kind,
            stride,
            bn: BatchNorm::new(b, &format!("{name}.bn"), channels, affine),
        }
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let attrs = Pool2dAttrs {
            kernel: 3,
            stride: self.stride,
            padding: 1,
        };
        let p = match self.kind {
            PoolKind::Max => f.tape.max_pool2d(x, attrs)?,
            PoolKind::Avg => f.tape.avg_pool2d(x, attrs)?,
        };
        self.bn.forward(f, p)
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: ParamId,
    bias: ParamId,
}

impl Linear {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = fan_in_uniform(&[inputs, outputs], inputs, b.rng);
        let bias = fan_in_uniform(&[outputs], inputs, b.rng);
        Self {
            weight: b.store.add(format!("{name}.weight"), weight, ParamRole::Weight),
            bias: b.store.add(format!("{name}.bias"), bias, ParamRole::Weight),
        }
    }

    pub fn weight_id(&self) -> ParamId {
        self.weight
    }

    pub fn bias_id(&self) -> ParamId {
        self.bias
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let (w, b) = (f.param(self.weight), f.param(self.bias));
        let m = f.tape.matmul(x, w)?;
        Ok(f.tape.add_bias(m, b)?)
    }
}

/// Per-channel input standardisation applied inside the network, so attack
/// budgets stay expressed in raw `[0, 1]` pixel units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl Normalization {
    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 || s[1] != 3 {
            return Err(Error::Invalid(format!("normalization expects [N, 3, H, W], got {s:?}")));
        }
        let plane = s[2] * s[3];
        let mut shift = Tensor::zeros(&s);
        let mut scale = Tensor::zeros(&s);
        for (i, (sh, sc)) in shift
            .data_mut()
            .chunks_mut(plane)
            .zip(scale.data_mut().chunks_mut(plane))
            .enumerate()
        {
            sh.fill(self.mean[i % 3]);
            sc.fill(1.0 / self.std[i % 3]);
        }
        let shift = tape.constant(shift);
        let scale = tape.constant(scale);
        let centred = tape.sub(x, shift)?;
        Ok(tape.mul(centred, scale)?)
    }
}
