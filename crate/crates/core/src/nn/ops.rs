use std::fmt;
use std::str::FromStr;

use advnas_tensor::{Conv2dAttrs, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{BatchNorm, Builder, Conv, DepthwiseUnit, FactorizedReduce, Fwd, Linear, Normalization, Pool, PoolKind};
use crate::error::{Error, Result};

/// Candidate operations. The declaration order is the column order of α.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    SepConv3x3,
    SepConv5x5,
    DilConv3x3,
    DilConv5x5,
    MaxPool3x3,
    AvgPool3x3,
    Identity,
}

impl OpKind {
    pub const ALL: [OpKind; 7] = [
        OpKind::SepConv3x3,
        OpKind::SepConv5x5,
        OpKind::DilConv3x3,
        OpKind::DilConv5x5,
        OpKind::MaxPool3x3,
        OpKind::AvgPool3x3,
        OpKind::Identity,
    ];

    pub const COUNT: usize = 7;

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<OpKind> {
        Self::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            OpKind::SepConv3x3 => "sep_conv_3x3",
            OpKind::SepConv5x5 => "sep_conv_5x5",
            OpKind::DilConv3x3 => "dil_conv_3x3",
            OpKind::DilConv5x5 => "dil_conv_5x5",
            OpKind::MaxPool3x3 => "max_pool_3x3",
            OpKind::AvgPool3x3 => "avg_pool_3x3",
            OpKind::Identity => "identity",
        }
    }

    /// Trainable scalar count of a block, computed without building it.
    pub fn param_count(self, channels: usize, stride: usize, affine: bool) -> usize {
        let c = channels;
        let bn = if affine { 2 * c } else { 0 };
        match self {
            OpKind::SepConv3x3 => 2 * (c * 9 + c * c + bn),
            OpKind::SepConv5x5 => 2 * (c * 25 + c * c + bn),
            OpKind::DilConv3x3 => c * 9 + c * c + bn,
            OpKind::DilConv5x5 => c * 25 + c * c + bn,
            OpKind::MaxPool3x3 | OpKind::AvgPool3x3 => bn,
            OpKind::Identity if stride == 1 => 0,
            OpKind::Identity => c * c + bn,
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Genotype(format!("unknown operation `{s}`")))
    }
}

#[derive(Debug, Clone)]
enum Body {
    Sep(DepthwiseUnit, DepthwiseUnit),
    Dil(DepthwiseUnit),
    Pool(Pool),
    Identity,
    Reduce(FactorizedReduce),
}

/// One candidate operation instantiated at a channel count and stride.
#[derive(Debug, Clone)]
pub struct OpBlock {
    kind: OpKind,
    channels: usize,
    stride: usize,
    body: Body,
}

impl OpBlock {
    pub fn new<R: Rng>(
        b: &mut Builder<'_, R>,
        name: &str,
        kind: OpKind,
        channels: usize,
        stride: usize,
        affine: bool,
    ) -> Result<Self> {
        if stride != 1 && stride != 2 {
            return Err(Error::Config(format!("{name}: stride must be 1 or 2, got {stride}")));
        }
        if channels == 0 {
            return Err(Error::Config(format!("{name}: channel count must be positive")));
        }
        let c = channels;
        let body = match kind {
            OpKind::SepConv3x3 | OpKind::SepConv5x5 => {
                let k = if kind == OpKind::SepConv3x3 { 3 } else { 5 };
                Body::Sep(
                    DepthwiseUnit::new(b, &format!("{name}.u0"), c, c, k, stride, 1, affine),
                    DepthwiseUnit::new(b, &format!("{name}.u1"), c, c, k, 1, 1, affine),
                )
            }
            OpKind::DilConv3x3 | OpKind::DilConv5x5 => {
                let k = if kind == OpKind::DilConv3x3 { 3 } else { 5 };
                Body::Dil(DepthwiseUnit::new(b, name, c, c, k, stride, 2, affine))
            }
            OpKind::MaxPool3x3 => Body::Pool(Pool::new(b, name, PoolKind::Max, c, stride, affine)),
            OpKind::AvgPool3x3 => Body::Pool(Pool::new(b, name, PoolKind::Avg, c, stride, affine)),
            OpKind::Identity if stride == 1 => Body::Identity,
            OpKind::Identity => Body::Reduce(FactorizedReduce::new(b, name, c, c, affine)?),
        };
        Ok(Self {
            kind,
            channels,
            stride,
            body,
        })
    }

    pub fn kind(&self) -> OpKind {
        self.kind
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn stride(&self) -> usize {
        self.stride
    }
}

/// Applies one block. Input must be `[N, channels, H, W]`.
pub fn apply_op(block: &OpBlock, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
    let s = f.tape.shape(x);
    if s.len() != 4 || s[1] != block.channels {
        return Err(Error::Invalid(format!(
            "{}: expected input with {} channels, got shape {:?}",
            block.kind,
            block.channels,
            s
        )));
    }
    match &block.body {
        Body::Sep(a, b) => {
            let h = a.forward(f, x)?;
            b.forward(f, h)
        }
        Body::Dil(u) => u.forward(f, x),
        Body::Pool(p) => p.forward(f, x),
        Body::Identity => Ok(x),
        Body::Reduce(r) => r.forward(f, x),
    }
}

/// 3×3 convolution from the image channels to `C0`, then batch norm.
#[derive(Debug, Clone)]
pub struct Stem {
    normalization: Option<Normalization>,
    conv: Conv,
    bn: BatchNorm,
    out_channels: usize,
}

impl Stem {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, in_channels: usize, out_channels: usize, normalization: Option<Normalization>) -> Result<Self> {
        if out_channels == 0 {
            return Err(Error::Config("stem channel count must be positive".into()));
        }
        Ok(Self {
            normalization,
            conv: Conv::new(b, "stem.conv", in_channels, out_channels, 3, Conv2dAttrs::new(1, 1, 1, 1)),
            bn: BatchNorm::new(b, "stem.bn", out_channels, true),
            out_channels,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let x = match &self.normalization {
            Some(n) => n.apply(f.tape, x)?,
            None => x,
        };
        let c = self.conv.forward(f, x)?;
        self.bn.forward(f, c)
    }
}

/// Global average pooling followed by a linear classifier.
#[derive(Debug, Clone)]
pub struct Head {
    linear: Linear,
    classes: usize,
}

impl Head {
    pub fn new<R: Rng>(b: &mut Builder<'_, R>, channels: usize, classes: usize) -> Result<Self> {
        if classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
        }
        Ok(Self {
            linear: Linear::new(b, "head.linear", channels, classes),
            classes,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn linear(&self) -> &Linear {
        &self.linear
    }

    pub fn forward(&self, f: &mut Fwd<'_>, x: Var) -> Result<Var> {
        let g = f.tape.global_avg_pool(x)?;
        self.linear.forward(f, g)
    }
}
