//! The recording tape and its reverse sweep.
//!
//! Each primitive evaluates eagerly, stores its output value on the tape and
//! remembers its parents plus whatever the backward rule needs. Nodes are
//! appended in evaluation order, so the tape is topologically sorted by
//! construction and the reverse sweep is a single backwards pass.

use crate::error::{shape_err, Result, TensorError};
use crate::kernels::{self, Conv2dAttrs, ConvGeom, Pool2dAttrs, PoolGeom};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which normalisation statistics a batch-norm node uses.
#[derive(Debug, Clone, Copy)]
pub enum BatchNormStats<'a> {
    /// Per-channel statistics of the current batch (training mode).
    Batch,
    /// Fixed running statistics (evaluation mode).
    Running { mean: &'a [f64], var: &'a [f64] },
}

/// Result of a batch-norm node. The batch statistics are reported so the
/// caller can maintain running averages; `batch_var` is the biased variance.
#[derive(Debug, Clone)]
pub struct BatchNormOut {
    pub output: Var,
    pub batch_mean: Vec<f64>,
    pub batch_var: Vec<f64>,
    pub count: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    Mul(Var, Var),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
    },
    MaxPool2d {
        input: Var,
        argmax: Vec<usize>,
    },
    AvgPool2d {
        input: Var,
        geom: PoolGeom,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    BatchNorm {
        input: Var,
        affine: Option<(Var, Var)>,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    Sign(Var),
    Clamp(Var, f64, f64),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    WeightedSum {
        inputs: Vec<Var>,
        weights: Var,
        offset: usize,
    },
    Crop {
        input: Var,
        top: usize,
        left: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of primitive applications for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to every gradient-requiring leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

const BN_OP: &str = "batch_norm2d";

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records an input tensor. Gradients are reported only for leaves created
    /// with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(
                op,
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        Ok(())
    }

    fn elementwise(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let value = self.value(a).zip_map(self.value(b), f)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        let rg = self.any_grad(&[a]);
        self.push(value, Op::Scale(a, c), rg)
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x);
        let k = *xs.last().ok_or_else(|| shape_err("add_bias", "scalar input"))?;
        if self.shape(bias) != [k] {
            return Err(shape_err(
                "add_bias",
                format!("input {:?} vs bias {:?}", xs, self.shape(bias)),
            ));
        }
        let b = self.value(bias).data();
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddBias(x, bias), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// NCHW convolution; weight is `[out, in/groups, k, k]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, attrs: Conv2dAttrs) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(input), self.shape(weight), attrs)?;
        let out = kernels::conv2d_forward(&geom, self.value(input).data(), self.value(weight).data());
        let rg = self.any_grad(&[input, weight]);
        Ok(self.push(
            Tensor::new(&geom.out_shape(), out)?,
            Op::Conv2d {
                input,
                weight,
                geom,
            },
            rg,
        ))
    }

    pub fn max_pool2d(&mut self, input: Var, attrs: Pool2dAttrs) -> Result<Var> {
        let geom = PoolGeom::new("max_pool2d", self.shape(input), attrs)?;
        let (out, argmax) = kernels::max_pool_forward(&geom, self.value(input).data());
        let s = self.shape(input);
        let shape = [s[0], s[1], geom.oh, geom.ow];
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::MaxPool2d { input, argmax }, rg))
    }

    /// Average pooling; the divisor counts padded zeros.
    pub fn avg_pool2d(&mut self, input: Var, attrs: Pool2dAttrs) -> Result<Var> {
        let geom = PoolGeom::new("avg_pool2d", self.shape(input), attrs)?;
        let out = kernels::avg_pool_forward(&geom, self.value(input).data());
        let s = self.shape(input);
        let shape = [s[0], s[1], geom.oh, geom.ow];
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AvgPool2d { input, geom }, rg))
    }

    /// `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, input: Var) -> Result<Var> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 || s[2] * s[3] == 0 {
            return Err(shape_err("global_avg_pool", format!("expected non-empty 4-d input, got {s:?}")));
        }
        let hw = s[2] * s[3];
        let out: Vec<f64> = self
            .value(input)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        let rg = self.any_grad(&[input]);
        Ok(self.push(Tensor::new(&[s[0], s[1]], out)?, Op::GlobalAvgPool(input), rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn batch_norm2d(
        &mut self,
        input: Var,
        affine: Option<(Var, Var)>,
        stats: BatchNormStats<'_>,
        eps: f64,
    ) -> Result<BatchNormOut> {
        let s = self.shape(input).to_vec();
        if s.len() != 4 {
            return Err(shape_err(BN_OP, format!("expected 4-d input, got {s:?}")));
        }
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let count = n * hw;
        if count == 0 {
            return Err(shape_err(BN_OP, format!("empty input {s:?}")));
        }
        if let Some((g, b)) = affine {
            if self.shape(g) != [c] || self.shape(b) != [c] {
                return Err(shape_err(
                    BN_OP,
                    format!("affine {:?}/{:?} for {c} channels", self.shape(g), self.shape(b)),
                ));
            }
        }
        let x = self.value(input).data();
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                mean[ci] += x[(ni * c + ci) * hw..][..hw].iter().sum::<f64>();
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        for ni in 0..n {
            for ci in 0..c {
                let m = mean[ci];
                var[ci] += x[(ni * c + ci) * hw..][..hw]
                    .iter()
                    .map(|v| (v - m) * (v - m))
                    .sum::<f64>();
            }
        }
        var.iter_mut().for_each(|v| *v /= count as f64);

        let (use_mean, use_var, batch_stats) = match stats {
            BatchNormStats::Batch => (mean.clone(), var.clone(), true),
            BatchNormStats::Running { mean: rm, var: rv } => {
                if rm.len() != c || rv.len() != c {
                    return Err(shape_err(BN_OP, format!("running stats for {} channels, input has {c}", rm.len())));
                }
                (rm.to_vec(), rv.to_vec(), false)
            }
        };
        let inv_std: Vec<f64> = use_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut normalized = vec![0.0; x.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let (m, is) = (use_mean[ci], inv_std[ci]);
                for (o, v) in normalized[base..base + hw].iter_mut().zip(&x[base..base + hw]) {
                    *o = (v - m) * is;
                }
            }
        }
        let mut out = normalized.clone();
        if let Some((g, b)) = affine {
            let (gv, bv) = (self.value(g).data(), self.value(b).data());
            for ni in 0..n {
                for ci in 0..c {
                    for o in &mut out[(ni * c + ci) * hw..][..hw] {
                        *o = *o * gv[ci] + bv[ci];
                    }
                }
            }
        }
        let mut parents = vec![input];
        if let Some((g, b)) = affine {
            parents.extend([g, b]);
        }
        let rg = self.any_grad(&parents);
        let output = self.push(
            Tensor::new(&s, out)?,
            Op::BatchNorm {
                input,
                affine,
                normalized,
                inv_std,
                batch_stats,
            },
            rg,
        );
        Ok(BatchNormOut {
            output,
            batch_mean: mean,
            batch_var: var,
            count,
        })
    }

    /// Softmax along the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let k = last_extent("softmax", self.shape(x))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            softmax_in_place(row);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Log-softmax along the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let k = last_extent("log_softmax", self.shape(x))?;
        let mut value = self.value(x).clone();
        for row in value.data_mut().chunks_mut(k) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::LogSoftmax(x), rg))
    }

    /// Mean cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        const OP: &str = "cross_entropy";
        let s = self.shape(logits);
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(shape_err(OP, format!("logits {s:?} with {} labels", labels.len())));
        }
        let k = s[1];
        if let Some(bad) = labels.iter().find(|&&l| l >= k) {
            return Err(shape_err(OP, format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = self.value(logits).data().to_vec();
        let mut loss = 0.0;
        for (row, &l) in probs.chunks_mut(k).zip(labels) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            loss += lse - row[l];
            softmax_in_place(row);
        }
        loss /= labels.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Concatenation along axis 1 (channels for NCHW).
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        const OP: &str = "concat";
        let first = xs.first().ok_or_else(|| shape_err(OP, "no inputs"))?;
        let s0 = self.shape(*first).to_vec();
        if s0.len() < 2 {
            return Err(shape_err(OP, format!("need at least 2-d inputs, got {s0:?}")));
        }
        let mut channels = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(shape_err(OP, format!("{s0:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let inner: usize = s0[2..].iter().product();
        let n = s0[0];
        let mut out = Vec::with_capacity(n * channels * inner);
        for ni in 0..n {
            for &x in xs {
                let c = self.shape(x)[1];
                out.extend_from_slice(&self.value(x).data()[ni * c * inner..(ni + 1) * c * inner]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = channels;
        let rg = self.any_grad(xs);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat(xs.to_vec()), rg))
    }

    /// Elementwise sign with `sign(0) = 0`; its derivative is taken as zero.
    pub fn sign(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sign);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sign(x), rg)
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi || lo.is_nan() || hi.is_nan() {
            return Err(TensorError::Attr {
                op: "clamp",
                detail: format!("lo {lo} > hi {hi}"),
            });
        }
        let value = self.value(x).map(|v| v.clamp(lo, hi));
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Clamp(x, lo, hi), rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel();
        if n == 0 {
            return Err(shape_err("mean", "empty tensor"));
        }
        let value = Tensor::scalar(self.value(x).sum() / n as f64);
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Mean(x), rg))
    }

    /// `Σ_k weights[offset + k] · inputs[k]` over equally shaped inputs, where
    /// `weights` is read as a flat vector.
    pub fn weighted_sum(&mut self, inputs: &[Var], weights: Var, offset: usize) -> Result<Var> {
        const OP: &str = "weighted_sum";
        let first = *inputs.first().ok_or_else(|| shape_err(OP, "no inputs"))?;
        if offset + inputs.len() > self.value(weights).numel() {
            return Err(shape_err(
                OP,
                format!(
                    "{} inputs at offset {offset} exceed {} weights",
                    inputs.len(),
                    self.value(weights).numel()
                ),
            ));
        }
        for &x in &inputs[1..] {
            self.same_shape(OP, first, x)?;
        }
        let w = &self.value(weights).data()[offset..offset + inputs.len()];
        let mut out = vec![0.0; self.value(first).numel()];
        for (&x, &wk) in inputs.iter().zip(w) {
            for (o, v) in out.iter_mut().zip(self.value(x).data()) {
                *o += wk * v;
            }
        }
        let shape = self.shape(first).to_vec();
        let mut parents = inputs.to_vec();
        parents.push(weights);
        let rg = self.any_grad(&parents);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::WeightedSum {
                inputs: inputs.to_vec(),
                weights,
                offset,
            },
            rg,
        ))
    }

    /// Spatial window `[top..top+height, left..left+width]` of an NCHW tensor.
    pub fn crop2d(&mut self, x: Var, top: usize, left: usize, height: usize, width: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 || top + height > s[2] || left + width > s[3] {
            return Err(shape_err(
                "crop2d",
                format!("window ({top},{left}) {height}x{width} outside {s:?}"),
            ));
        }
        let (h, w) = (s[2], s[3]);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * height * width);
        for p in 0..s[0] * s[1] {
            for r in top..top + height {
                out.extend_from_slice(&src[p * h * w + r * w + left..][..width]);
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Tensor::new(&[s[0], s[1], height, width], out)?,
            Op::Crop { input: x, top, left },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss. The tape is left untouched, so
    /// repeated calls return identical gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::Invalid(format!("{loss:?} is not on this tape")));
        }
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(TensorError::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, g, &mut grads)?;
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (&self.nodes[i].op, g) {
                (Op::Leaf, Some(g)) => Some(Tensor::new(self.nodes[i].value.shape(), g).expect("gradient shape")),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    fn backprop_node(&self, node: &Node, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) -> Result<()> {
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *b, g.clone());
                self.accumulate(grads, *a, g);
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
                self.accumulate(grads, *a, g);
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g.iter().map(|v| v * c).collect()),
            Op::Mul(a, b) => {
                let ga = g.iter().zip(val(*b)).map(|(x, y)| x * y).collect();
                let gb = g.iter().zip(val(*a)).map(|(x, y)| x * y).collect();
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::AddBias(x, b) => {
                let k = val(*b).len();
                let mut gb = vec![0.0; k];
                for row in g.chunks(k) {
                    gb.iter_mut().zip(row).for_each(|(a, v)| *a += v);
                }
                self.accumulate(grads, *b, gb);
                self.accumulate(grads, *x, g);
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.requires_grad(*a) {
                    let bt = transpose(val(*b), k, n);
                    self.accumulate(grads, *a, matmul_raw(&g, &bt, m, n, k));
                }
                if self.requires_grad(*b) {
                    let at = transpose(val(*a), m, k);
                    self.accumulate(grads, *b, matmul_raw(&at, &g, k, m, n));
                }
            }
            Op::Conv2d { input, weight, geom } => {
                if self.requires_grad(*input) {
                    let gi = kernels::conv2d_backward_input(geom, &g, val(*weight));
                    self.accumulate(grads, *input, gi);
                }
                if self.requires_grad(*weight) {
                    let gw = kernels::conv2d_backward_weight(geom, &g, val(*input));
                    self.accumulate(grads, *weight, gw);
                }
            }
            Op::MaxPool2d { input, argmax } => {
                let mut gi = vec![0.0; val(*input).len()];
                for (&src, v) in argmax.iter().zip(&g) {
                    gi[src] += v;
                }
                self.accumulate(grads, *input, gi);
            }
            Op::AvgPool2d { input, geom } => {
                self.accumulate(grads, *input, kernels::avg_pool_backward(geom, &g));
            }
            Op::GlobalAvgPool(x) => {
                let s = self.shape(*x);
                let hw = s[2] * s[3];
                let mut gi = Vec::with_capacity(val(*x).len());
                for v in &g {
                    gi.extend(std::iter::repeat_n(v / hw as f64, hw));
                }
                self.accumulate(grads, *x, gi);
            }
            Op::Relu(x) => {
                let gi = g
                    .iter()
                    .zip(node.value.data())
                    .map(|(gv, o)| if *o > 0.0 { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::BatchNorm {
                input,
                affine,
                normalized,
                inv_std,
                batch_stats,
            } => self.backprop_batch_norm(grads, &g, *input, *affine, normalized, inv_std, *batch_stats),
            Op::Softmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut gi = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gi.chunks_mut(k)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = yv * (gv - dot);
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::LogSoftmax(x) => {
                let y = node.value.data();
                let k = *node.value.shape().last().unwrap_or(&1);
                let mut gi = vec![0.0; y.len()];
                for ((gr, yr), out) in g.chunks(k).zip(y.chunks(k)).zip(gi.chunks_mut(k)) {
                    let total: f64 = gr.iter().sum();
                    for ((o, gv), yv) in out.iter_mut().zip(gr).zip(yr) {
                        *o = gv - yv.exp() * total;
                    }
                }
                self.accumulate(grads, *x, gi);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let k = self.shape(*logits)[1];
                let scale = g[0] / labels.len() as f64;
                let mut gi: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (row, &l) in gi.chunks_mut(k).zip(labels) {
                    row[l] -= scale;
                }
                self.accumulate(grads, *logits, gi);
            }
            Op::Concat(xs) => {
                let s = node.value.shape();
                let (n, total) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let mut start = 0;
                for &x in xs {
                    let c = self.shape(x)[1];
                    if self.requires_grad(x) {
                        let mut gi = Vec::with_capacity(n * c * inner);
                        for ni in 0..n {
                            let base = (ni * total + start) * inner;
                            gi.extend_from_slice(&g[base..base + c * inner]);
                        }
                        self.accumulate(grads, x, gi);
                    }
                    start += c;
                }
            }
            Op::Sign(x) => self.accumulate(grads, *x, vec![0.0; g.len()]),
            Op::Clamp(x, lo, hi) => {
                let gi = g
                    .iter()
                    .zip(val(*x))
                    .map(|(gv, v)| if v >= lo && v <= hi { *gv } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gi);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g),
            Op::Sum(x) => self.accumulate(grads, *x, vec![g[0]; val(*x).len()]),
            Op::Mean(x) => {
                let n = val(*x).len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::WeightedSum {
                inputs,
                weights,
                offset,
            } => {
                let w = val(*weights);
                if self.requires_grad(*weights) {
                    let mut gw = vec![0.0; w.len()];
                    for (k, &x) in inputs.iter().enumerate() {
                        gw[offset + k] = g.iter().zip(val(x)).map(|(a, b)| a * b).sum();
                    }
                    self.accumulate(grads, *weights, gw);
                }
                for (k, &x) in inputs.iter().enumerate() {
                    if self.requires_grad(x) {
                        let wk = w[offset + k];
                        self.accumulate(grads, x, g.iter().map(|v| v * wk).collect());
                    }
                }
            }
            Op::Crop { input, top, left } => {
                let s = self.shape(*input);
                let (h, w) = (s[2], s[3]);
                let os = node.value.shape();
                let (oh, ow) = (os[2], os[3]);
                let mut gi = vec![0.0; val(*input).len()];
                for p in 0..s[0] * s[1] {
                    for r in 0..oh {
                        let dst = p * h * w + (top + r) * w + left;
                        gi[dst..dst + ow].copy_from_slice(&g[p * oh * ow + r * ow..][..ow]);
                    }
                }
                self.accumulate(grads, *input, gi);
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_batch_norm(
        &self,
        grads: &mut [Option<Vec<f64>>],
        g: &[f64],
        input: Var,
        affine: Option<(Var, Var)>,
        normalized: &[f64],
        inv_std: &[f64],
        batch_stats: bool,
    ) {
        let s = self.shape(input);
        let (n, c, hw) = (s[0], s[1], s[2] * s[3]);
        let m = (n * hw) as f64;
        let mut sum_dy = vec![0.0; c];
        let mut sum_dy_xhat = vec![0.0; c];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                for (dy, xh) in g[base..base + hw].iter().zip(&normalized[base..base + hw]) {
                    sum_dy[ci] += dy;
                    sum_dy_xhat[ci] += dy * xh;
                }
            }
        }
        let gamma: Vec<f64> = match affine {
            Some((gv, _)) => self.nodes[gv.0].value.data().to_vec(),
            None => vec![1.0; c],
        };
        if let Some((gv, bv)) = affine {
            self.accumulate(grads, gv, sum_dy_xhat.clone());
            self.accumulate(grads, bv, sum_dy.clone());
        }
        if !self.requires_grad(input) {
            return;
        }
        let mut gi = vec![0.0; g.len()];
        for ni in 0..n {
            for ci in 0..c {
                let base = (ni * c + ci) * hw;
                let k = gamma[ci] * inv_std[ci];
                let dst = &mut gi[base..base + hw];
                let dy = &g[base..base + hw];
                if batch_stats {
                    let xh = &normalized[base..base + hw];
                    let (sd, sdx) = (sum_dy[ci] / m, sum_dy_xhat[ci] / m);
                    for ((o, d), x) in dst.iter_mut().zip(dy).zip(xh) {
                        *o = k * (d - sd - x * sdx);
                    }
                } else {
                    for (o, d) in dst.iter_mut().zip(dy) {
                        *o = k * d;
                    }
                }
            }
        }
        self.accumulate(grads, input, gi);
    }
}

pub fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn last_extent(op: &'static str, shape: &[usize]) -> Result<usize> {
    match shape.last() {
        Some(&k) if k > 0 => Ok(k),
        _ => Err(shape_err(op, format!("need a non-empty last axis, got {shape:?}"))),
    }
}

fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; a.len()];
    for r in 0..rows {
        for c in 0..cols {
            t[c * rows + r] = a[r * cols + c];
        }
    }
    t
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}
