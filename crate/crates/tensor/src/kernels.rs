//! Direct-loop NCHW kernels for convolution and pooling.
//!
//! Every kernel walks the same (output row, valid column span) decomposition so
//! the inner loops are contiguous slice operations when the stride is 1.

use crate::error::{shape_err, Result, TensorError};

/// Static attributes of a 2-D convolution with square kernels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dAttrs {
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
    pub groups: usize,
}

impl Default for Conv2dAttrs {
    fn default() -> Self {
        Self {
            stride: 1,
            padding: 0,
            dilation: 1,
            groups: 1,
        }
    }
}

impl Conv2dAttrs {
    pub fn new(stride: usize, padding: usize, dilation: usize, groups: usize) -> Self {
        Self {
            stride,
            padding,
            dilation,
            groups,
        }
    }
}

/// Static attributes of a square-window pooling.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Pool2dAttrs {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub oh: usize,
    pub ow: usize,
    pub cin_g: usize,
    pub cout_g: usize,
    pub stride: usize,
    pub pad: usize,
    pub dil: usize,
}

fn out_extent(len: usize, k_span: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = len + 2 * pad;
    if padded < k_span {
        return None;
    }
    Some((padded - k_span) / stride + 1)
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], attrs: Conv2dAttrs) -> Result<Self> {
        const OP: &str = "conv2d";
        if input.len() != 4 || weight.len() != 4 {
            return Err(shape_err(
                OP,
                format!("expected 4-d input and weight, got {input:?} and {weight:?}"),
            ));
        }
        if attrs.stride == 0 || attrs.dilation == 0 || attrs.groups == 0 {
            return Err(TensorError::Attr {
                op: OP,
                detail: format!("stride, dilation and groups must be positive: {attrs:?}"),
            });
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, cin_g, kh, kw) = (weight[0], weight[1], weight[2], weight[3]);
        if kh != kw {
            return Err(shape_err(OP, format!("non-square kernel {weight:?}")));
        }
        let groups = attrs.groups;
        if cin % groups != 0 || cout % groups != 0 || cin / groups != cin_g {
            return Err(shape_err(
                OP,
                format!("input {input:?} and weight {weight:?} incompatible with groups={groups}"),
            ));
        }
        let span = attrs.dilation * (kh - 1) + 1;
        let (oh, ow) = match (
            out_extent(h, span, attrs.stride, attrs.padding),
            out_extent(w, span, attrs.stride, attrs.padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(shape_err(
                    OP,
                    format!("kernel span {span} larger than padded input {input:?}"),
                ))
            }
        };
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k: kh,
            oh,
            ow,
            cin_g,
            cout_g: cout / groups,
            stride: attrs.stride,
            pad: attrs.padding,
            dil: attrs.dilation,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// 1×1, stride 1, no padding: every output plane is a linear
    /// combination of whole input planes.
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }
}

/// Output index range `[lo, hi)` along one axis for which
/// `o * stride + offset - pad` lands inside `[0, in_len)`.
fn valid_span(out_len: usize, in_len: usize, offset: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > offset {
        (pad - offset).div_ceil(stride)
    } else {
        0
    };
    if in_len + pad <= offset {
        return (0, 0);
    }
    let hi = ((in_len - 1 + pad - offset) / stride + 1).min(out_len);
    (lo.min(hi), hi)
}

struct Spans {
    rows: Vec<(usize, usize)>,
    cols: Vec<(usize, usize)>,
}

impl Spans {
    fn new(oh: usize, ow: usize, h: usize, w: usize, k: usize, dil: usize, stride: usize, pad: usize) -> Self {
        Self {
            rows: (0..k).map(|i| valid_span(oh, h, i * dil, stride, pad)).collect(),
            cols: (0..k).map(|i| valid_span(ow, w, i * dil, stride, pad)).collect(),
        }
    }
}

/// Calls `f(out_offset, in_offset, len)` for every contiguous run of output
/// columns that reads a valid input row segment, for one kernel tap.
#[inline(always)]
fn for_each_run(
    g: &ConvGeom,
    spans: &Spans,
    kh: usize,
    kw: usize,
    mut f: impl FnMut(usize, usize, usize),
) {
    let (r0, r1) = spans.rows[kh];
    let (c0, c1) = spans.cols[kw];
    if c1 <= c0 {
        return;
    }
    let len = c1 - c0;
    for o_r in r0..r1 {
        let i_r = o_r * g.stride + kh * g.dil - g.pad;
        let i_c = c0 * g.stride + kw * g.dil - g.pad;
        f(o_r * g.ow + c0, i_r * g.w + i_c, len);
    }
}

/// Stride-1 convolutions computed on the padded grid: output row `r` is
/// laid out with the padded row pitch, so every kernel tap becomes one long
/// contiguous multiply-add instead of a run per output row.
struct PaddedGrid {
    hp: usize,
    wp: usize,
    /// Length of the strided output run on the padded grid.
    run: usize,
}

impl PaddedGrid {
    fn new(g: &ConvGeom) -> Self {
        let (hp, wp) = (g.h + 2 * g.pad, g.w + 2 * g.pad);
        Self {
            hp,
            wp,
            run: (g.oh - 1) * wp + g.ow,
        }
    }

    fn tap_offset(&self, g: &ConvGeom, kh: usize, kw: usize) -> usize {
        kh * g.dil * self.wp + kw * g.dil
    }

    fn pad(&self, g: &ConvGeom, src: &[f64], planes: usize) -> Vec<f64> {
        let plane = self.hp * self.wp;
        let mut out = vec![0.0; planes * plane];
        for p in 0..planes {
            for r in 0..g.h {
                let s = &src[(p * g.h + r) * g.w..][..g.w];
                out[p * plane + (r + g.pad) * self.wp + g.pad..][..g.w].copy_from_slice(s);
            }
        }
        out
    }

    /// Output planes spread onto runs of the padded pitch, zeros in the gaps.
    fn spread(&self, g: &ConvGeom, src: &[f64], planes: usize) -> Vec<f64> {
        let mut out = vec![0.0; planes * self.run];
        for p in 0..planes {
            for r in 0..g.oh {
                let s = &src[(p * g.oh + r) * g.ow..][..g.ow];
                out[p * self.run + r * self.wp..][..g.ow].copy_from_slice(s);
            }
        }
        out
    }
}

fn conv2d_forward_s1(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    let grid = PaddedGrid::new(g);
    let padded = grid.pad(g, input, g.n * g.cin);
    let plane = grid.hp * grid.wp;
    let out_plane = g.oh * g.ow;
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    let mut acc = vec![0.0; grid.run];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            acc.fill(0.0);
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let in_p = &padded[(n * g.cin + ic) * plane..][..plane];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = weight[w_base + kh * g.k + kw];
                        let src = &in_p[grid.tap_offset(g, kh, kw)..][..grid.run];
                        for (d, x) in acc.iter_mut().zip(src) {
                            *d += wv * x;
                        }
                    }
                }
            }
            let out_p = &mut out[(n * g.cout + oc) * out_plane..][..out_plane];
            for r in 0..g.oh {
                out_p[r * g.ow..][..g.ow].copy_from_slice(&acc[r * grid.wp..][..g.ow]);
            }
        }
    }
    out
}

fn conv2d_backward_input_s1(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    let grid = PaddedGrid::new(g);
    let spread = grid.spread(g, grad_out, g.n * g.cout);
    let plane = grid.hp * grid.wp;
    let mut gpad = vec![0.0; plane];
    let mut gin = vec![0.0; g.n * g.cin * g.h * g.w];
    for n in 0..g.n {
        for ic in 0..g.cin {
            let grp = ic / g.cin_g;
            let icg = ic % g.cin_g;
            gpad.fill(0.0);
            for ocg in 0..g.cout_g {
                let oc = grp * g.cout_g + ocg;
                let go = &spread[(n * g.cout + oc) * grid.run..][..grid.run];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = weight[w_base + kh * g.k + kw];
                        let dst = &mut gpad[grid.tap_offset(g, kh, kw)..][..grid.run];
                        for (d, x) in dst.iter_mut().zip(go) {
                            *d += wv * x;
                        }
                    }
                }
            }
            let gi_p = &mut gin[(n * g.cin + ic) * g.h * g.w..][..g.h * g.w];
            for r in 0..g.h {
                gi_p[r * g.w..][..g.w].copy_from_slice(&gpad[(r + g.pad) * grid.wp + g.pad..][..g.w]);
            }
        }
    }
    gin
}

fn conv2d_backward_weight_s1(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    let grid = PaddedGrid::new(g);
    let padded = grid.pad(g, input, g.n * g.cin);
    let spread = grid.spread(g, grad_out, g.n * g.cout);
    let plane = grid.hp * grid.wp;
    let mut gw = vec![0.0; g.cout * g.cin_g * g.k * g.k];
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let go = &spread[(n * g.cout + oc) * grid.run..][..grid.run];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let in_p = &padded[(n * g.cin + ic) * plane..][..plane];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let src = &in_p[grid.tap_offset(g, kh, kw)..][..grid.run];
                        gw[w_base + kh * g.k + kw] += dot(go, src);
                    }
                }
            }
        }
    }
    gw
}

/// Four-lane dot product so the compiler can vectorise the reduction.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut lanes = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..4 {
            lanes[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    lanes[0] + lanes[1] + lanes[2] + lanes[3] + tail
}

pub(crate) fn conv2d_forward(g: &ConvGeom, input: &[f64], weight: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        let plane = g.h * g.w;
        let mut out = vec![0.0; g.n * g.cout * plane];
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let out_p = &mut out[(n * g.cout + oc) * plane..][..plane];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let wv = weight[oc * g.cin_g + icg];
                    let in_p = &input[(n * g.cin + ic) * plane..][..plane];
                    for (d, x) in out_p.iter_mut().zip(in_p) {
                        *d += wv * x;
                    }
                }
            }
        }
        return out;
    }
    if g.stride == 1 {
        return conv2d_forward_s1(g, input, weight);
    }
    let spans = Spans::new(g.oh, g.ow, g.h, g.w, g.k, g.dil, g.stride, g.pad);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0; g.n * g.cout * out_plane];
    let s = g.stride;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let out_p = &mut out[(n * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let in_p = &input[(n * g.cin + ic) * in_plane..][..in_plane];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = weight[w_base + kh * g.k + kw];
                        for_each_run(g, &spans, kh, kw, |oo, io, len| {
                            let dst = &mut out_p[oo..oo + len];
                            if s == 1 {
                                for (d, x) in dst.iter_mut().zip(&in_p[io..io + len]) {
                                    *d += wv * x;
                                }
                            } else {
                                for (j, d) in dst.iter_mut().enumerate() {
                                    *d += wv * in_p[io + j * s];
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    out
}

pub(crate) fn conv2d_backward_input(g: &ConvGeom, grad_out: &[f64], weight: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        let plane = g.h * g.w;
        let mut gin = vec![0.0; g.n * g.cin * plane];
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let go_p = &grad_out[(n * g.cout + oc) * plane..][..plane];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let wv = weight[oc * g.cin_g + icg];
                    let gi_p = &mut gin[(n * g.cin + ic) * plane..][..plane];
                    for (d, x) in gi_p.iter_mut().zip(go_p) {
                        *d += wv * x;
                    }
                }
            }
        }
        return gin;
    }
    if g.stride == 1 {
        return conv2d_backward_input_s1(g, grad_out, weight);
    }
    let spans = Spans::new(g.oh, g.ow, g.h, g.w, g.k, g.dil, g.stride, g.pad);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut gin = vec![0.0; g.n * g.cin * in_plane];
    let s = g.stride;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let go_p = &grad_out[(n * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let gi_p = &mut gin[(n * g.cin + ic) * in_plane..][..in_plane];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let wv = weight[w_base + kh * g.k + kw];
                        for_each_run(g, &spans, kh, kw, |oo, io, len| {
                            let src = &go_p[oo..oo + len];
                            if s == 1 {
                                for (d, x) in gi_p[io..io + len].iter_mut().zip(src) {
                                    *d += wv * x;
                                }
                            } else {
                                for (j, x) in src.iter().enumerate() {
                                    gi_p[io + j * s] += wv * x;
                                }
                            }
                        });
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn conv2d_backward_weight(g: &ConvGeom, grad_out: &[f64], input: &[f64]) -> Vec<f64> {
    if g.is_pointwise() {
        let plane = g.h * g.w;
        let mut gw = vec![0.0; g.cout * g.cin_g];
        for n in 0..g.n {
            for oc in 0..g.cout {
                let grp = oc / g.cout_g;
                let go_p = &grad_out[(n * g.cout + oc) * plane..][..plane];
                for icg in 0..g.cin_g {
                    let ic = grp * g.cin_g + icg;
                    let in_p = &input[(n * g.cin + ic) * plane..][..plane];
                    gw[oc * g.cin_g + icg] += dot(go_p, in_p);
                }
            }
        }
        return gw;
    }
    if g.stride == 1 {
        return conv2d_backward_weight_s1(g, grad_out, input);
    }
    let spans = Spans::new(g.oh, g.ow, g.h, g.w, g.k, g.dil, g.stride, g.pad);
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut gw = vec![0.0; g.cout * g.cin_g * g.k * g.k];
    let s = g.stride;
    for n in 0..g.n {
        for oc in 0..g.cout {
            let grp = oc / g.cout_g;
            let go_p = &grad_out[(n * g.cout + oc) * out_plane..][..out_plane];
            for icg in 0..g.cin_g {
                let ic = grp * g.cin_g + icg;
                let in_p = &input[(n * g.cin + ic) * in_plane..][..in_plane];
                let w_base = (oc * g.cin_g + icg) * g.k * g.k;
                for kh in 0..g.k {
                    for kw in 0..g.k {
                        let mut acc = 0.0;
                        for_each_run(g, &spans, kh, kw, |oo, io, len| {
                            let src = &go_p[oo..oo + len];
                            if s == 1 {
                                acc += src
                                    .iter()
                                    .zip(&in_p[io..io + len])
                                    .map(|(a, b)| a * b)
                                    .sum::<f64>();
                            } else {
                                for (j, x) in src.iter().enumerate() {
                                    acc += x * in_p[io + j * s];
                                }
                            }
                        });
                        gw[w_base + kh * g.k + kw] += acc;
                    }
                }
            }
        }
    }
    gw
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct PoolGeom {
    pub planes: usize,
    pub h: usize,
    pub w: usize,
    pub oh: usize,
    pub ow: usize,
    pub attrs: Pool2dAttrs,
}

impl PoolGeom {
    pub fn new(op: &'static str, input: &[usize], attrs: Pool2dAttrs) -> Result<Self> {
        if input.len() != 4 {
            return Err(shape_err(op, format!("expected 4-d input, got {input:?}")));
        }
        if attrs.kernel == 0 || attrs.stride == 0 || attrs.padding * 2 > attrs.kernel {
            return Err(TensorError::Attr {
                op,
                detail: format!("{attrs:?}"),
            });
        }
        let (h, w) = (input[2], input[3]);
        match (
            out_extent(h, attrs.kernel, attrs.stride, attrs.padding),
            out_extent(w, attrs.kernel, attrs.stride, attrs.padding),
        ) {
            (Some(oh), Some(ow)) => Ok(Self {
                planes: input[0] * input[1],
                h,
                w,
                oh,
                ow,
                attrs,
            }),
            _ => Err(shape_err(op, format!("window larger than padded input {input:?}"))),
        }
    }

    fn window(&self, o: usize, len: usize) -> std::ops::Range<usize> {
        let start = (o * self.attrs.stride) as isize - self.attrs.padding as isize;
        let end = start + self.attrs.kernel as isize;
        (start.max(0) as usize)..(end.min(len as isize) as usize)
    }
}

/// Max pooling; padded positions never win. Returns values and argmax input offsets.
pub(crate) fn max_pool_forward(g: &PoolGeom, input: &[f64]) -> (Vec<f64>, Vec<usize>) {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    let mut out = vec![0.0; g.planes * op];
    let mut arg = vec![0usize; g.planes * op];
    for p in 0..g.planes {
        let inp = &input[p * ip..][..ip];
        for oy in 0..g.oh {
            let rows = g.window(oy, g.h);
            for ox in 0..g.ow {
                let cols = g.window(ox, g.w);
                let mut best = f64::NEG_INFINITY;
                let mut best_i = rows.start * g.w + cols.start;
                for y in rows.clone() {
                    for x in cols.clone() {
                        let v = inp[y * g.w + x];
                        if v > best {
                            best = v;
                            best_i = y * g.w + x;
                        }
                    }
                }
                out[p * op + oy * g.ow + ox] = best;
                arg[p * op + oy * g.ow + ox] = p * ip + best_i;
            }
        }
    }
    (out, arg)
}

/// Average pooling whose divisor always counts the padded zeros (kernel²).
pub(crate) fn avg_pool_forward(g: &PoolGeom, input: &[f64]) -> Vec<f64> {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    let norm = 1.0 / (g.attrs.kernel * g.attrs.kernel) as f64;
    let mut out = vec![0.0; g.planes * op];
    for p in 0..g.planes {
        let inp = &input[p * ip..][..ip];
        for oy in 0..g.oh {
            let rows = g.window(oy, g.h);
            for ox in 0..g.ow {
                let cols = g.window(ox, g.w);
                let mut acc = 0.0;
                for y in rows.clone() {
                    acc += inp[y * g.w + cols.start..y * g.w + cols.end].iter().sum::<f64>();
                }
                out[p * op + oy * g.ow + ox] = acc * norm;
            }
        }
    }
    out
}

pub(crate) fn avg_pool_backward(g: &PoolGeom, grad_out: &[f64]) -> Vec<f64> {
    let (ip, op) = (g.h * g.w, g.oh * g.ow);
    let norm = 1.0 / (g.attrs.kernel * g.attrs.kernel) as f64;
    let mut gin = vec![0.0; g.planes * ip];
    for p in 0..g.planes {
        let gi = &mut gin[p * ip..][..ip];
        for oy in 0..g.oh {
            let rows = g.window(oy, g.h);
            for ox in 0..g.ow {
                let cols = g.window(ox, g.w);
                let v = grad_out[p * op + oy * g.ow + ox] * norm;
                for y in rows.clone() {
                    for d in &mut gi[y * g.w + cols.start..y * g.w + cols.end] {
                        *d += v;
                    }
                }
            }
        }
    }
    gin
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_span_matches_bruteforce() {
        for in_len in 1..9 {
            for k in 0..5 {
                for stride in 1..3 {
                    for pad in 0..4 {
                        let out_len = 7;
                        let (lo, hi) = valid_span(out_len, in_len, k, stride, pad);
                        for o in 0..out_len {
                            let i = (o * stride + k) as isize - pad as isize;
                            let ok = i >= 0 && (i as usize) < in_len;
                            assert_eq!(ok, o >= lo && o < hi, "{in_len} {k} {stride} {pad} {o}");
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn output_extent_follows_standard_formula() {
        let g = ConvGeom::new(&[1, 4, 8, 8], &[4, 1, 5, 5], Conv2dAttrs::new(2, 4, 2, 4)).unwrap();
        assert_eq!(g.out_shape(), [1, 4, 4, 4]);
        assert!(ConvGeom::new(&[1, 3, 2, 2], &[1, 3, 5, 5], Conv2dAttrs::default()).is_err());
        assert!(ConvGeom::new(&[1, 3, 4, 4], &[2, 2, 1, 1], Conv2dAttrs::new(1, 0, 1, 2)).is_err());
    }
}
