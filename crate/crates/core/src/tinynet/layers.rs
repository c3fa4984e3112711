//! Convolution, dilated convolution, transposed convolution, max pooling and
//! ReLU on `[channels, height, width]` feature maps, with their adjoints.
//!
//! Convolution weights are stored `[c_out, c_in, k, k]`; transposed
//! convolution weights are stored `[c_in, c_out, k, k]`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A square convolution kernel with a dilation rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Kernel {
    /// `[c_out, c_in, k, k]`.
    pub values: Tensor,
    pub dilation: usize,
}

impl Kernel {
    pub fn new(values: Tensor, dilation: usize) -> Result<Self> {
        let s = values.shape();
        if s.len() != 4 || s[2] != s[3] || s[2].is_multiple_of(2) {
            return Err(Error::Shape(format!(
                "kernel must be [c_out, c_in, k, k] with odd k, got {s:?}"
            )));
        }
        if dilation == 0 {
            return Err(Error::config("dilation must be >= 1"));
        }
        Ok(Kernel { values, dilation })
    }

    pub fn size(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn c_out(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.values.shape()[1]
    }

    /// Spatial extent once dilated: `k + (k - 1)(d - 1)`.
    pub fn effective_size(&self) -> usize {
        dilated_size(self.size(), self.dilation)
    }
}

pub fn dilated_size(k: usize, d: usize) -> usize {
    k + (k - 1) * (d - 1)
}

/// Inserts `d - 1` zeros between neighbouring taps of every channel,
/// returning an equivalent kernel with dilation 1.
pub fn dilate_kernel(k: &Kernel) -> Kernel {
    let (co, ci, ks, d) = (k.c_out(), k.c_in(), k.size(), k.dilation);
    let ke = k.effective_size();
    let mut out = Tensor::zeros(&[co, ci, ke, ke]);
    let src = k.values.data();
    let dst = out.data_mut();
    for oc in 0..co {
        for ic in 0..ci {
            for y in 0..ks {
                for x in 0..ks {
                    dst[((oc * ci + ic) * ke + y * d) * ke + x * d] =
                        src[((oc * ci + ic) * ks + y) * ks + x];
                }
            }
        }
    }
    Kernel {
        values: out,
        dilation: 1,
    }
}

/// Output extent of a convolution along one axis, or `None` when the window
/// does not fit.
pub fn conv_out_size(n: usize, k_eff: usize, stride: usize, pad: usize) -> Option<usize> {
    (n + 2 * pad).checked_sub(k_eff).map(|r| r / stride + 1)
}

/// Range of output positions whose tap at `offset` lands inside `[0, n)`.
fn valid_range(offset: usize, pad: usize, stride: usize, n: usize, out: usize) -> (usize, usize) {
    let off = offset as isize - pad as isize;
    let s = stride as isize;
    // smallest o with o*s + off >= 0
    let lo = if off >= 0 { 0 } else { (-off + s - 1) / s };
    // largest o with o*s + off <= n - 1
    let top = n as isize - 1 - off;
    if top < 0 {
        return (0, 0);
    }
    let hi = (top / s + 1).min(out as isize);
    if lo >= hi {
        (0, 0)
    } else {
        (lo as usize, hi as usize)
    }
}

fn dims3(t: &Tensor, what: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("{what} must be [c, h, w], got {s:?}"))),
    }
}

/// Geometry of one stride/pad/dilation convolution.
#[derive(Debug, Clone, Copy)]
struct Geom {
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    oh: usize,
    ow: usize,
}

impl Geom {
    fn conv(input: &Tensor, weight: &Tensor, stride: usize, pad: usize, dil: usize) -> Result<Self> {
        let (ci, h, w) = dims3(input, "conv input")?;
        let (co, wci, k) = match *weight.shape() {
            [co, wci, k, k2] if k == k2 => (co, wci, k),
            ref s => return Err(Error::Shape(format!("bad conv weight shape {s:?}"))),
        };
        if wci != ci {
            return Err(Error::Shape(format!(
                "conv expects {wci} input channels, got {ci}"
            )));
        }
        if stride == 0 || dil == 0 {
            return Err(Error::config("stride and dilation must be >= 1"));
        }
        let ke = dilated_size(k, dil);
        let (oh, ow) = match (conv_out_size(h, ke, stride, pad), conv_out_size(w, ke, stride, pad)) {
            (Some(oh), Some(ow)) => (oh, ow),
            _ => {
                return Err(Error::Shape(format!(
                    "kernel extent {ke} does not fit a {h}x{w} input with padding {pad}"
                )))
            }
        };
        Ok(Geom {
            ci,
            h,
            w,
            co,
            k,
            stride,
            pad,
            dil,
            oh,
            ow,
        })
    }

    /// Calls `f(o, c, wi, oy, ox0, ox1, iy, ix0)` for every weight tap and
    /// every output row where the tap is in bounds. Columns `ox0..ox1` map to
    /// inputs `ix0, ix0 + stride, ...`. Iteration order: o, c, ky, kx, oy.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize, usize, usize, usize, usize, usize)) {
        let g = *self;
        for o in 0..g.co {
            for c in 0..g.ci {
                for ky in 0..g.k {
                    let (oy0, oy1) = valid_range(ky * g.dil, g.pad, g.stride, g.h, g.oh);
                    for kx in 0..g.k {
                        let (ox0, ox1) = valid_range(kx * g.dil, g.pad, g.stride, g.w, g.ow);
                        if ox0 >= ox1 {
                            continue;
                        }
                        let wi = ((o * g.ci + c) * g.k + ky) * g.k + kx;
                        let ix0 = ox0 * g.stride + kx * g.dil - g.pad;
                        for oy in oy0..oy1 {
                            let iy = oy * g.stride + ky * g.dil - g.pad;
                            f(o, c, wi, oy, ox0, ox1, iy, ix0);
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation with zero padding. Each output accumulates its taps in
/// `(c_in, ky, kx)` order starting from zero, then adds the bias.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
    dilation: usize,
) -> Result<Tensor> {
    let g = Geom::conv(input, weight, stride, pad, dilation)?;
    let mut out = Tensor::zeros(&[g.co, g.oh, g.ow]);
    let (inp, wt) = (input.data(), weight.data());
    let od = out.data_mut();
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    g.for_each_tap(|o, c, wi, oy, ox0, ox1, iy, ix0| {
        let wv = wt[wi];
        let orow = &mut od[o * ohw + oy * g.ow + ox0..o * ohw + oy * g.ow + ox1];
        let ibase = c * hw + iy * g.w + ix0;
        if g.stride == 1 {
            let irow = &inp[ibase..ibase + orow.len()];
            for (a, b) in orow.iter_mut().zip(irow) {
                *a += wv * b;
            }
        } else {
            for (t, a) in orow.iter_mut().enumerate() {
                *a += wv * inp[ibase + t * g.stride];
            }
        }
    });
    if let Some(b) = bias {
        for (o, plane) in od.chunks_mut(ohw).enumerate() {
            plane.iter_mut().for_each(|v| *v += b[o]);
        }
    }
    Ok(out)
}

/// Gradients of [`conv2d`].
pub struct ConvGrads {
    pub input: Option<Tensor>,
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

pub fn conv2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
    dilation: usize,
    need_input: bool,
) -> Result<ConvGrads> {
    let g = Geom::conv(input, weight, stride, pad, dilation)?;
    if grad_out.shape() != [g.co, g.oh, g.ow] {
        return Err(Error::Shape(format!(
            "conv output gradient shape {:?}, expected {:?}",
            grad_out.shape(),
            [g.co, g.oh, g.ow]
        )));
    }
    let (inp, wt, go) = (input.data(), weight.data(), grad_out.data());
    let (hw, ohw) = (g.h * g.w, g.oh * g.ow);
    let mut gw = Tensor::zeros(weight.shape());
    let mut gi = need_input.then(|| Tensor::zeros(input.shape()));
    {
        let gwd = gw.data_mut();
        let mut gid = gi.as_mut().map(|t| t.data_mut());
        g.for_each_tap(|o, c, wi, oy, ox0, ox1, iy, ix0| {
            let grow = &go[o * ohw + oy * g.ow + ox0..o * ohw + oy * g.ow + ox1];
            let ibase = c * hw + iy * g.w + ix0;
            let mut acc = 0.0;
            if g.stride == 1 {
                let irow = &inp[ibase..ibase + grow.len()];
                for (a, b) in grow.iter().zip(irow) {
                    acc += a * b;
                }
                if let Some(gid) = gid.as_deref_mut() {
                    let wv = wt[wi];
                    let girow = &mut gid[ibase..ibase + grow.len()];
                    for (a, b) in girow.iter_mut().zip(grow) {
                        *a += wv * b;
                    }
                }
            } else {
                for (t, a) in grow.iter().enumerate() {
                    acc += a * inp[ibase + t * g.stride];
                }
                if let Some(gid) = gid.as_deref_mut() {
                    let wv = wt[wi];
                    for (t, a) in grow.iter().enumerate() {
                        gid[ibase + t * g.stride] += wv * a;
                    }
                }
            }
            gwd[wi] += acc;
        });
    }
    let bias = go.chunks(ohw).map(|p| p.iter().sum()).collect();
    Ok(ConvGrads {
        input: gi,
        weight: gw,
        bias,
    })
}

/// Output extent of a transposed convolution along one axis.
pub fn deconv_out_size(n: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    ((n - 1) * stride + k).checked_sub(2 * pad)
}

fn deconv_dims(input: &Tensor, weight: &Tensor, stride: usize, pad: usize) -> Result<(usize, usize, usize, usize, usize, usize, usize)> {
    let (ci, h, w) = dims3(input, "deconv input")?;
    let (wci, co, k) = match *weight.shape() {
        [a, b, k, k2] if k == k2 => (a, b, k),
        ref s => return Err(Error::Shape(format!("bad deconv weight shape {s:?}"))),
    };
    if wci != ci {
        return Err(Error::Shape(format!(
            "deconv expects {wci} input channels, got {ci}"
        )));
    }
    if stride == 0 || h == 0 || w == 0 {
        return Err(Error::config("deconv needs stride >= 1 and a non-empty input"));
    }
    match (deconv_out_size(h, k, stride, pad), deconv_out_size(w, k, stride, pad)) {
        (Some(oh), Some(ow)) if oh > 0 && ow > 0 => Ok((ci, h, w, co, k, oh, ow)),
        _ => Err(Error::Shape("deconv padding exceeds output".into())),
    }
}

/// Transposed convolution: every input pixel scatters `value * weight` into
/// the output window at `(iy * stride + ky - pad, ix * stride + kx - pad)`.
pub fn conv_transpose2d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&[f64]>,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (ci, h, w, co, k, oh, ow) = deconv_dims(input, weight, stride, pad)?;
    let mut out = Tensor::zeros(&[co, oh, ow]);
    let (inp, wt) = (input.data(), weight.data());
    let od = out.data_mut();
    for c in 0..ci {
        for iy in 0..h {
            for ix in 0..w {
                let v = inp[(c * h + iy) * w + ix];
                if v == 0.0 {
                    continue;
                }
                for o in 0..co {
                    for ky in 0..k {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            od[(o * oh + oy as usize) * ow + ox as usize] +=
                                v * wt[((c * co + o) * k + ky) * k + kx];
                        }
                    }
                }
            }
        }
    }
    if let Some(b) = bias {
        for (o, plane) in od.chunks_mut(oh * ow).enumerate() {
            plane.iter_mut().for_each(|x| *x += b[o]);
        }
    }
    Ok(out)
}

pub fn conv_transpose2d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<ConvGrads> {
    let (ci, h, w, co, k, oh, ow) = deconv_dims(input, weight, stride, pad)?;
    if grad_out.shape() != [co, oh, ow] {
        return Err(Error::Shape("deconv output gradient shape mismatch".into()));
    }
    // the input gradient is a plain strided convolution of grad_out
    let gi = conv2d(grad_out, weight, None, stride, pad, 1)?;
    debug_assert_eq!(gi.shape(), [ci, h, w]);
    let (inp, go) = (input.data(), grad_out.data());
    let mut gw = Tensor::zeros(weight.shape());
    let gwd = gw.data_mut();
    for c in 0..ci {
        for o in 0..co {
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for iy in 0..h {
                        let oy = (iy * stride + ky) as isize - pad as isize;
                        if oy < 0 || oy >= oh as isize {
                            continue;
                        }
                        for ix in 0..w {
                            let ox = (ix * stride + kx) as isize - pad as isize;
                            if ox < 0 || ox >= ow as isize {
                                continue;
                            }
                            acc += inp[(c * h + iy) * w + ix]
                                * go[(o * oh + oy as usize) * ow + ox as usize];
                        }
                    }
                    gwd[((c * co + o) * k + ky) * k + kx] = acc;
                }
            }
        }
    }
    let bias = go.chunks(oh * ow).map(|p| p.iter().sum()).collect();
    Ok(ConvGrads {
        input: Some(gi),
        weight: gw,
        bias,
    })
}

/// 2x2 max pooling with stride 2. Returns the pooled map and, per output
/// element, the flat input index that won (first maximum in scan order).
pub fn maxpool2(input: &Tensor) -> Result<(Tensor, Vec<u32>)> {
    let (c, h, w) = dims3(input, "pool input")?;
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Tensor::zeros(&[c, oh, ow]);
    let mut arg = vec![0u32; c * oh * ow];
    let inp = input.data();
    let od = out.data_mut();
    for ch in 0..c {
        for y in 0..oh {
            for x in 0..ow {
                let mut best = (ch * h + 2 * y) * w + 2 * x;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = (ch * h + 2 * y + dy) * w + 2 * x + dx;
                    if inp[i] > inp[best] {
                        best = i;
                    }
                }
                let o = (ch * oh + y) * ow + x;
                od[o] = inp[best];
                arg[o] = best as u32;
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool2_backward(grad_out: &Tensor, argmax: &[u32], input_shape: &[usize]) -> Tensor {
    let mut gi = Tensor::zeros(input_shape);
    let gid = gi.data_mut();
    for (g, &i) in grad_out.data().iter().zip(argmax) {
        gid[i as usize] += g;
    }
    gi
}

pub fn relu_inplace(t: &mut Tensor) {
    t.data_mut().iter_mut().for_each(|v| {
        if *v < 0.0 {
            *v = 0.0
        }
    });
}

/// Zeroes `grad` wherever the ReLU output was not positive.
pub fn relu_backward_inplace(grad: &mut Tensor, output: &Tensor) {
    for (g, &y) in grad.data_mut().iter_mut().zip(output.data()) {
        if y <= 0.0 {
            *g = 0.0;
        }
    }
}

/// Plain convolution with a [`Kernel`] (its dilation honoured).
pub fn conv2d_forward(input: &Tensor, k: &Kernel, stride: usize, padding: usize) -> Result<Tensor> {
    conv2d(input, &k.values, None, stride, padding, k.dilation)
}

/// Same-size dilated convolution followed by ReLU.
pub fn dilated_conv_forward(input: &Tensor, k: &Kernel) -> Result<Tensor> {
    let pad = (k.effective_size() - 1) / 2;
    let mut out = conv2d(input, &k.values, None, 1, pad, k.dilation)?;
    relu_inplace(&mut out);
    Ok(out)
}

/// A chain of same-size dilated 3x3 convolutions, each followed by ReLU; the
/// first consumes the block input and each later layer the previous output.
#[derive(Debug, Clone, PartialEq)]
pub struct DilatedBlock {
    pub channels: usize,
    pub rates: [usize; 4],
    pub kernel_size: usize,
}

impl DilatedBlock {
    /// Effective kernel extent of each layer.
    pub fn effective_sizes(&self) -> [usize; 4] {
        self.rates.map(|d| dilated_size(self.kernel_size, d))
    }

    pub fn padding(&self, layer: usize) -> usize {
        (self.effective_sizes()[layer] - 1) / 2
    }

    /// Runs the chain with the given per-layer weights and biases.
    pub fn forward(&self, input: &Tensor, weights: &[&Tensor], biases: &[&[f64]]) -> Result<Vec<Tensor>> {
        let mut outs: Vec<Tensor> = Vec::with_capacity(4);
        for l in 0..4 {
            let x = if l == 0 { input } else { &outs[l - 1] };
            let mut y = conv2d(x, weights[l], Some(biases[l]), 1, self.padding(l), self.rates[l])?;
            relu_inplace(&mut y);
            outs.push(y);
        }
        Ok(outs)
    }
}

pub fn build_dilated_block(channels: usize, rates: [usize; 4]) -> Result<DilatedBlock> {
    if rates.contains(&0) {
        return Err(Error::config("dilation rates must be positive"));
    }
    if channels == 0 {
        return Err(Error::config("dilated block needs at least one channel"));
    }
    Ok(DilatedBlock {
        channels,
        rates,
        kernel_size: 3,
    })
}

/// `ReLU(deconv(deep) + skip)` with a stride-2 transposed convolution.
pub fn deconv_skip_forward(
    deep: &Tensor,
    skip: &Tensor,
    weight: &Tensor,
    bias: &[f64],
) -> Result<Tensor> {
    let mut up = conv_transpose2d(deep, weight, Some(bias), 2, 0)?;
    if up.shape() != skip.shape() {
        return Err(Error::Shape(format!(
            "upsampled map {:?} does not match skip connection {:?}",
            up.shape(),
            skip.shape()
        )));
    }
    up.add_assign(skip);
    relu_inplace(&mut up);
    Ok(up)
}
