//! Slice-level forward and backward kernels. Layouts are channel-major
//! `[C, H, W]`; convolution weights are `[F, C, kh, kw]`.

use super::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn weight_len(&self) -> usize {
        self.out_c * self.in_c * self.kh * self.kw
    }
}

/// Output positions `o` along one axis whose input index
/// `o * stride + k - pad` falls inside `0..n`.
fn valid_range(n: usize, out: usize, stride: usize, k: usize, pad: usize) -> std::ops::Range<usize> {
    // smallest o with o*stride + k >= pad
    let lo = if k >= pad { 0 } else { (pad - k).div_ceil(stride) };
    // largest o with o*stride + k - pad <= n - 1
    let hi = if n + pad > k { ((n + pad - 1 - k) / stride + 1).min(out) } else { 0 };
    lo.min(hi)..hi
}

/// Cross-correlation with zero padding. Accumulation order per output is
/// bias, then channel, kernel row, kernel column.
pub fn conv_forward<T: Scalar>(x: &[T], g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut out = vec![T::default(); g.out_c * oh * ow];
    let plane = g.in_h * g.in_w;
    let ksz = g.kh * g.kw;
    for f in 0..g.out_c {
        let of = &mut out[f * oh * ow..(f + 1) * oh * ow];
        let b = bias.map_or(0.0, |b| b[f]);
        of.iter_mut().for_each(|v| *v = T::cst(b));
        for c in 0..g.in_c {
            let xc = &x[c * plane..(c + 1) * plane];
            let wc = &weight[(f * g.in_c + c) * ksz..(f * g.in_c + c + 1) * ksz];
            for ky in 0..g.kh {
                let ys = valid_range(g.in_h, oh, g.stride, ky, g.pad);
                for kx in 0..g.kw {
                    let w = wc[ky * g.kw + kx];
                    let xs = valid_range(g.in_w, ow, g.stride, kx, g.pad);
                    if xs.is_empty() {
                        continue;
                    }
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let orow = &mut of[oy * ow..(oy + 1) * ow];
                        let xrow = &xc[iy * g.in_w..(iy + 1) * g.in_w];
                        if g.stride == 1 {
                            let ix0 = xs.start + kx - g.pad;
                            let n = xs.len();
                            for (o, &xi) in orow[xs.clone()].iter_mut().zip(&xrow[ix0..ix0 + n]) {
                                *o += xi.scale(w);
                            }
                        } else {
                            for ox in xs.clone() {
                                orow[ox] += xrow[ox * g.stride + kx - g.pad].scale(w);
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Backward pass of [`conv_forward`]: returns the input gradient and, when
/// `param_grad` is given, accumulates `(dW, db)` into it.
pub fn conv_backward<T: Scalar>(
    x: &[T],
    g: &ConvGeom,
    weight: &[f64],
    grad_out: &[T],
    mut param_grad: Option<(&mut [f64], &mut [f64])>,
) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let plane = g.in_h * g.in_w;
    let ksz = g.kh * g.kw;
    let mut gx = vec![T::default(); x.len()];
    for f in 0..g.out_c {
        let gf = &grad_out[f * oh * ow..(f + 1) * oh * ow];
        if let Some((_, gb)) = param_grad.as_mut() {
            gb[f] += gf.iter().map(|v| v.val()).sum::<f64>();
        }
        for c in 0..g.in_c {
            let wi0 = (f * g.in_c + c) * ksz;
            for ky in 0..g.kh {
                let ys = valid_range(g.in_h, oh, g.stride, ky, g.pad);
                for kx in 0..g.kw {
                    let wi = wi0 + ky * g.kw + kx;
                    let w = weight[wi];
                    let xs = valid_range(g.in_w, ow, g.stride, kx, g.pad);
                    if xs.is_empty() {
                        continue;
                    }
                    let mut dw = 0.0;
                    for oy in ys.clone() {
                        let iy = oy * g.stride + ky - g.pad;
                        let base = c * plane + iy * g.in_w;
                        let grow = &gf[oy * ow..(oy + 1) * ow];
                        for ox in xs.clone() {
                            let xi = base + ox * g.stride + kx - g.pad;
                            let go = grow[ox];
                            gx[xi] += go.scale(w);
                            dw += go.val() * x[xi].val();
                        }
                    }
                    if let Some((gw, _)) = param_grad.as_mut() {
                        gw[wi] += dw;
                    }
                }
            }
        }
    }
    gx
}

/// Dense layer `y = W x + b` with `W` stored `[out, in]`.
pub fn linear_forward<T: Scalar>(x: &[T], weight: &[f64], bias: &[f64]) -> Vec<T> {
    let n_in = x.len();
    bias.iter()
        .enumerate()
        .map(|(o, &b)| {
            let row = &weight[o * n_in..(o + 1) * n_in];
            let mut acc = T::cst(b);
            for (xi, &w) in x.iter().zip(row) {
                acc += xi.scale(w);
            }
            acc
        })
        .collect()
}

pub fn linear_backward<T: Scalar>(
    x: &[T],
    weight: &[f64],
    grad_out: &[T],
    mut param_grad: Option<(&mut [f64], &mut [f64])>,
) -> Vec<T> {
    let n_in = x.len();
    let mut gx = vec![T::default(); n_in];
    for (o, &go) in grad_out.iter().enumerate() {
        let row = &weight[o * n_in..(o + 1) * n_in];
        for (gxi, &w) in gx.iter_mut().zip(row) {
            *gxi += go.scale(w);
        }
        if let Some((gw, gb)) = param_grad.as_mut() {
            gb[o] += go.val();
            for (i, xi) in x.iter().enumerate() {
                gw[o * n_in + i] += go.val() * xi.val();
            }
        }
    }
    gx
}

/// 2x2 max pooling with stride 2; returns the output and the flat input
/// index chosen for every output cell (first maximum wins).
pub fn maxpool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> (Vec<T>, Vec<usize>) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut arg = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = ch * h * w + (2 * oy) * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let i = ch * h * w + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[i].val() > x[best].val() {
                        best = i;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn maxpool2_backward<T: Scalar>(input_len: usize, arg: &[usize], grad_out: &[T]) -> Vec<T> {
    let mut gx = vec![T::default(); input_len];
    for (&i, &g) in arg.iter().zip(grad_out) {
        gx[i] += g;
    }
    gx
}

pub fn avgpool2_forward<T: Scalar>(x: &[T], c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let i = ch * h * w + (2 * oy) * w + 2 * ox;
                out.push((x[i] + x[i + 1] + x[i + w] + x[i + w + 1]).scale(0.25));
            }
        }
    }
    out
}

pub fn avgpool2_backward<T: Scalar>(c: usize, h: usize, w: usize, grad_out: &[T]) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let mut gx = vec![T::default(); c * h * w];
    for ch in 0..c {
        for oy in 0..oh {
            for ox in 0..ow {
                let g = grad_out[(ch * oh + oy) * ow + ox].scale(0.25);
                let i = ch * h * w + (2 * oy) * w + 2 * ox;
                gx[i] += g;
                gx[i + 1] += g;
                gx[i + w] += g;
                gx[i + w + 1] += g;
            }
        }
    }
    gx
}

/// Mean over each channel's spatial plane.
pub fn global_avg_forward<T: Scalar>(x: &[T], c: usize, plane: usize) -> Vec<T> {
    let k = 1.0 / plane as f64;
    (0..c)
        .map(|ch| {
            let mut acc = T::default();
            for &v in &x[ch * plane..(ch + 1) * plane] {
                acc += v;
            }
            acc.scale(k)
        })
        .collect()
}

pub fn global_avg_backward<T: Scalar>(c: usize, plane: usize, grad_out: &[T]) -> Vec<T> {
    let k = 1.0 / plane as f64;
    let mut gx = Vec::with_capacity(c * plane);
    for g in grad_out.iter().take(c) {
        let v = g.scale(k);
        gx.extend(std::iter::repeat(v).take(plane));
    }
    gx
}

pub fn relu_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter()
        .map(|&v| if v.val() > 0.0 { v } else { T::default() })
        .collect()
}

pub fn relu_backward<T: Scalar>(x: &[T], grad_out: &[T]) -> Vec<T> {
    x.iter()
        .zip(grad_out)
        .map(|(&v, &g)| if v.val() > 0.0 { g } else { T::default() })
        .collect()
}

pub fn tanh_forward<T: Scalar>(x: &[T]) -> Vec<T> {
    x.iter().map(|&v| v.tanh()).collect()
}

/// `y` is the forward output `tanh(x)`.
pub fn tanh_backward<T: Scalar>(y: &[T], grad_out: &[T]) -> Vec<T> {
    y.iter()
        .zip(grad_out)
        .map(|(&t, &g)| g * (T::cst(1.0) - t * t))
        .collect()
}
