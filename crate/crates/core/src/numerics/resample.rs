//! Bilinear resampling with half-pixel centers and edge clamping.

use crate::error::Result;
use crate::tensor::Tensor;

/// Separable bilinear resampler between two fixed plane sizes.
#[derive(Debug, Clone)]
pub struct Bilinear {
    src: (usize, usize),
    dst: (usize, usize),
    rows: Vec<(usize, usize, f64)>,
    cols: Vec<(usize, usize, f64)>,
}

fn axis_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Bilinear {
    pub fn new(src: (usize, usize), dst: (usize, usize)) -> Self {
        Self {
            src,
            dst,
            rows: axis_taps(src.0, dst.0),
            cols: axis_taps(src.1, dst.1),
        }
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        let sw = self.src.1;
        let mut out = Vec::with_capacity(self.dst.0 * self.dst.1);
        for &(y0, y1, fy) in &self.rows {
            for &(x0, x1, fx) in &self.cols {
                let top = input[y0 * sw + x0] * (1.0 - fx) + input[y0 * sw + x1] * fx;
                let bot = input[y1 * sw + x0] * (1.0 - fx) + input[y1 * sw + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
        out
    }

    pub fn transpose(&self, grad_out: &[f64]) -> Vec<f64> {
        let sw = self.src.1;
        let mut g = vec![0.0; self.src.0 * sw];
        let mut k = 0;
        for &(y0, y1, fy) in &self.rows {
            for &(x0, x1, fx) in &self.cols {
                let u = grad_out[k];
                k += 1;
                g[y0 * sw + x0] += u * (1.0 - fy) * (1.0 - fx);
                g[y0 * sw + x1] += u * (1.0 - fy) * fx;
                g[y1 * sw + x0] += u * fy * (1.0 - fx);
                g[y1 * sw + x1] += u * fy * fx;
            }
        }
        g
    }
}

/// Resizes every channel of a `[C, H, W]` tensor to `[C, h, w]`.
pub fn resize_bilinear(x: &Tensor, h: usize, w: usize) -> Result<Tensor> {
    let (c, sh, sw) = x.chw()?;
    let b = Bilinear::new((sh, sw), (h, w));
    let mut out = Vec::with_capacity(c * h * w);
    for ch in 0..c {
        out.extend(b.apply(&x.data()[ch * sh * sw..(ch + 1) * sh * sw]));
    }
    Tensor::new(vec![c, h, w], out)
}
