//! Dense numeric kernel: convolution, pooling, activations, softmax and the
//! cross-entropy used both for PGD and for black-box fitness.

pub mod kernels;
pub mod resample;
pub mod scalar;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub use kernels::ConvGeom;
pub use resample::{resize_bilinear, Bilinear};
pub use scalar::{Dual, Scalar};

/// Floor added inside the logarithm of [`cross_entropy`].
pub const LOG_FLOOR: f64 = 1e-12;

/// Gradient of a scalar with respect to a model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradient {
    pub wrt_input: Tensor,
}

/// Cross-correlation of a `[C, H, W]` input with a `[F, C, kh, kw]` kernel.
pub fn conv2d(input: &Tensor, kernel: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (c, h, w) = input.chw()?;
    let &[f, kc, kh, kw] = kernel.shape() else {
        return Err(Error::Dimension(format!(
            "kernel must be 4-D, got {:?}",
            kernel.shape()
        )));
    };
    if kc != c {
        return Err(Error::Dimension(format!(
            "input has {c} channels, kernel expects {kc}"
        )));
    }
    if stride == 0 {
        return Err(Error::Config("stride must be >= 1".into()));
    }
    if kh > h + 2 * padding || kw > w + 2 * padding {
        return Err(Error::Dimension(format!(
            "kernel {kh}x{kw} larger than padded input {}x{}",
            h + 2 * padding,
            w + 2 * padding
        )));
    }
    let geom = ConvGeom {
        in_c: c,
        in_h: h,
        in_w: w,
        out_c: f,
        kh,
        kw,
        stride,
        pad: padding,
    };
    let out = kernels::conv_forward(input.data(), &geom, kernel.data(), None);
    Tensor::new(vec![f, geom.out_h(), geom.out_w()], out)
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-ln(probs[label] + LOG_FLOOR)`.
pub fn cross_entropy(probs: &[f64], label: usize) -> Result<f64> {
    let p = probs.get(label).ok_or(Error::Index {
        index: label,
        len: probs.len(),
    })?;
    Ok(-(p + LOG_FLOOR).ln())
}

/// Gradient of [`cross_entropy`] composed with [`softmax`] with respect to
/// the logits, including the floor term.
pub fn cross_entropy_logit_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let py = probs[label];
    let k = py / (py + LOG_FLOOR);
    probs
        .iter()
        .enumerate()
        .map(|(i, &p)| k * (p - if i == label { 1.0 } else { 0.0 }))
        .collect()
}
