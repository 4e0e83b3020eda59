//! Saliency maps: class activation mapping (CAM) and vanilla input
//! gradients (Grad), both min-max normalized to `[0, 1]` at input
//! resolution.
//!
//! Grad reduces the per-channel absolute gradient with a maximum over
//! channels; a channel mean is the common alternative and would change map
//! contrast but not the normalization contract. CAM maps are bilinearly
//! upsampled first and normalized second.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Model, ModelHandle};
use crate::numerics::{self, Bilinear};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Cam,
    Grad,
}

impl Method {
    /// Interpretation-loss weight used for this interpreter by default.
    pub fn default_lambda(self) -> f64 {
        match self {
            Method::Grad => 0.007,
            Method::Cam => 0.204,
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cam" => Ok(Method::Cam),
            "grad" => Ok(Method::Grad),
            other => Err(Error::Config(format!("unknown interpreter {other:?}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Method::Cam => "cam",
            Method::Grad => "grad",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaliencyMap {
    /// `[H, W]`, values in `[0, 1]`.
    pub values: Tensor,
    pub method: Method,
    pub class_index: usize,
}

impl SaliencyMap {
    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    /// Writes the map as an 8-bit binary PGM.
    pub fn write_pgm(&self, path: &Path) -> Result<()> {
        write_pgm(path, &[self])
    }
}

/// Writes maps side by side (left to right) as one binary PGM image.
pub fn write_pgm(path: &Path, maps: &[&SaliencyMap]) -> Result<()> {
    let h = maps.iter().map(|m| m.height()).max().unwrap_or(0);
    let gap = 1;
    let w: usize = maps.iter().map(|m| m.width()).sum::<usize>() + gap * maps.len().saturating_sub(1);
    let mut pixels = vec![0u8; h * w];
    let mut x0 = 0;
    for m in maps {
        for y in 0..m.height() {
            for x in 0..m.width() {
                let v = m.values.data()[y * m.width() + x];
                pixels[y * w + x0 + x] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
        x0 += m.width() + gap;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write!(f, "P5\n{w} {h}\n255\n").map_err(|e| Error::io(path, e))?;
    f.write_all(&pixels).map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// `(v - min) / (max - min)`; a constant input maps to all zeros.
pub fn normalize_map(raw: &Tensor) -> Tensor {
    let (lo, hi) = min_max(raw.data());
    let range = hi - lo;
    if range <= 0.0 {
        return Tensor::zeros(raw.shape().to_vec());
    }
    raw.map(|v| (v - lo) / range)
}

fn min_max(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Index of the first minimum and first maximum.
fn arg_min_max(v: &[f64]) -> (usize, usize) {
    let mut lo = 0;
    let mut hi = 0;
    for (i, &x) in v.iter().enumerate() {
        if x < v[lo] {
            lo = i;
        }
        if x > v[hi] {
            hi = i;
        }
    }
    (lo, hi)
}

/// Pulls `d loss / d normalized` back to `d loss / d raw`.
fn normalize_backward(raw: &[f64], grad_out: &[f64]) -> Vec<f64> {
    let (imin, imax) = arg_min_max(raw);
    let (lo, hi) = (raw[imin], raw[imax]);
    let range = hi - lo;
    if range <= 0.0 {
        return vec![0.0; raw.len()];
    }
    let mut g: Vec<f64> = grad_out.iter().map(|&u| u / range).collect();
    // Every output depends on min and max through (v - lo) / (hi - lo).
    let mut to_hi = 0.0;
    let mut to_lo = 0.0;
    for (&u, &v) in grad_out.iter().zip(raw) {
        let t = (v - lo) / range;
        to_hi -= u * t / range;
        to_lo += u * (t - 1.0) / range;
    }
    g[imax] += to_hi;
    g[imin] += to_lo;
    g
}

/// Unnormalized CAM at input resolution plus the feature-resolution map.
fn cam_raw(model: &Model, features: &[f64], class: usize) -> Result<(Vec<f64>, Bilinear)> {
    let weights = model.cam_weights(class)?;
    let fs = model.feature_shape();
    let plane = fs.h * fs.w;
    let mut low = vec![0.0; plane];
    for (i, &w) in weights.iter().enumerate() {
        for (acc, &a) in low.iter_mut().zip(&features[i * plane..(i + 1) * plane]) {
            *acc += w * a;
        }
    }
    let [_, h, w] = model.input_shape();
    let up = Bilinear::new((fs.h, fs.w), (h, w));
    Ok((up.apply(&low), up))
}

/// Channel-max of `|grad|`, with the winning channel per pixel.
fn grad_reduce(grad: &[f64], c: usize, plane: usize) -> (Vec<f64>, Vec<usize>) {
    let mut raw = vec![0.0; plane];
    let mut arg = vec![0; plane];
    for p in 0..plane {
        for ch in 0..c {
            let v = grad[ch * plane + p].abs();
            if v > raw[p] {
                raw[p] = v;
                arg[p] = ch;
            }
        }
    }
    (raw, arg)
}

fn check_class(model: &Model, class: usize) -> Result<()> {
    if class >= model.num_classes() {
        return Err(Error::Index {
            index: class,
            len: model.num_classes(),
        });
    }
    Ok(())
}

/// Unnormalized CAM `sum_i w_{i,c} a_i` at input resolution.
pub fn cam_unnormalized(model: &ModelHandle, x: &Tensor, class_index: usize) -> Result<Tensor> {
    let m = model.white()?;
    m.check_input(x)?;
    check_class(m, class_index)?;
    let tr = m.trace(x.data().to_vec());
    let (raw, _) = cam_raw(m, &tr.features, class_index)?;
    let [_, h, w] = m.input_shape();
    Tensor::new(vec![h, w], raw)
}

pub fn cam(model: &ModelHandle, x: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    let raw = cam_unnormalized(model, x, class_index)?;
    Ok(SaliencyMap {
        values: normalize_map(&raw),
        method: Method::Cam,
        class_index,
    })
}

/// Unnormalized Grad map `max_c |d logit_y / d x|`.
pub fn grad_unnormalized(model: &ModelHandle, x: &Tensor, class_index: usize) -> Result<Tensor> {
    let m = model.white()?;
    m.check_input(x)?;
    check_class(m, class_index)?;
    let [c, h, w] = m.input_shape();
    let g = m.logit_gradient(x.data(), class_index);
    Tensor::new(vec![h, w], grad_reduce(&g, c, h * w).0)
}

pub fn grad(model: &ModelHandle, x: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    let raw = grad_unnormalized(model, x, class_index)?;
    Ok(SaliencyMap {
        values: normalize_map(&raw),
        method: Method::Grad,
        class_index,
    })
}

pub fn interpret(model: &ModelHandle, method: Method, x: &Tensor, class_index: usize) -> Result<SaliencyMap> {
    match method {
        Method::Cam => cam(model, x, class_index),
        Method::Grad => grad(model, x, class_index),
    }
}

/// `sum (a - b)^2` over two maps of equal shape.
pub fn interpretation_distance(a: &SaliencyMap, b: &SaliencyMap) -> Result<f64> {
    a.values.ensure_same_shape(&b.values)?;
    Ok(a.values
        .data()
        .iter()
        .zip(b.values.data())
        .map(|(p, q)| (p - q) * (p - q))
        .sum())
}

/// Value and input gradient of
/// `prd_coef * CE(softmax(f(x)), class) + int_coef * ||g(x) - reference||^2`.
pub(crate) fn interpretation_loss_grad(
    m: &Model,
    x: &Tensor,
    method: Method,
    class: usize,
    reference: &SaliencyMap,
    prd_coef: f64,
    int_coef: f64,
) -> Result<(f64, Vec<f64>)> {
    let [c, h, w] = m.input_shape();
    if reference.values.shape() != [h, w] {
        return Err(Error::Dimension(format!(
            "reference map {:?} vs input {h}x{w}",
            reference.values.shape()
        )));
    }
    let tr = m.trace(x.data().to_vec());
    let mut value = 0.0;
    let mut logit_seed = None;
    if prd_coef != 0.0 {
        let probs = numerics::softmax(&tr.logits);
        value += prd_coef * numerics::cross_entropy(&probs, class)?;
        logit_seed = Some(
            numerics::cross_entropy_logit_grad(&probs, class)
                .into_iter()
                .map(|g| prd_coef * g)
                .collect::<Vec<_>>(),
        );
    }

    let int_term = |raw: &[f64]| -> (f64, Vec<f64>) {
        let map = normalize_map(&Tensor::new(vec![h, w], raw.to_vec()).expect("finite map"));
        let diff: Vec<f64> = map
            .data()
            .iter()
            .zip(reference.values.data())
            .map(|(a, b)| a - b)
            .collect();
        let l: f64 = diff.iter().map(|d| d * d).sum();
        let d_map: Vec<f64> = diff.iter().map(|d| 2.0 * int_coef * d).collect();
        (l, normalize_backward(raw, &d_map))
    };

    match method {
        Method::Cam => {
            let (raw, up) = cam_raw(m, &tr.features, class)?;
            let (l, d_raw) = int_term(&raw);
            value += int_coef * l;
            let d_low = up.transpose(&d_raw);
            let weights = m.cam_weights(class)?;
            let plane = d_low.len();
            let mut feature_seed = vec![0.0; weights.len() * plane];
            for (i, &wi) in weights.iter().enumerate() {
                for (s, &d) in feature_seed[i * plane..(i + 1) * plane].iter_mut().zip(&d_low) {
                    *s = wi * d;
                }
            }
            let grad = m.backward(&tr, logit_seed, Some(feature_seed), None);
            Ok((value, grad))
        }
        Method::Grad => {
            let plane = h * w;
            let lg = m.logit_gradient(x.data(), class);
            let (raw, arg) = grad_reduce(&lg, c, plane);
            let (l, d_raw) = int_term(&raw);
            value += int_coef * l;
            let mut grad = match logit_seed {
                Some(seed) => m.backward(&tr, Some(seed), None, None),
                None => vec![0.0; x.len()],
            };
            // The map depends on x only through the logit gradient, whose
            // Jacobian is the (symmetric) logit Hessian. It vanishes almost
            // everywhere for piecewise-linear networks.
            if !m.is_piecewise_linear() && int_coef != 0.0 {
                let mut u = vec![0.0; x.len()];
                for p in 0..plane {
                    let i = arg[p] * plane + p;
                    if raw[p] > 0.0 {
                        u[i] = lg[i].signum() * d_raw[p];
                    }
                }
                let hv = m.logit_hessian_vector(x.data(), class, &u);
                for (g, v) in grad.iter_mut().zip(hv) {
                    *g += v;
                }
            }
            Ok((value, grad))
        }
    }
}
