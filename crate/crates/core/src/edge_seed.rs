//! White-box seeding: Sobel edges intersected with the benign saliency map
//! gate a signed-gradient PGD on the source model. Each random start
//! yields one member of the initial population.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpreters::{interpret, interpretation_distance, normalize_map, Method, SaliencyMap};
use crate::model::{LossSpec, ModelHandle, SignConvention};
use crate::numerics;
use crate::tensor::Tensor;

pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

#[derive(Debug, Clone, PartialEq)]
pub struct EdgeMask {
    /// Edge magnitude `sqrt(d_h^2 + d_v^2)`, `[H, W]`.
    pub d: Tensor,
    /// Binary update gate, `[H, W]`.
    pub n_w: Tensor,
    /// Whether the intersection was empty and the gate fell back to all ones.
    pub fallback: bool,
}

/// `[H, W]` luminance of a `[C, H, W]` image; single-channel images pass
/// through and other channel counts are averaged.
pub fn luminance(x: &Tensor) -> Result<Tensor> {
    let (c, h, w) = x.chw()?;
    let plane = h * w;
    let d = x.data();
    let out = (0..plane)
        .map(|p| match c {
            3 => (0..3).map(|k| LUMA[k] * d[k * plane + p]).sum(),
            _ => (0..c).map(|k| d[k * plane + p]).sum::<f64>() / c as f64,
        })
        .collect();
    Tensor::new(vec![h, w], out)
}

fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= n as isize {
        j = period - j;
    }
    j as usize
}

/// Horizontal and vertical Sobel responses of the luminance, reflect padded.
pub fn sobel_components(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let lum = luminance(x)?;
    let (h, w) = (lum.shape()[0], lum.shape()[1]);
    let mut dh = vec![0.0; h * w];
    let mut dv = vec![0.0; h * w];
    for y in 0..h {
        for xx in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for (ky, (rx, ry)) in SOBEL_X.iter().zip(&SOBEL_Y).enumerate() {
                let sy = reflect(y as isize + ky as isize - 1, h);
                for kx in 0..3 {
                    let v = lum.data()[sy * w + reflect(xx as isize + kx as isize - 1, w)];
                    gx += rx[kx] * v;
                    gy += ry[kx] * v;
                }
            }
            dh[y * w + xx] = gx;
            dv[y * w + xx] = gy;
        }
    }
    Ok((Tensor::new(vec![h, w], dh)?, Tensor::new(vec![h, w], dv)?))
}

pub fn sobel_edges(x: &Tensor) -> Result<Tensor> {
    let (dh, dv) = sobel_components(x)?;
    dh.zip_map(&dv, |a, b| (a * a + b * b).sqrt())
}

/// `n_w = [normalize(d) >= tau_d] AND [m >= tau_m]`, or all ones when that
/// intersection is empty.
pub fn edge_operator(d: &Tensor, m: &SaliencyMap, tau_d: f64, tau_m: f64) -> Result<EdgeMask> {
    d.ensure_same_shape(&m.values)?;
    let nd = normalize_map(d);
    let gate = nd.zip_map(&m.values, |e, s| if e >= tau_d && s >= tau_m { 1.0 } else { 0.0 })?;
    let fallback = gate.data().iter().all(|&v| v == 0.0);
    let n_w = if fallback {
        Tensor::full(d.shape().to_vec(), 1.0)
    } else {
        gate
    };
    Ok(EdgeMask {
        d: d.clone(),
        n_w,
        fallback,
    })
}

/// `l_prd + lambda * l_int` with `l_prd = -log f'_y(x_hat)` and
/// `l_int = ||g(x_hat) - m||^2`, evaluated as written.
pub fn advedge_loss(
    model: &ModelHandle,
    method: Method,
    x_hat: &Tensor,
    y: usize,
    m_benign: &SaliencyMap,
    lambda: f64,
) -> Result<f64> {
    let out = model.forward(x_hat)?;
    let prd = numerics::cross_entropy(&out.probs, y)?;
    if lambda == 0.0 {
        return Ok(prd);
    }
    let m = interpret(model, method, x_hat, y)?;
    Ok(prd + lambda * interpretation_distance(&m, m_benign)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedConfig {
    pub epsilon: f64,
    pub alpha: f64,
    pub iterations: usize,
    pub lambda: f64,
    pub population: usize,
    #[serde(default = "default_tau")]
    pub tau_d: f64,
    #[serde(default = "default_tau")]
    pub tau_m: f64,
    #[serde(default)]
    pub convention: SignConvention,
}

/// Default cut for both the normalized edge map and the benign saliency map.
pub const DEFAULT_TAU: f64 = 0.25;

fn default_tau() -> f64 {
    DEFAULT_TAU
}

impl SeedConfig {
    /// Defaults with the interpretation weight of `method`.
    pub fn for_method(method: Method) -> Self {
        Self {
            epsilon: 8.0 / 255.0,
            alpha: 1.0 / 255.0,
            iterations: 300,
            lambda: method.default_lambda(),
            population: 5,
            tau_d: DEFAULT_TAU,
            tau_m: DEFAULT_TAU,
            convention: SignConvention::Intent,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!("epsilon {} must be finite and >= 0", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("PGD needs at least one iteration".into()));
        }
        if self.population < 2 {
            return Err(Error::Config(format!("population {} must be >= 2", self.population)));
        }
        if !(self.alpha > 0.0 && self.lambda >= 0.0) {
            return Err(Error::Config("alpha must be > 0 and lambda >= 0".into()));
        }
        Ok(())
    }
}

/// The seed population for one sample.
#[derive(Debug, Clone)]
pub struct SeedSet {
    pub deltas: Vec<Tensor>,
    pub mask: EdgeMask,
    pub benign_map: SaliencyMap,
    /// Descended objective at the first and last iterate of each start.
    pub objective: Vec<(f64, f64)>,
}

fn project(x: &[f64], x_hat: &mut [f64], eps: f64) {
    for (v, &o) in x_hat.iter_mut().zip(x) {
        *v = v.clamp(o - eps, o + eps).clamp(0.0, 1.0);
    }
}

/// Edge-gated PGD from `cfg.population` independent random starts. The
/// random start and every step are zero outside the gate.
pub fn advedge_attack(
    source: &ModelHandle,
    method: Method,
    x: &Tensor,
    y: usize,
    cfg: &SeedConfig,
    rng: &mut impl Rng,
) -> Result<SeedSet> {
    cfg.validate()?;
    let (c, h, w) = x.chw()?;
    let benign_map = interpret(source, method, x, y)?;
    let mask = edge_operator(&sobel_edges(x)?, &benign_map, cfg.tau_d, cfg.tau_m)?;
    let gate = mask.n_w.data();
    let plane = h * w;
    let eps = cfg.epsilon;
    let loss = LossSpec::Adversarial {
        label: y,
        method,
        reference: &benign_map,
        lambda: cfg.lambda,
        convention: cfg.convention,
    };

    let mut deltas = Vec::with_capacity(cfg.population);
    let mut objective = Vec::with_capacity(cfg.population);
    for _ in 0..cfg.population {
        let mut x_hat: Vec<f64> = (0..c * plane)
            .map(|i| {
                let g = gate[i % plane];
                let start = if eps > 0.0 && g > 0.0 { rng.gen_range(-eps..=eps) } else { 0.0 };
                x.data()[i] + g * start
            })
            .collect();
        project(x.data(), &mut x_hat, eps);
        let mut first = None;
        for _ in 0..cfg.iterations {
            let xt = Tensor::new(x.shape().to_vec(), x_hat.clone())?;
            let (value, grad) = source.loss_and_gradient(&xt, &loss)?;
            first.get_or_insert(value);
            for (i, (v, g)) in x_hat.iter_mut().zip(grad.wrt_input.data()).enumerate() {
                let step = gate[i % plane] * cfg.alpha * sign(*g);
                *v -= step;
            }
            project(x.data(), &mut x_hat, eps);
        }
        let xt = Tensor::new(x.shape().to_vec(), x_hat)?;
        let last = source.loss(&xt, &loss)?;
        objective.push((first.unwrap_or(last), last));
        deltas.push(xt.zip_map(x, |a, b| a - b)?);
    }
    Ok(SeedSet {
        deltas,
        mask,
        benign_map,
        objective,
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
