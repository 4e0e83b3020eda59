//! Noise rate (1 - SSIM), thresholded saliency IoU and run aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::interpreters::SaliencyMap;
use crate::tensor::Tensor;

pub const SSIM_WINDOW: usize = 8;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// The nine IoU binarization thresholds 0.1, 0.2, ..., 0.9.
pub fn iou_thresholds() -> [f64; 9] {
    std::array::from_fn(|i| (i + 1) as f64 / 10.0)
}

fn as_planes(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w] => Ok((1, h, w)),
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Dimension(format!(
            "expected [H, W] or [C, H, W], got {:?}",
            t.shape()
        ))),
    }
}

/// Mean local SSIM over every valid `8x8` window (clamped to the image
/// size), uniform weights, population statistics, averaged over channels.
pub fn ssim(a: &Tensor, b: &Tensor) -> Result<f64> {
    a.ensure_same_shape(b)?;
    let (c, h, w) = as_planes(a)?;
    if h == 0 || w == 0 {
        return Err(Error::Dimension("SSIM of an empty image".into()));
    }
    let wh = SSIM_WINDOW.min(h);
    let ww = SSIM_WINDOW.min(w);
    let n = (wh * ww) as f64;
    let mut total = 0.0;
    for ch in 0..c {
        let pa = &a.data()[ch * h * w..(ch + 1) * h * w];
        let pb = &b.data()[ch * h * w..(ch + 1) * h * w];
        let mut plane = 0.0;
        let mut windows = 0usize;
        for y0 in 0..=h - wh {
            for x0 in 0..=w - ww {
                let (mut sa, mut sb) = (0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        sa += pa[y * w + x];
                        sb += pb[y * w + x];
                    }
                }
                let (ma, mb) = (sa / n, sb / n);
                let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
                for y in y0..y0 + wh {
                    for x in x0..x0 + ww {
                        let da = pa[y * w + x] - ma;
                        let db = pb[y * w + x] - mb;
                        va += da * da;
                        vb += db * db;
                        cov += da * db;
                    }
                }
                let (va, vb, cov) = (va / n, vb / n, cov / n);
                plane += ((2.0 * ma * mb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((ma * ma + mb * mb + SSIM_C1) * (va + vb + SSIM_C2));
                windows += 1;
            }
        }
        total += plane / windows as f64;
    }
    Ok(total / c as f64)
}

/// `1 - SSIM`, clamped to `[0, 1]`.
pub fn noise_rate(x: &Tensor, x_hat: &Tensor) -> Result<f64> {
    Ok((1.0 - ssim(x, x_hat)?).clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IouReport {
    pub per_threshold: [f64; 9],
    pub mean: f64,
}

/// IoU of the two maps binarized at `>= t` for each threshold; two empty
/// sets count as full agreement.
pub fn iou(m1: &SaliencyMap, m2: &SaliencyMap) -> Result<IouReport> {
    iou_values(&m1.values, &m2.values)
}

pub fn iou_values(a: &Tensor, b: &Tensor) -> Result<IouReport> {
    a.ensure_same_shape(b)?;
    let per_threshold = iou_thresholds().map(|t| {
        let (mut inter, mut union) = (0usize, 0usize);
        for (&p, &q) in a.data().iter().zip(b.data()) {
            let (bp, bq) = (p >= t, q >= t);
            inter += (bp && bq) as usize;
            union += (bp || bq) as usize;
        }
        if union == 0 {
            1.0
        } else {
            inter as f64 / union as f64
        }
    });
    let mean = per_threshold.iter().sum::<f64>() / 9.0;
    Ok(IouReport { per_threshold, mean })
}

/// Per-sample figures that feed [`summarize`]. Noise, IoU and confidence
/// are only meaningful for successful attacks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleStats {
    pub success: bool,
    pub queries: u64,
    pub noise_rate: Option<f64>,
    pub iou_mean: Option<f64>,
    pub adv_confidence: Option<f64>,
}

/// Mean, spread and order statistics of one quantity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    pub count: usize,
    pub mean: f64,
    pub std: f64,
    pub median: f64,
    pub min: f64,
    pub max: f64,
}

impl Distribution {
    /// `None` for an empty sample. Population standard deviation; the
    /// median of an even count is the mean of the middle pair.
    pub fn of(values: &[f64]) -> Option<Self> {
        if values.is_empty() {
            return None;
        }
        let mut v = values.to_vec();
        v.sort_by(f64::total_cmp);
        let n = v.len();
        let mean = v.iter().sum::<f64>() / n as f64;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let median = if n % 2 == 1 {
            v[n / 2]
        } else {
            (v[n / 2 - 1] + v[n / 2]) / 2.0
        };
        Some(Self {
            count: n,
            mean,
            std: var.sqrt(),
            median,
            min: v[0],
            max: v[n - 1],
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub total: usize,
    pub successes: usize,
    pub success_rate: f64,
    pub avg_queries: Option<f64>,
    pub median_queries: Option<f64>,
    pub queries: Option<Distribution>,
    pub noise: Option<Distribution>,
    pub confidence: Option<Distribution>,
    pub iou: Option<Distribution>,
}

/// Aggregates outcomes. Everything except the success rate is computed
/// over successful attacks only.
pub fn summarize(samples: &[SampleStats]) -> Result<RunSummary> {
    if samples.is_empty() {
        return Err(Error::Usage("cannot summarize zero outcomes".into()));
    }
    let wins: Vec<&SampleStats> = samples.iter().filter(|s| s.success).collect();
    let collect = |f: &dyn Fn(&SampleStats) -> Option<f64>| -> Option<Distribution> {
        Distribution::of(&wins.iter().filter_map(|s| f(s)).collect::<Vec<_>>())
    };
    let queries = collect(&|s| Some(s.queries as f64));
    Ok(RunSummary {
        total: samples.len(),
        successes: wins.len(),
        success_rate: wins.len() as f64 / samples.len() as f64,
        avg_queries: queries.as_ref().map(|d| d.mean),
        median_queries: queries.as_ref().map(|d| d.median),
        queries,
        noise: collect(&|s| s.noise_rate),
        confidence: collect(&|s| s.adv_confidence),
        iou: collect(&|s| s.iou_mean),
    })
}
