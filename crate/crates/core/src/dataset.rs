//! Labelled image collections: the CIFAR-10 binary layout and a
//! deterministic synthetic pattern set.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CIFAR10_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetSource {
    Cifar10Binary,
    Synthetic,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub source: DatasetSource,
    pub num_classes: usize,
    pub images: Vec<Tensor>,
    pub labels: Vec<usize>,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        source: DatasetSource,
        num_classes: usize,
        images: Vec<Tensor>,
        labels: Vec<usize>,
    ) -> Result<Self> {
        if images.len() != labels.len() {
            return Err(Error::Dimension(format!(
                "{} images but {} labels",
                images.len(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Index {
                index: bad,
                len: num_classes,
            });
        }
        Ok(Self {
            name: name.into(),
            source,
            num_classes,
            images,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    /// Deterministic split: every `k`-th sample (offset `k - 1`) goes to the
    /// second set.
    pub fn split_every(&self, k: usize) -> (Dataset, Dataset) {
        let mut a = self.subset_with(|_| false);
        let mut b = a.clone();
        for (i, (x, &y)) in self.images.iter().zip(&self.labels).enumerate() {
            let dst = if k > 0 && i % k == k - 1 { &mut b } else { &mut a };
            dst.images.push(x.clone());
            dst.labels.push(y);
        }
        (a, b)
    }

    fn subset_with(&self, keep: impl Fn(usize) -> bool) -> Dataset {
        let idx: Vec<usize> = (0..self.len()).filter(|&i| keep(i)).collect();
        Dataset {
            name: self.name.clone(),
            source: self.source,
            num_classes: self.num_classes,
            images: idx.iter().map(|&i| self.images[i].clone()).collect(),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

/// Parses CIFAR-10 binary records: one label byte then 1024 R, 1024 G and
/// 1024 B bytes of a 32x32 image.
pub fn parse_cifar10(bytes: &[u8]) -> Result<Dataset> {
    if bytes.len() % CIFAR10_RECORD != 0 {
        return Err(Error::Format(format!(
            "CIFAR-10 file size {} is not a multiple of {CIFAR10_RECORD}",
            bytes.len()
        )));
    }
    let mut images = Vec::with_capacity(bytes.len() / CIFAR10_RECORD);
    let mut labels = Vec::with_capacity(images.capacity());
    for rec in bytes.chunks_exact(CIFAR10_RECORD) {
        let label = rec[0] as usize;
        if label >= 10 {
            return Err(Error::Format(format!("CIFAR-10 label byte {label} out of range")));
        }
        labels.push(label);
        images.push(Tensor::new(
            vec![3, 32, 32],
            rec[1..].iter().map(|&b| b as f64 / 255.0).collect(),
        )?);
    }
    Dataset::new("cifar10", DatasetSource::Cifar10Binary, 10, images, labels)
}

pub fn load_cifar10(path: &Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10(&bytes)
}

/// Parameters of the synthetic pattern set.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub classes: usize,
    pub per_class: usize,
    /// Square side length in pixels.
    pub size: usize,
    pub channels: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(classes: usize, per_class: usize, size: usize, seed: u64) -> Self {
        Self {
            classes,
            per_class,
            size,
            channels: 3,
            seed,
        }
    }
}

/// Contrast range of the class pattern. Kept near the usual 8/255 attack
/// radius so that the class evidence itself is within reach of a bounded
/// perturbation.
pub const PATTERN_CONTRAST: (f64, f64) = (0.02, 0.04);
pub const PIXEL_NOISE: f64 = 0.01;

/// Stripe phase of class `label` at pixel (y, x): horizontal, vertical and
/// the two diagonals, with wider stripes for every further group of four.
fn stripe_on(label: usize, n: usize, y: usize, x: usize) -> bool {
    let phase = match label % 4 {
        0 => y,
        1 => x,
        2 => x + y,
        _ => x + n - y,
    };
    let width = 2 + label / 4;
    (phase / width) % 2 == 0
}

/// Deterministic low-contrast striped patches on smooth, noisy backgrounds.
/// Class `k` sets the stripe orientation (`k % 4`) and width (`k / 4`); the
/// patch position, size, polarity and colour vary per image.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.classes < 2 {
        return Err(Error::Config("synthetic data needs at least 2 classes".into()));
    }
    if spec.size < 8 || spec.channels == 0 {
        return Err(Error::Config("synthetic images must be at least 8x8".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.size;
    let c = spec.channels;
    let (lo, hi) = PATTERN_CONTRAST;
    let mut images = Vec::with_capacity(spec.classes * spec.per_class);
    let mut labels = Vec::with_capacity(images.capacity());
    for i in 0..spec.classes * spec.per_class {
        let label = i % spec.classes;
        let base: Vec<f64> = (0..c).map(|_| rng.gen_range(0.25..0.75)).collect();
        let ramp: Vec<(f64, f64)> = (0..c)
            .map(|_| (rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)))
            .collect();
        let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let contrast: Vec<f64> = (0..c).map(|_| sign * rng.gen_range(lo..hi)).collect();
        let r = rng.gen_range(0.22..0.34) * n as f64;
        let margin = r + 0.5;
        let cy = rng.gen_range(margin..n as f64 - margin);
        let cx = rng.gen_range(margin..n as f64 - margin);
        let half = r * 0.96;
        let mut data = vec![0.0; c * n * n];
        for y in 0..n {
            for x in 0..n {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let on = dy.abs() <= half && dx.abs() <= half && stripe_on(label, n, y, x);
                for ch in 0..c {
                    let (gy, gx) = ramp[ch];
                    let mut v = base[ch] + gy * (y as f64 / n as f64 - 0.5) + gx * (x as f64 / n as f64 - 0.5);
                    if on {
                        v += contrast[ch];
                    }
                    v += rng.gen_range(-PIXEL_NOISE..PIXEL_NOISE);
                    data[ch * n * n + y * n + x] = v.clamp(0.0, 1.0);
                }
            }
        }
        images.push(Tensor::new(vec![c, n, n], data)?);
        labels.push(label);
    }
    Dataset::new(
        format!("synthetic-{}x{}-s{}", spec.classes, spec.per_class, spec.seed),
        DatasetSource::Synthetic,
        spec.classes,
        images,
        labels,
    )
}
