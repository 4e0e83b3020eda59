//! Input-preprocessing defenses applied inside a black-box target before
//! classification: bit-depth reduction, median smoothing, a simplified JPEG
//! round trip and random resizing with padding.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::resize_bilinear;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DefenseSpec {
    BitDepth {
        bits: u32,
    },
    MedianSmooth {
        kernel: usize,
    },
    Jpeg {
        quality: u32,
    },
    /// Random resize into `[input, input + extra]`, zero-pad to
    /// `input + extra`, then resize back to the input size.
    ResizePad {
        extra: usize,
        rng_seed: u64,
        /// Draw once per target instead of once per query.
        #[serde(default)]
        fixed_per_sample: bool,
    },
}

impl DefenseSpec {
    pub fn bit_depth() -> Self {
        DefenseSpec::BitDepth { bits: 3 }
    }

    pub fn median() -> Self {
        DefenseSpec::MedianSmooth { kernel: 3 }
    }

    pub fn jpeg() -> Self {
        DefenseSpec::Jpeg { quality: 75 }
    }

    pub fn resize_pad(rng_seed: u64) -> Self {
        DefenseSpec::ResizePad {
            extra: 8,
            rng_seed,
            fixed_per_sample: false,
        }
    }

    /// The four defenses at their default parameters.
    pub fn defaults(rng_seed: u64) -> [DefenseSpec; 4] {
        [
            Self::resize_pad(rng_seed),
            Self::bit_depth(),
            Self::median(),
            Self::jpeg(),
        ]
    }

    pub fn name(&self) -> &'static str {
        match self {
            DefenseSpec::BitDepth { .. } => "bit_depth",
            DefenseSpec::MedianSmooth { .. } => "median",
            DefenseSpec::Jpeg { .. } => "jpeg",
            DefenseSpec::ResizePad { .. } => "resize_pad",
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            DefenseSpec::BitDepth { bits } if !(1..=8).contains(&bits) => {
                Err(Error::Config(format!("bit depth {bits} outside 1..=8")))
            }
            DefenseSpec::MedianSmooth { kernel } if kernel < 3 || kernel % 2 == 0 => {
                Err(Error::Config(format!("median kernel {kernel} must be odd and >= 3")))
            }
            DefenseSpec::Jpeg { quality } if !(1..=100).contains(&quality) => {
                Err(Error::Config(format!("JPEG quality {quality} outside 1..=100")))
            }
            _ => Ok(()),
        }
    }

    /// Applies the defense; only resize-pad consumes `rng`.
    pub fn apply(&self, x: &Tensor, rng: &mut impl Rng) -> Result<Tensor> {
        match *self {
            DefenseSpec::BitDepth { bits } => bit_depth_reduce(x, bits),
            DefenseSpec::MedianSmooth { kernel } => median_smooth(x, kernel),
            DefenseSpec::Jpeg { quality } => jpeg_compress(x, quality),
            DefenseSpec::ResizePad { extra, .. } => {
                let (_, h, w) = x.chw()?;
                let draw = ResizePadDraw::sample(h, w, extra, rng);
                draw.apply(x, extra)
            }
        }
    }
}

/// `round(x * (2^bits - 1)) / (2^bits - 1)`.
pub fn bit_depth_reduce(x: &Tensor, bits: u32) -> Result<Tensor> {
    DefenseSpec::BitDepth { bits }.validate()?;
    let levels = ((1u32 << bits) - 1) as f64;
    Ok(x.map(|v| (v * levels).round() / levels))
}

/// Mirror index into `0..n` without repeating the edge sample.
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

/// Per-channel sliding median with reflect padding.
pub fn median_smooth(x: &Tensor, kernel: usize) -> Result<Tensor> {
    DefenseSpec::MedianSmooth { kernel }.validate()?;
    let (c, h, w) = x.chw()?;
    let r = (kernel / 2) as isize;
    let mut out = Vec::with_capacity(x.len());
    let mut window = Vec::with_capacity(kernel * kernel);
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for y in 0..h as isize {
            for xx in 0..w as isize {
                window.clear();
                for dy in -r..=r {
                    let yy = reflect(y + dy, h);
                    for dx in -r..=r {
                        window.push(plane[yy * w + reflect(xx + dx, w)]);
                    }
                }
                let mid = window.len() / 2;
                let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
                out.push(*m);
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Standard JPEG luminance quantization table, row-major.
pub const LUMA_QUANT: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled with the libjpeg quality convention.
pub fn quant_table(quality: u32) -> Result<[f64; 64]> {
    DefenseSpec::Jpeg { quality }.validate()?;
    let scale = if quality < 50 { 5000 / quality } else { 200 - 2 * quality };
    let mut t = [0.0; 64];
    for (dst, &q) in t.iter_mut().zip(&LUMA_QUANT) {
        *dst = ((q as u32 * scale + 50) / 100).clamp(1, 255) as f64;
    }
    Ok(t)
}

fn dct_basis() -> [[f64; 8]; 8] {
    let mut b = [[0.0; 8]; 8];
    for (u, row) in b.iter_mut().enumerate() {
        let cu = if u == 0 { (1.0f64 / 8.0).sqrt() } else { (2.0f64 / 8.0).sqrt() };
        for (x, v) in row.iter_mut().enumerate() {
            *v = cu * (((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI) / 16.0).cos();
        }
    }
    b
}

/// Orthonormal 2-D DCT-II of an 8x8 block.
pub fn dct8x8(block: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut out = [0.0; 64];
    for u in 0..8 {
        for v in 0..8 {
            let mut acc = 0.0;
            for y in 0..8 {
                for x in 0..8 {
                    acc += b[u][y] * b[v][x] * block[y * 8 + x];
                }
            }
            out[u * 8 + v] = acc;
        }
    }
    out
}

/// Inverse of [`dct8x8`].
pub fn idct8x8(coef: &[f64; 64]) -> [f64; 64] {
    let b = dct_basis();
    let mut out = [0.0; 64];
    for y in 0..8 {
        for x in 0..8 {
            let mut acc = 0.0;
            for u in 0..8 {
                for v in 0..8 {
                    acc += b[u][y] * b[v][x] * coef[u * 8 + v];
                }
            }
            out[y * 8 + x] = acc;
        }
    }
    out
}

/// Quantized coefficient indices `round(c / q)`.
pub fn quantize(coef: &[f64; 64], table: &[f64; 64]) -> [i32; 64] {
    let mut q = [0; 64];
    for i in 0..64 {
        q[i] = (coef[i] / table[i]).round() as i32;
    }
    q
}

/// Lossy JPEG-style round trip per channel: level shift to 8-bit scale,
/// 8x8 DCT, quantize/dequantize with the scaled luminance table, inverse
/// DCT, clip. Planes are edge-extended to multiples of 8.
pub fn jpeg_compress(x: &Tensor, quality: u32) -> Result<Tensor> {
    let table = quant_table(quality)?;
    let (c, h, w) = x.chw()?;
    let ph = h.div_ceil(8) * 8;
    let pw = w.div_ceil(8) * 8;
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        let plane = &x.data()[ch * h * w..(ch + 1) * h * w];
        for by in (0..ph).step_by(8) {
            for bx in (0..pw).step_by(8) {
                let mut block = [0.0; 64];
                for y in 0..8 {
                    for xx in 0..8 {
                        let sy = (by + y).min(h - 1);
                        let sx = (bx + xx).min(w - 1);
                        block[y * 8 + xx] = plane[sy * w + sx] * 255.0 - 128.0;
                    }
                }
                let coef = dct8x8(&block);
                let q = quantize(&coef, &table);
                let mut deq = [0.0; 64];
                for i in 0..64 {
                    deq[i] = q[i] as f64 * table[i];
                }
                let rec = idct8x8(&deq);
                for y in 0..8 {
                    for xx in 0..8 {
                        let (ty, tx) = (by + y, bx + xx);
                        if ty < h && tx < w {
                            out[ch * h * w + ty * w + tx] = ((rec[y * 8 + xx] + 128.0) / 255.0).clamp(0.0, 1.0);
                        }
                    }
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// One random draw of the resize-and-pad defense.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResizePadDraw {
    pub new_h: usize,
    pub new_w: usize,
    pub top: usize,
    pub left: usize,
}

impl ResizePadDraw {
    /// Size grows by `d ~ U{0..=extra}` on both axes; offsets are uniform
    /// over the remaining slack.
    pub fn sample(h: usize, w: usize, extra: usize, rng: &mut impl Rng) -> Self {
        let d = rng.gen_range(0..=extra);
        let slack = extra - d;
        Self {
            new_h: h + d,
            new_w: w + d,
            top: rng.gen_range(0..=slack),
            left: rng.gen_range(0..=slack),
        }
    }

    pub fn apply(&self, x: &Tensor, extra: usize) -> Result<Tensor> {
        let (c, h, w) = x.chw()?;
        let resized = resize_bilinear(x, self.new_h, self.new_w)?;
        let (ch_, cw) = (h + extra, w + extra);
        let mut canvas = Tensor::zeros(vec![c, ch_, cw]);
        for k in 0..c {
            for y in 0..self.new_h {
                for xx in 0..self.new_w {
                    canvas.data_mut()[(k * ch_ + self.top + y) * cw + self.left + xx] =
                        resized.data()[(k * self.new_h + y) * self.new_w + xx];
                }
            }
        }
        let back = resize_bilinear(&canvas, h, w)?;
        Ok(back.map(|v| v.clamp(0.0, 1.0)))
    }
}

pub fn random_resize_pad(x: &Tensor, extra: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let (_, h, w) = x.chw()?;
    ResizePadDraw::sample(h, w, extra, rng).apply(x, extra)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(vec![c, h, w], |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn bit_depth_examples() {
        let x = Tensor::new(vec![1], vec![0.6]).unwrap();
        assert_eq!(bit_depth_reduce(&x, 1).unwrap().data(), &[1.0]);
        let grid = Tensor::from_fn(vec![11], |i| i as f64 / 10.0);
        let y = bit_depth_reduce(&grid, 3).unwrap();
        for (i, v) in y.data().iter().enumerate() {
            let oracle = (i as f64 / 10.0 * 7.0).round() / 7.0;
            assert_eq!(*v, oracle);
        }
        let r = random_image(3, 5, 5, 1);
        let once = bit_depth_reduce(&r, 3).unwrap();
        assert_eq!(bit_depth_reduce(&once, 3).unwrap(), once);
        assert!(matches!(bit_depth_reduce(&r, 0), Err(Error::Config(_))));
        assert!(matches!(bit_depth_reduce(&r, 9), Err(Error::Config(_))));
    }

    #[test]
    fn median_constant_and_impulse() {
        let c = Tensor::full(vec![2, 5, 5], 0.3);
        assert_eq!(median_smooth(&c, 3).unwrap(), c);
        let mut imp = Tensor::zeros(vec![1, 5, 5]);
        imp.data_mut()[12] = 1.0;
        assert!(median_smooth(&imp, 3).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(matches!(median_smooth(&c, 4), Err(Error::Config(_))));
    }

    #[test]
    fn median_matches_sorting_oracle() {
        let x = random_image(2, 6, 6, 4);
        let y = median_smooth(&x, 3).unwrap();
        let refl = |i: isize, n: isize| -> usize {
            (if i < 0 {
                -i
            } else if i >= n {
                2 * n - 2 - i
            } else {
                i
            }) as usize
        };
        for ch in 0..2 {
            for r in 0..6isize {
                for c in 0..6isize {
                    let mut win = Vec::new();
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            win.push(x.data()[ch * 36 + refl(r + dy, 6) * 6 + refl(c + dx, 6)]);
                        }
                    }
                    win.sort_by(f64::total_cmp);
                    assert_eq!(y.data()[ch * 36 + r as usize * 6 + c as usize], win[4]);
                }
            }
        }
    }

    #[test]
    fn dct_roundtrip_is_orthogonal() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut block = [0.0; 64];
        for v in &mut block {
            *v = rng.gen_range(-128.0..127.0);
        }
        let back = idct8x8(&dct8x8(&block));
        for (a, b) in block.iter().zip(&back) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn jpeg_quality_100_is_near_identity() {
        let x = random_image(3, 13, 11, 5);
        let y = jpeg_compress(&x, 100).unwrap();
        assert_eq!(y.shape(), x.shape());
        let worst = x.data().iter().zip(y.data()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 0.02, "{worst}");
    }

    #[test]
    fn quality_50_table_is_the_base_table() {
        let t = quant_table(50).unwrap();
        for (a, &b) in t.iter().zip(&LUMA_QUANT) {
            assert_eq!(*a, b as f64);
        }
        assert!(quant_table(0).is_err());
        assert!(quant_table(101).is_err());
    }

    #[test]
    fn quantization_matches_per_coefficient_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut block = [0.0; 64];
        for v in &mut block {
            *v = rng.gen_range(-128.0..127.0);
        }
        let coef = dct8x8(&block);
        let table = quant_table(50).unwrap();
        let q = quantize(&coef, &table);
        for i in 0..64 {
            assert_eq!(q[i], (coef[i] / LUMA_QUANT[i] as f64).round() as i32);
        }
    }

    #[test]
    fn resize_pad_keeps_shape_and_is_seeded() {
        let x = random_image(3, 16, 16, 9);
        let a = random_resize_pad(&x, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = random_resize_pad(&x, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        assert_eq!(a.shape(), x.shape());
        assert_eq!(a, b);
        assert!(a.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn resize_pad_draws_are_uniform() {
        use statrs::distribution::{ChiSquared, ContinuousCDF};
        let extra = 8;
        let n = 10_000;
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        // cell (d, top); P = 1/(extra+1) * 1/(slack+1)
        let mut counts = vec![vec![0usize; extra + 1]; extra + 1];
        for _ in 0..n {
            let draw = ResizePadDraw::sample(16, 16, extra, &mut rng);
            counts[draw.new_h - 16][draw.top] += 1;
        }
        let mut stat = 0.0;
        let mut cells = 0;
        for (d, row) in counts.iter().enumerate() {
            let slack = extra - d;
            let expected = n as f64 / (extra + 1) as f64 / (slack + 1) as f64;
            for &c in &row[..=slack] {
                stat += (c as f64 - expected).powi(2) / expected;
                cells += 1;
            }
            assert!(row[slack + 1..].iter().all(|&c| c == 0));
        }
        let p = 1.0 - ChiSquared::new((cells - 1) as f64).unwrap().cdf(stat);
        assert!(p > 0.01, "chi2 {stat} over {cells} cells, p = {p}");
    }

    #[test]
    fn defenses_map_unit_images_to_unit_images() {
        let x = random_image(3, 16, 16, 10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for d in DefenseSpec::defaults(0) {
            let y = d.apply(&x, &mut rng).unwrap();
            assert_eq!(y.shape(), x.shape(), "{}", d.name());
            assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)), "{}", d.name());
        }
    }
}
