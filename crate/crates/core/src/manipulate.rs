//! The five global manipulations under test: median filtering, Gaussian
//! blurring, additive white Gaussian noise, resizing and JPEG compression.
//!
//! All filters replicate edge samples outside the plane. Outputs are clamped
//! to `[0, 255]` but not rounded; callers that emulate storage round them.

use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Plane;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ManipulationKind {
    Median,
    Blur,
    Noise,
    Resize,
    Jpeg,
}

impl ManipulationKind {
    pub const ALL: [ManipulationKind; 5] = [
        ManipulationKind::Median,
        ManipulationKind::Blur,
        ManipulationKind::Noise,
        ManipulationKind::Resize,
        ManipulationKind::Jpeg,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ManipulationKind::Median => "median",
            ManipulationKind::Blur => "blur",
            ManipulationKind::Noise => "noise",
            ManipulationKind::Resize => "resize",
            ManipulationKind::Jpeg => "jpeg",
        }
    }

    /// The three settings of each manipulation, from easiest to hardest.
    pub fn standard_parameters(self) -> [f64; 3] {
        match self {
            ManipulationKind::Median => [7.0, 5.0, 3.0],
            ManipulationKind::Blur => [1.1, 0.75, 0.5],
            ManipulationKind::Noise => [2.0, 0.5, 0.25],
            ManipulationKind::Resize => [1.5, 1.125, 1.01],
            ManipulationKind::Jpeg => [70.0, 80.0, 90.0],
        }
    }
}

impl fmt::Display for ManipulationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for ManipulationKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ManipulationKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown manipulation `{s}`")))
    }
}

/// One manipulation with its parameter: kernel side, standard deviation,
/// noise standard deviation, scale factor or JPEG quality respectively.
/// `seed` only matters for noise.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManipulationSpec {
    pub kind: ManipulationKind,
    pub parameter: f64,
    #[serde(default)]
    pub seed: u64,
}

impl ManipulationSpec {
    pub fn new(kind: ManipulationKind, parameter: f64) -> Self {
        Self {
            kind,
            parameter,
            seed: 0,
        }
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Full Table-style grid: 5 manipulations x 3 settings.
    pub fn standard_grid() -> Vec<ManipulationSpec> {
        ManipulationKind::ALL
            .into_iter()
            .flat_map(|k| k.standard_parameters().map(|p| ManipulationSpec::new(k, p)))
            .collect()
    }

    pub fn apply(&self, p: &Plane) -> Result<Plane> {
        match self.kind {
            ManipulationKind::Median => median_filter(p, integer_param(self.parameter, "kernel")?),
            ManipulationKind::Blur => gaussian_blur(p, self.parameter),
            ManipulationKind::Noise => add_awgn(p, self.parameter, self.seed),
            ManipulationKind::Resize => resize(p, self.parameter),
            ManipulationKind::Jpeg => {
                let q = integer_param(self.parameter, "quality")?;
                let q =
                    u8::try_from(q).map_err(|_| Error::InvalidParameter(format!("JPEG quality {q} out of range")))?;
                jpeg_compress(p, q)
            }
        }
    }
}

impl fmt::Display for ManipulationSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.kind, self.parameter)
    }
}

/// Parses the `kind:parameter` form written by `Display`.
impl std::str::FromStr for ManipulationSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, param) = s
            .split_once(':')
            .ok_or_else(|| Error::InvalidParameter(format!("expected `kind:parameter`, got `{s}`")))?;
        let parameter: f64 = param
            .trim()
            .parse()
            .map_err(|_| Error::InvalidParameter(format!("bad parameter in `{s}`")))?;
        Ok(ManipulationSpec::new(kind.trim().parse()?, parameter))
    }
}

fn integer_param(v: f64, what: &str) -> Result<usize> {
    if v.fract() != 0.0 || v < 0.0 || !v.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "{what} must be a nonnegative integer, got {v}"
        )));
    }
    Ok(v as usize)
}

/// Median of the `k x k` window centered on each sample.
pub fn median_filter(p: &Plane, k: usize) -> Result<Plane> {
    if k < 3 || k.is_multiple_of(2) {
        return Err(Error::InvalidParameter(format!(
            "median kernel must be odd and at least 3, got {k}"
        )));
    }
    let r = (k / 2) as isize;
    let mut window = Vec::with_capacity(k * k);
    let mid = k * k / 2;
    let out = Plane::from_fn(p.width(), p.height(), |x, y| {
        window.clear();
        for dy in -r..=r {
            for dx in -r..=r {
                window.push(p.get_clamped(x as isize + dx, y as isize + dy));
            }
        }
        let (_, m, _) = window.select_nth_unstable_by(mid, f64::total_cmp);
        *m
    });
    Ok(out)
}

/// Normalized sampled Gaussian with radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= sum);
    k
}

/// Separable convolution of rows then columns with an odd-length kernel.
pub(crate) fn convolve_separable(p: &Plane, kernel: &[f64]) -> Plane {
    let r = (kernel.len() / 2) as isize;
    let rows = Plane::from_fn(p.width(), p.height(), |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * p.get_clamped(x as isize + i as isize - r, y as isize))
            .sum()
    });
    Plane::from_fn(p.width(), p.height(), |x, y| {
        kernel
            .iter()
            .enumerate()
            .map(|(i, w)| w * rows.get_clamped(x as isize, y as isize + i as isize - r))
            .sum()
    })
}

pub fn gaussian_blur(p: &Plane, sigma: f64) -> Result<Plane> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "blur sigma must be positive, got {sigma}"
        )));
    }
    Ok(convolve_separable(p, &gaussian_kernel(sigma)).map(|v| v.clamp(0.0, 255.0)))
}

/// Adds i.i.d. zero-mean Gaussian noise in gray-level units and clamps.
pub fn add_awgn(p: &Plane, sigma: f64, seed: u64) -> Result<Plane> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "noise sigma must be nonnegative, got {sigma}"
        )));
    }
    if sigma == 0.0 {
        return Ok(p.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, sigma).expect("sigma validated above");
    Ok(p.map(|v| (v + normal.sample(&mut rng)).clamp(0.0, 255.0)))
}

/// Catmull-Rom cubic (a = -0.5).
fn cubic_weight(t: f64) -> f64 {
    const A: f64 = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (A + 2.0) * t * t * t - (A + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        A * t * t * t - 5.0 * A * t * t + 8.0 * A * t - 4.0 * A
    } else {
        0.0
    }
}

/// Interpolation taps along one axis: for each output index, the first input
/// index and four weights.
fn cubic_taps(n_in: usize, n_out: usize) -> Vec<(isize, [f64; 4])> {
    let ratio = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|i| {
            let src = (i as f64 + 0.5) * ratio - 0.5;
            let base = src.floor();
            let frac = src - base;
            let w = [
                cubic_weight(frac + 1.0),
                cubic_weight(frac),
                cubic_weight(1.0 - frac),
                cubic_weight(2.0 - frac),
            ];
            (base as isize - 1, w)
        })
        .collect()
}

/// Bicubic resampling to `round(W * scale) x round(H * scale)`.
pub fn resize(p: &Plane, scale: f64) -> Result<Plane> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "resize scale must be positive, got {scale}"
        )));
    }
    let out_w = (p.width() as f64 * scale).round() as usize;
    let out_h = (p.height() as f64 * scale).round() as usize;
    if out_w == 0 || out_h == 0 {
        return Err(Error::InvalidParameter(format!(
            "scale {scale} maps {}x{} to an empty image",
            p.width(),
            p.height()
        )));
    }
    let tx = cubic_taps(p.width(), out_w);
    let ty = cubic_taps(p.height(), out_h);
    let rows = Plane::from_fn(out_w, p.height(), |x, y| {
        let (x0, w) = tx[x];
        (0..4).map(|i| w[i] * p.get_clamped(x0 + i as isize, y as isize)).sum()
    });
    Ok(Plane::from_fn(out_w, out_h, |x, y| {
        let (y0, w) = ty[y];
        (0..4)
            .map(|i| w[i] * rows.get_clamped(x as isize, y0 + i as isize))
            .sum::<f64>()
            .clamp(0.0, 255.0)
    }))
}

/// Baseline luminance quantization table (quality 50), row-major.
pub const LUMA_QUANT_TABLE: [u16; 64] = [
    16, 11, 10, 16, 24, 40, 51, 61, //
    12, 12, 14, 19, 26, 58, 60, 55, //
    14, 13, 16, 24, 40, 57, 69, 56, //
    14, 17, 22, 29, 51, 87, 80, 62, //
    18, 22, 37, 56, 68, 109, 103, 77, //
    24, 35, 55, 64, 81, 104, 113, 92, //
    49, 64, 78, 87, 103, 121, 120, 101, //
    72, 92, 95, 98, 112, 100, 103, 99,
];

/// Luminance table scaled by the usual quality law.
pub fn quant_table(quality: u8) -> Result<[f64; 64]> {
    if !(1..=100).contains(&quality) {
        return Err(Error::InvalidParameter(format!(
            "JPEG quality must be in 1..=100, got {quality}"
        )));
    }
    let q = quality as f64;
    let scale = if quality < 50 { 5000.0 / q } else { 200.0 - 2.0 * q };
    Ok(LUMA_QUANT_TABLE.map(|t| (t as f64 * scale / 100.0).round().max(1.0)))
}

/// Orthonormal 8-point DCT-II basis, `DCT[u][x]`.
fn dct_matrix() -> [[f64; 8]; 8] {
    let mut m = [[0.0; 8]; 8];
    for (u, row) in m.iter_mut().enumerate() {
        let a = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = a * ((2 * x + 1) as f64 * u as f64 * std::f64::consts::PI / 16.0).cos();
        }
    }
    m
}

pub(crate) fn dct2(block: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    // rows: tmp[y][u] = sum_x c[u][x] b[y][x]
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|x| c[u][x] * block[y * 8 + x]).sum();
        }
    }
    for v in 0..8 {
        for u in 0..8 {
            out[v * 8 + u] = (0..8).map(|y| c[v][y] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

pub(crate) fn idct2(coef: &[f64; 64], c: &[[f64; 8]; 8]) -> [f64; 64] {
    let mut tmp = [0.0; 64];
    let mut out = [0.0; 64];
    for y in 0..8 {
        for u in 0..8 {
            tmp[y * 8 + u] = (0..8).map(|v| c[v][y] * coef[v * 8 + u]).sum();
        }
    }
    for y in 0..8 {
        for x in 0..8 {
            out[y * 8 + x] = (0..8).map(|u| c[u][x] * tmp[y * 8 + u]).sum();
        }
    }
    out
}

/// One 8x8 block through the lossy part of baseline JPEG: level shift, DCT,
/// quantize, dequantize, inverse DCT. Output is not clamped.
pub fn jpeg_block_round_trip(block: &[f64; 64], table: &[f64; 64]) -> [f64; 64] {
    let c = dct_matrix();
    let shifted = block.map(|v| v - 128.0);
    let mut coef = dct2(&shifted, &c);
    for (f, q) in coef.iter_mut().zip(table) {
        *f = (*f / q).round() * q;
    }
    idct2(&coef, &c).map(|v| v + 128.0)
}

/// JPEG quantization round trip on a single-channel plane, without entropy
/// coding. Dimensions are padded to multiples of 8 by edge replication and
/// cropped back.
pub fn jpeg_compress(p: &Plane, quality: u8) -> Result<Plane> {
    let table = quant_table(quality)?;
    let c = dct_matrix();
    let (w, h) = (p.width(), p.height());
    let (bw, bh) = (w.div_ceil(8), h.div_ceil(8));
    let mut out = Plane::filled(w, h, 0.0);
    let mut block = [0.0; 64];
    for by in 0..bh {
        for bx in 0..bw {
            for (i, v) in block.iter_mut().enumerate() {
                let x = (bx * 8 + i % 8) as isize;
                let y = (by * 8 + i / 8) as isize;
                *v = p.get_clamped(x, y) - 128.0;
            }
            let mut coef = dct2(&block, &c);
            for (f, q) in coef.iter_mut().zip(&table) {
                *f = (*f / q).round() * q;
            }
            let rec = idct2(&coef, &c);
            for (i, v) in rec.iter().enumerate() {
                let (x, y) = (bx * 8 + i % 8, by * 8 + i / 8);
                if x < w && y < h {
                    out.set(x, y, (v + 128.0).clamp(0.0, 255.0));
                }
            }
        }
    }
    Ok(out)
}
