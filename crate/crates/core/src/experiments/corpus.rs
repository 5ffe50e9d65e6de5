//! Source-grouped image corpora.
//!
//! A corpus on disk is a directory whose subdirectories are source groups
//! (one per capture device); every PGM/PPM/PNG file inside a group is one
//! image. [`synthesize`] builds a corpus of rendered scenes passed through a
//! per-group camera model, for use when no photographs are available.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{load_image, save_pgm, Plane};
use crate::manipulate::{convolve_separable, gaussian_kernel, jpeg_compress};

/// 8-bit grayscale image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<u8>,
}

impl GrayImage {
    /// Rounds and clamps to 8 bits.
    pub fn from_plane(p: &Plane) -> Self {
        Self {
            width: p.width(),
            height: p.height(),
            data: p.data().iter().map(|&v| v.round().clamp(0.0, 255.0) as u8).collect(),
        }
    }

    pub fn to_plane(&self) -> Plane {
        Plane::new(
            self.width,
            self.height,
            self.data.iter().map(|&v| f64::from(v)).collect(),
        )
        .expect("8-bit images are valid planes")
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SourceGroup {
    pub name: String,
    pub images: Vec<GrayImage>,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Corpus {
    pub groups: Vec<SourceGroup>,
}

fn is_image(path: &Path) -> bool {
    matches!(
        path.extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref(),
        Some("pgm" | "ppm" | "png")
    )
}

fn sorted_entries(dir: &Path) -> Result<Vec<std::path::PathBuf>> {
    let mut out = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(dir, err)))
        .collect::<Result<Vec<_>>>()?;
    out.sort();
    Ok(out)
}

impl Corpus {
    /// Loads every group directory in name order, images in file-name order.
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let mut groups = Vec::new();
        for sub in sorted_entries(dir)?.into_iter().filter(|p| p.is_dir()) {
            let images = sorted_entries(&sub)?
                .into_iter()
                .filter(|p| p.is_file() && is_image(p))
                .map(|p| load_image(&p).map(|pl| GrayImage::from_plane(&pl)))
                .collect::<Result<Vec<_>>>()?;
            if !images.is_empty() {
                let name = sub
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_default();
                groups.push(SourceGroup { name, images });
            }
        }
        let corpus = Self { groups };
        corpus.check()?;
        Ok(corpus)
    }

    pub fn check(&self) -> Result<()> {
        match self.groups.len() {
            0 => Err(Error::Dataset("corpus has no source groups with images".into())),
            1 => Err(Error::Dataset(
                "corpus has a single source group; splits need at least two".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for g in &self.groups {
            let sub = dir.join(&g.name);
            std::fs::create_dir_all(&sub).map_err(|e| Error::io(&sub, e))?;
            for (i, img) in g.images.iter().enumerate() {
                save_pgm(&img.to_plane(), sub.join(format!("img{i:04}.pgm")))?;
            }
        }
        Ok(())
    }

    pub fn image_count(&self) -> usize {
        self.groups.iter().map(|g| g.images.len()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub groups: usize,
    pub images_per_group: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            groups: 6,
            images_per_group: 32,
            width: 512,
            height: 512,
        }
    }
}

/// Capture pipeline of one synthetic device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    /// Optical blur, pixels.
    pub psf_sigma: f64,
    /// Shot-noise scale: variance `shot * x` on linear intensities in `[0, 1]`.
    pub shot: f64,
    /// Read-noise standard deviation on linear intensities.
    pub read: f64,
    pub gamma: f64,
    pub sharpen_amount: f64,
    pub sharpen_sigma: f64,
    /// Green-channel Bayer sampling with bilinear interpolation.
    pub cfa: bool,
    pub jpeg_quality: Option<u8>,
}

impl CameraModel {
    pub fn random(rng: &mut impl Rng) -> Self {
        Self {
            psf_sigma: rng.random_range(0.35..0.75),
            shot: rng.random_range(2e-5..2.5e-4),
            read: rng.random_range(5e-4..3e-3),
            gamma: rng.random_range(1.8..2.4),
            sharpen_amount: rng.random_range(0.0..0.8),
            sharpen_sigma: rng.random_range(0.7..1.3),
            cfa: rng.random_bool(0.75),
            jpeg_quality: if rng.random_bool(0.8) {
                Some(rng.random_range(85..=97))
            } else {
                None
            },
        }
    }

    /// Renders a linear scene in `[0, 1]` to an 8-bit image.
    pub fn capture(&self, scene: &Plane, rng: &mut impl Rng) -> Result<GrayImage> {
        let mut x = gaussian_blur_unclamped(scene, self.psf_sigma);
        if self.cfa {
            x = green_cfa(&x);
        }
        let noisy = x.map(|v| {
            let v = v.clamp(0.0, 1.0);
            let sd = (self.shot * v + self.read * self.read).sqrt();
            v + sd * standard_normal(rng)
        });
        let encoded = noisy.map(|v| 255.0 * v.clamp(0.0, 1.0).powf(1.0 / self.gamma));
        let sharpened = if self.sharpen_amount > 0.0 {
            let low = gaussian_blur_unclamped(&encoded, self.sharpen_sigma);
            Plane::from_fn(encoded.width(), encoded.height(), |px, py| {
                let v = encoded.get(px, py);
                v + self.sharpen_amount * (v - low.get(px, py))
            })
        } else {
            encoded
        };
        let stored = sharpened.quantize_u8();
        let out = match self.jpeg_quality {
            Some(q) => jpeg_compress(&stored, q)?,
            None => stored,
        };
        Ok(GrayImage::from_plane(&out))
    }
}

fn standard_normal(rng: &mut impl Rng) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}

fn gaussian_blur_unclamped(p: &Plane, sigma: f64) -> Plane {
    convolve_separable(p, &gaussian_kernel(sigma))
}

/// Keeps green samples of an RGGB mosaic and bilinearly fills the rest.
fn green_cfa(p: &Plane) -> Plane {
    let (w, h) = (p.width(), p.height());
    Plane::from_fn(w, h, |x, y| {
        if (x + y) % 2 == 0 {
            p.get(x, y)
        } else {
            let (xi, yi) = (x as isize, y as isize);
            let mut s = 0.0;
            let mut n = 0.0;
            for (dx, dy) in [(-1, 0), (1, 0), (0, -1), (0, 1)] {
                let (nx, ny) = (xi + dx, yi + dy);
                if nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h {
                    s += p.get(nx as usize, ny as usize);
                    n += 1.0;
                }
            }
            s / n
        }
    })
}

/// Value noise on a lattice with the given cell size, smoothstep-interpolated.
fn value_noise(w: usize, h: usize, cell: f64, rng: &mut impl Rng) -> Plane {
    let gw = (w as f64 / cell).ceil() as usize + 2;
    let gh = (h as f64 / cell).ceil() as usize + 2;
    let grid: Vec<f64> = (0..gw * gh).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (ox, oy) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    Plane::from_fn(w, h, |x, y| {
        let fx = x as f64 / cell + ox;
        let fy = y as f64 / cell + oy;
        let (ix, iy) = (fx.floor() as usize, fy.floor() as usize);
        let (tx, ty) = (smooth(fx.fract()), smooth(fy.fract()));
        let g = |i: usize, j: usize| grid[j * gw + i];
        let top = g(ix, iy) * (1.0 - tx) + g(ix + 1, iy) * tx;
        let bottom = g(ix, iy + 1) * (1.0 - tx) + g(ix + 1, iy + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
}

enum Shape {
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
    },
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        cos: f64,
        sin: f64,
    },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Disc { cx, cy, r } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
            Shape::Rect {
                cx,
                cy,
                hw,
                hh,
                cos,
                sin,
            } => {
                let (dx, dy) = (x - cx, y - cy);
                (dx * cos + dy * sin).abs() <= hw && (-dx * sin + dy * cos).abs() <= hh
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Disc { cx, cy, r } => (cx - r, cy - r, cx + r, cy + r),
            Shape::Rect { cx, cy, hw, hh, .. } => {
                let e = (hw * hw + hh * hh).sqrt();
                (cx - e, cy - e, cx + e, cy + e)
            }
        }
    }
}

/// Renders a linear-intensity scene: multi-scale texture, piecewise flat
/// objects with anti-aliased edges, and patches of fine texture.
pub fn render_scene(w: usize, h: usize, rng: &mut impl Rng) -> Plane {
    let mut scene = Plane::filled(w, h, rng.random_range(0.25..0.6));
    let roughness = rng.random_range(0.5..1.0);
    let mut cell = 256.0;
    let mut amp = 0.25;
    while cell >= 2.0 {
        let n = value_noise(w, h, cell, rng);
        scene = Plane::from_fn(w, h, |x, y| scene.get(x, y) + amp * n.get(x, y));
        cell /= 2.0;
        amp *= roughness * 0.7;
    }

    let objects = rng.random_range(4..14);
    for _ in 0..objects {
        let cx = rng.random_range(0.0..w as f64);
        let cy = rng.random_range(0.0..h as f64);
        let size = rng.random_range(10.0..(w.min(h) as f64 / 3.0));
        let shape = if rng.random_bool(0.5) {
            Shape::Disc { cx, cy, r: size }
        } else {
            let a: f64 = rng.random_range(0.0..std::f64::consts::PI);
            Shape::Rect {
                cx,
                cy,
                hw: size,
                hh: size * rng.random_range(0.2..1.0),
                cos: a.cos(),
                sin: a.sin(),
            }
        };
        let base = rng.random_range(0.02..0.95);
        let (gx, gy) = (rng.random_range(-1e-3..1e-3), rng.random_range(-1e-3..1e-3));
        let texture = if rng.random_bool(0.4) {
            Some((
                value_noise(w, h, rng.random_range(1.5..4.0), rng),
                rng.random_range(0.02..0.12),
            ))
        } else {
            None
        };
        let (x0, y0, x1, y1) = shape.bounds();
        let xs = x0.floor().max(0.0) as usize..(x1.ceil().max(0.0) as usize).min(w);
        let ys = y0.floor().max(0.0) as usize..(y1.ceil().max(0.0) as usize).min(h);
        for y in ys {
            for x in xs.clone() {
                // 4x4 supersampled coverage
                let mut cover = 0.0;
                for sy in 0..4 {
                    for sx in 0..4 {
                        let px = x as f64 + (sx as f64 + 0.5) / 4.0;
                        let py = y as f64 + (sy as f64 + 0.5) / 4.0;
                        if shape.contains(px, py) {
                            cover += 1.0 / 16.0;
                        }
                    }
                }
                if cover == 0.0 {
                    continue;
                }
                let mut v = base + gx * (x as f64 - cx) + gy * (y as f64 - cy);
                if let Some((t, a)) = &texture {
                    v += a * t.get(x, y);
                }
                let old = scene.get(x, y);
                scene.set(x, y, old * (1.0 - cover) + v * cover);
            }
        }
    }
    scene.map(|v| v.clamp(0.005, 0.995))
}

/// One camera per group; images rendered in parallel from per-image seeds.
pub fn synthesize(cfg: &SynthConfig, seed: u64) -> Result<Corpus> {
    if cfg.groups < 2 || cfg.images_per_group == 0 || cfg.width < 16 || cfg.height < 16 {
        return Err(Error::InvalidParameter(format!(
            "unusable synthetic corpus settings: {cfg:?}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cameras: Vec<CameraModel> = (0..cfg.groups).map(|_| CameraModel::random(&mut rng)).collect();
    let groups = cameras
        .iter()
        .enumerate()
        .map(|(g, cam)| {
            let images = (0..cfg.images_per_group)
                .into_par_iter()
                .map(|i| {
                    let img_seed = seed
                        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                        .wrapping_add(((g as u64) << 32) | i as u64);
                    let mut r = ChaCha8Rng::seed_from_u64(img_seed);
                    let scene = render_scene(cfg.width, cfg.height, &mut r);
                    cam.capture(&scene, &mut r)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(SourceGroup {
                name: format!("device{g:02}"),
                images,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Corpus { groups })
}
