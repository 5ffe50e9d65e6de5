//! Sliding-window heat maps and blur splices for localization.

use std::path::Path;

use rand::seq::IndexedRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::ExperimentConfig;
use super::corpus::{Corpus, GrayImage};
use super::dataset::split_groups;
use super::eval::Predictor;
use super::seeds;
use crate::error::{Error, Result};
use crate::image::{patch_origins, save_pgm, Origin, Plane};
use crate::manipulate::gaussian_blur;

/// Manipulation probability of every window on a regular grid.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatMap {
    pub width: usize,
    pub height: usize,
    pub window: usize,
    pub stride: usize,
    pub cols: usize,
    pub rows: usize,
    /// Row-major, `rows x cols`.
    pub scores: Vec<f64>,
}

impl HeatMap {
    pub fn get(&self, col: usize, row: usize) -> f64 {
        self.scores[row * self.cols + col]
    }

    pub fn origin(&self, col: usize, row: usize) -> Origin {
        Origin {
            x: col * self.stride,
            y: row * self.stride,
        }
    }

    fn nearest(&self, pos: usize, n: usize) -> usize {
        let c = (pos as f64 + 0.5 - self.window as f64 / 2.0) / self.stride as f64;
        (c.round().max(0.0) as usize).min(n - 1)
    }

    /// Image-sized plane; each pixel takes the score of the window whose
    /// centre is nearest.
    pub fn upsample(&self) -> Plane {
        let cols: Vec<usize> = (0..self.width).map(|x| self.nearest(x, self.cols)).collect();
        let rows: Vec<usize> = (0..self.height).map(|y| self.nearest(y, self.rows)).collect();
        Plane::from_fn(self.width, self.height, |x, y| self.get(cols[x], rows[y]))
    }
}

pub fn localize(image: &Plane, predictor: &dyn Predictor, window: usize, stride: usize) -> Result<HeatMap> {
    let origins = patch_origins(image.width(), image.height(), window, stride)?;
    let cols = (image.width() - window) / stride + 1;
    let rows = (image.height() - window) / stride + 1;
    debug_assert_eq!(origins.len(), cols * rows);
    let scores = origins
        .par_iter()
        .map(|o| predictor.probability(&image.crop(o.x, o.y, window, window)))
        .collect::<Result<Vec<_>>>()?;
    Ok(HeatMap {
        width: image.width(),
        height: image.height(),
        window,
        stride,
        cols,
        rows,
        scores,
    })
}

/// 8-bit PGM at image size, `round(255 p)`.
pub fn save_heatmap(map: &HeatMap, path: impl AsRef<Path>) -> Result<()> {
    save_pgm(&map.upsample().map(|p| 255.0 * p), path)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Region {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Region {
    pub fn centered(width: usize, height: usize, side: usize) -> Result<Self> {
        if side == 0 || side > width || side > height {
            return Err(Error::InvalidParameter(format!(
                "region side {side} does not fit a {width}x{height} image"
            )));
        }
        Ok(Self {
            x: (width - side) / 2,
            y: (height - side) / 2,
            width: side,
            height: side,
        })
    }

    fn contains_window(&self, o: Origin, w: usize) -> bool {
        o.x >= self.x && o.y >= self.y && o.x + w <= self.x + self.width && o.y + w <= self.y + self.height
    }

    fn meets_window(&self, o: Origin, w: usize) -> bool {
        o.x < self.x + self.width && self.x < o.x + w && o.y < self.y + self.height && self.y < o.y + w
    }
}

/// Blurs `region` of `image` and stores the result with 8-bit precision.
pub fn splice_blur(image: &Plane, region: Region, sigma: f64) -> Result<Plane> {
    let blurred = gaussian_blur(image, sigma)?;
    let mut out = image.clone();
    out.paste(
        &blurred.crop(region.x, region.y, region.width, region.height),
        region.x,
        region.y,
    );
    Ok(GrayImage::from_plane(&out).to_plane())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RegionContrast {
    /// Mean score of windows lying entirely inside the region.
    pub inside: f64,
    /// Mean score of windows not touching the region.
    pub outside: f64,
    pub inside_windows: usize,
    pub outside_windows: usize,
}

pub fn region_contrast(map: &HeatMap, region: Region) -> Result<RegionContrast> {
    let (mut si, mut ni, mut so, mut no) = (0.0, 0, 0.0, 0);
    for row in 0..map.rows {
        for col in 0..map.cols {
            let o = map.origin(col, row);
            if region.contains_window(o, map.window) {
                si += map.get(col, row);
                ni += 1;
            } else if !region.meets_window(o, map.window) {
                so += map.get(col, row);
                no += 1;
            }
        }
    }
    if ni == 0 || no == 0 {
        return Err(Error::InvalidParameter(
            "region must contain one window and miss another".into(),
        ));
    }
    Ok(RegionContrast {
        inside: si / ni as f64,
        outside: so / no as f64,
        inside_windows: ni,
        outside_windows: no,
    })
}

#[derive(Clone, Debug)]
pub struct LocalizationCase {
    pub group: usize,
    pub image: usize,
    pub spliced: Plane,
    pub map: HeatMap,
    pub contrast: RegionContrast,
}

/// Splices `cfg.localize.images` seeded test-group images and maps them.
pub fn run_localization(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    predictor: &dyn Predictor,
    log: &mut dyn FnMut(&str),
) -> Result<Vec<LocalizationCase>> {
    cfg.validate()?;
    corpus.check()?;
    let lc = &cfg.localize;
    let (_, test_groups) = split_groups(
        corpus.groups.len(),
        cfg.dataset.split_fraction,
        seeds::derive(cfg.seed, seeds::SPLIT),
    )?;
    let pool: Vec<(usize, usize)> = test_groups
        .iter()
        .flat_map(|&g| (0..corpus.groups[g].images.len()).map(move |i| (g, i)))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seeds::derive(cfg.seed, seeds::LOCALIZE));
    let mut chosen: Vec<(usize, usize)> = pool.choose_multiple(&mut rng, lc.images).copied().collect();
    chosen.sort_unstable();
    let mut cases = Vec::new();
    for (g, i) in chosen {
        let image = corpus.groups[g].images[i].to_plane();
        let region = Region::centered(image.width(), image.height(), lc.region)?;
        let spliced = splice_blur(&image, region, lc.sigma)?;
        let map = localize(&spliced, predictor, lc.window, lc.stride)?;
        let contrast = region_contrast(&map, region)?;
        log(&format!(
            "{}/{i}: inside {:.4} outside {:.4}",
            corpus.groups[g].name, contrast.inside, contrast.outside
        ));
        cases.push(LocalizationCase {
            group: g,
            image: i,
            spliced,
            map,
            contrast,
        });
    }
    Ok(cases)
}
