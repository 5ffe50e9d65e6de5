//! Handcrafted residual co-occurrence descriptor.
//!
//! The chain is: 4-tap third-order residual `[1, -3, 3, -1]` along rows,
//! uniform scalar quantization to three levels, and histograms of four
//! consecutive quantized residuals taken along and across the filter
//! direction. The same chain runs on the transposed patch and both
//! orientations accumulate into one 162-bin feature: 81 along-direction bins
//! followed by 81 across-direction bins.
//!
//! Co-occurrence windows are counted on the site grid of the equivalent
//! network (see [`crate::bownet`]): a window anchored at `(y, x)` of an
//! `H x W` orientation is counted when `y < H - 4` and `x < W - 4`, and the
//! whole window fits. This is the valid output grid of the network's 5-row
//! kernels, so the two paths see identical pixel neighborhoods.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::{transpose, Plane};

pub const RESIDUAL_TAPS: [f64; 4] = [1.0, -3.0, 3.0, -1.0];
pub const DEFAULT_DELTA: f64 = 4.5;
pub const DEFAULT_LEVELS: u32 = 3;
/// Co-occurrence order.
pub const ORDER: usize = 4;
/// `3^4` bins per direction.
pub const BINS: usize = 81;
pub const FEATURE_LEN: usize = 2 * BINS;
/// Index of the all-zero pattern.
pub const ZERO_BIN: usize = 40;
/// Rows (and columns) of the network kernel footprint that bound the site grid.
pub(crate) const KERNEL_SPAN: usize = 5;

/// Row-filtered residual, `height x (width - 3)` for an input of `width`.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ResidualMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

/// Quantized residual with entries in `-(L-1)/2 ..= (L-1)/2`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct QuantizedMap {
    pub width: usize,
    pub height: usize,
    pub data: Vec<i8>,
}

impl QuantizedMap {
    #[inline]
    pub fn get(&self, x: usize, y: usize) -> i8 {
        self.data[y * self.width + x]
    }

    /// Top-left `width x height` sub-map.
    pub fn crop(&self, width: usize, height: usize) -> QuantizedMap {
        assert!(width <= self.width && height <= self.height);
        let data = (0..height)
            .flat_map(|y| self.data[y * self.width..y * self.width + width].iter().copied())
            .collect();
        QuantizedMap { width, height, data }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Direction {
    /// Windows run along the filter direction (horizontal for a row filter).
    Along,
    /// Windows run across it (vertical).
    Across,
}

/// 162-bin descriptor: along-direction histogram then across-direction.
#[derive(Clone, Debug, PartialEq)]
pub struct Feature(pub [f64; FEATURE_LEN]);

impl Feature {
    pub fn zeros() -> Self {
        Feature([0.0; FEATURE_LEN])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn along(&self) -> &[f64] {
        &self.0[..BINS]
    }

    pub fn across(&self) -> &[f64] {
        &self.0[BINS..]
    }

    /// Divides each 81-bin block by its total (blocks with zero mass are left as is).
    pub fn normalized(&self) -> Feature {
        let mut out = self.clone();
        for block in out.0.chunks_mut(BINS) {
            let total: f64 = block.iter().sum();
            if total > 0.0 {
                block.iter_mut().for_each(|v| *v /= total);
            }
        }
        out
    }
}

impl TryFrom<&[f64]> for Feature {
    type Error = Error;

    fn try_from(v: &[f64]) -> Result<Self> {
        let arr: [f64; FEATURE_LEN] = v
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("feature needs {FEATURE_LEN} values, got {}", v.len())))?;
        Ok(Feature(arr))
    }
}

/// Horizontal sliding inner product with [`RESIDUAL_TAPS`], valid support.
pub fn residual(p: &Plane) -> Result<ResidualMap> {
    if p.width() < ORDER {
        return Err(Error::TooSmall(format!(
            "residual filter needs width >= 4, got {}",
            p.width()
        )));
    }
    let width = p.width() - 3;
    let mut data = Vec::with_capacity(width * p.height());
    for y in 0..p.height() {
        let row = p.row(y);
        data.extend(row.windows(4).map(|w| w[0] - 3.0 * w[1] + 3.0 * w[2] - w[3]));
    }
    Ok(ResidualMap {
        width,
        height: p.height(),
        data,
    })
}

/// Uniform quantizer: `clamp(round(r / delta), -(L-1)/2, (L-1)/2)`, rounding
/// half away from zero.
pub fn quantize(r: &ResidualMap, delta: f64, levels: u32) -> Result<QuantizedMap> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "quantization step must be positive, got {delta}"
        )));
    }
    if levels.is_multiple_of(2) || levels > 255 {
        return Err(Error::InvalidParameter(format!(
            "number of levels must be odd and below 256, got {levels}"
        )));
    }
    let half = ((levels - 1) / 2) as f64;
    let data = r.data.iter().map(|&v| quantize_value(v, delta, half)).collect();
    Ok(QuantizedMap {
        width: r.width,
        height: r.height,
        data,
    })
}

#[inline]
pub(crate) fn quantize_value(v: f64, delta: f64, half: f64) -> i8 {
    (v / delta).round().clamp(-half, half) as i8
}

/// Base-3 code of four digits in `{-1, 0, 1}`: `sum (q_n + 1) 3^n`.
pub fn encode_digits(q: [i8; ORDER]) -> Result<usize> {
    let mut index = 0;
    let mut weight = 1;
    for d in q {
        if !(-1..=1).contains(&d) {
            return Err(Error::InvalidParameter(format!("digit {d} outside -1..=1")));
        }
        index += (d + 1) as usize * weight;
        weight *= 3;
    }
    Ok(index)
}

/// Inverse of [`encode_digits`].
pub fn decode_index(index: usize) -> [i8; ORDER] {
    assert!(index < BINS, "index {index} outside 0..81");
    let mut rest = index;
    std::array::from_fn(|_| {
        let d = (rest % 3) as i8 - 1;
        rest /= 3;
        d
    })
}

#[inline]
fn code_unchecked(a: i8, b: i8, c: i8, d: i8) -> usize {
    (a + 1) as usize + 3 * (b + 1) as usize + 9 * (c + 1) as usize + 27 * (d + 1) as usize
}

/// Histogram of base-3 codes of every run of four consecutive samples in the
/// given direction, over the full map.
pub fn cooccurrence_hist(q: &QuantizedMap, direction: Direction) -> Result<[u64; BINS]> {
    let (need_w, need_h) = match direction {
        Direction::Along => (ORDER, 1),
        Direction::Across => (1, ORDER),
    };
    if q.width < need_w || q.height < need_h {
        return Err(Error::TooSmall(format!(
            "{}x{} map cannot host a {direction:?} window",
            q.width, q.height
        )));
    }
    if q.data.iter().any(|d| !(-1..=1).contains(d)) {
        return Err(Error::InvalidParameter("co-occurrences need three-level maps".into()));
    }
    let mut hist = [0u64; BINS];
    let w = q.width;
    match direction {
        Direction::Along => {
            for y in 0..q.height {
                for win in q.data[y * w..(y + 1) * w].windows(ORDER) {
                    hist[code_unchecked(win[0], win[1], win[2], win[3])] += 1;
                }
            }
        }
        Direction::Across => {
            for y in 0..=q.height - ORDER {
                for x in 0..w {
                    let i = y * w + x;
                    hist[code_unchecked(q.data[i], q.data[i + w], q.data[i + 2 * w], q.data[i + 3 * w])] += 1;
                }
            }
        }
    }
    Ok(hist)
}

/// Adds one orientation's along and across histograms into `counts`.
fn accumulate_orientation(p: &Plane, delta: f64, counts: &mut [u64; FEATURE_LEN]) -> Result<()> {
    let (w, h) = (p.width(), p.height());
    let q = quantize(&residual(p)?, delta, DEFAULT_LEVELS)?;
    // windows anchored at y < h - 4; along also needs x + 3 < w - 3
    let along = cooccurrence_hist(&q.crop(q.width, h - (KERNEL_SPAN - 1)), Direction::Along)?;
    // anchors y < h - 4, x < w - 4
    let across = cooccurrence_hist(&q.crop(w - (KERNEL_SPAN - 1), h - 1), Direction::Across)?;
    for k in 0..BINS {
        counts[k] += along[k];
        counts[BINS + k] += across[k];
    }
    Ok(())
}

/// Smallest patch side accepted by [`extract_feature`].
pub const MIN_PATCH_SIDE: usize = 8;

/// Raw co-occurrence counts of a patch and its transpose.
pub fn extract_counts(patch: &Plane, delta: f64) -> Result<[u64; FEATURE_LEN]> {
    if patch.width().min(patch.height()) < MIN_PATCH_SIDE {
        return Err(Error::TooSmall(format!(
            "feature extraction needs patches of side >= {MIN_PATCH_SIDE}, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    let mut counts = [0u64; FEATURE_LEN];
    accumulate_orientation(patch, delta, &mut counts)?;
    accumulate_orientation(&transpose(patch), delta, &mut counts)?;
    Ok(counts)
}

/// The 162-bin descriptor with the default quantization step.
pub fn extract_feature(patch: &Plane, normalize: bool) -> Result<Feature> {
    extract_feature_with(patch, DEFAULT_DELTA, normalize)
}

pub fn extract_feature_with(patch: &Plane, delta: f64, normalize: bool) -> Result<Feature> {
    let counts = extract_counts(patch, delta)?;
    let f = Feature(counts.map(|c| c as f64));
    Ok(if normalize { f.normalized() } else { f })
}

/// Number of windows per direction block for an `h x w` patch:
/// `(along, across)`, both orientations included.
pub fn window_counts(w: usize, h: usize) -> (usize, usize) {
    let one = |w: usize, h: usize| ((h - 4) * (w - 6), (h - 4) * (w - 4));
    let (a1, c1) = one(w, h);
    let (a2, c2) = one(h, w);
    (a1 + a2, c1 + c2)
}

/// One labelled feature record.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub id: String,
    pub label: usize,
    pub feature: Feature,
}

const FEATURE_HEADER: &str = "# srmnet-features dim=162";

/// Writes records as tab-separated text: a header line declaring the
/// dimension, a column line, then `id, label, v0 .. v161` per record.
pub fn write_features(path: impl AsRef<Path>, records: &[FeatureRecord]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, format_features(records)).map_err(|e| Error::io(path, e))
}

pub fn format_features(records: &[FeatureRecord]) -> String {
    let mut s = String::new();
    s.push_str(FEATURE_HEADER);
    s.push('\n');
    s.push_str("id\tlabel");
    for i in 0..FEATURE_LEN {
        let _ = write!(s, "\tf{i}");
    }
    s.push('\n');
    for r in records {
        let _ = write!(s, "{}\t{}", r.id, r.label);
        for v in r.feature.0 {
            let _ = write!(s, "\t{v}");
        }
        s.push('\n');
    }
    s
}

pub fn read_features(path: impl AsRef<Path>) -> Result<Vec<FeatureRecord>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_features(&text)
}

pub fn parse_features(text: &str) -> Result<Vec<FeatureRecord>> {
    let mut lines = text.lines();
    if lines.next() != Some(FEATURE_HEADER) {
        return Err(Error::format("feature file", "missing `dim=162` header"));
    }
    lines.next();
    lines
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, line)| {
            let mut cols = line.split('\t');
            let id = cols.next().unwrap_or_default().to_string();
            let label = cols
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::format("feature file", format!("bad label on record {i}")))?;
            let values: Vec<f64> = cols
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::format("feature file", format!("record {i}: {e}")))?;
            Ok(FeatureRecord {
                id,
                label,
                feature: Feature::try_from(values.as_slice())?,
            })
        })
        .collect()
}
