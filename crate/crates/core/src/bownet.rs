//! The descriptor recast as a constrained convolutional network.
//!
//! Each half of the 162-bin feature is produced by one branch:
//!
//! 1. a bank of 4 linear filters whose outputs at a site form the vector of
//!    four neighboring residuals,
//! 2. 81 `1x1x4` filters computing matching scores `<r, c_k> + eps_k`,
//! 3. a hardmax selecting the best codeword per site,
//! 4. sum pooling over all sites.
//!
//! The across branch uses `5x5` kernels with the taps `[1, -3, 3, -1]` on row
//! `n` of filter `n`. The along branch needs four horizontally shifted
//! residuals, which span 7 columns, so its kernels are `5x7` with the taps on
//! row 0 starting at column `n`. Both branches run on the patch and on its
//! transpose, and share the `(H - 4)`-row output grid.
//!
//! With [`build_constrained_params`] the network output equals
//! [`crate::descriptor::extract_feature`] count for count.

use serde::{Deserialize, Serialize};

use crate::descriptor::{decode_index, Feature, BINS, DEFAULT_DELTA, ORDER, RESIDUAL_TAPS};
use crate::error::{Error, Result};
use crate::image::{transpose, Plane};

/// Bank of linear filters, stored filter-major then row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvBank {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
}

impl ConvBank {
    pub fn zeros(filters: usize, rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            weights: vec![0.0; filters * rows * cols],
            biases: vec![0.0; filters],
        }
    }

    pub fn filters(&self) -> usize {
        self.biases.len()
    }

    pub fn filter(&self, n: usize) -> &[f64] {
        let len = self.rows * self.cols;
        &self.weights[n * len..(n + 1) * len]
    }

    #[inline]
    pub fn weight(&self, n: usize, i: usize, j: usize) -> f64 {
        self.weights[(n * self.rows + i) * self.cols + j]
    }

    fn weight_mut(&mut self, n: usize, i: usize, j: usize) -> &mut f64 {
        &mut self.weights[(n * self.rows + i) * self.cols + j]
    }

    /// Hard-wired residual filters for one branch.
    pub fn constrained(branch: BranchKind) -> Self {
        let mut bank = match branch {
            BranchKind::Across => ConvBank::zeros(ORDER, 5, 5),
            BranchKind::Along => ConvBank::zeros(ORDER, 5, 7),
        };
        for n in 0..ORDER {
            for (j, &t) in RESIDUAL_TAPS.iter().enumerate() {
                match branch {
                    BranchKind::Across => *bank.weight_mut(n, n, j) = t,
                    BranchKind::Along => *bank.weight_mut(n, 0, n + j) = t,
                }
            }
        }
        bank
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.rows == 0 || self.cols == 0 || self.weights.len() != self.filters() * self.rows * self.cols {
            return Err(Error::ShapeMismatch(format!(
                "conv bank with {} weights for {} filters of {}x{}",
                self.weights.len(),
                self.filters(),
                self.rows,
                self.cols
            )));
        }
        Ok(())
    }
}

/// Codewords (row-major `K x dim`) with one bias per codeword.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Codebook {
    pub dim: usize,
    pub codewords: Vec<f64>,
    pub biases: Vec<f64>,
}

impl Codebook {
    /// Codebook whose biases make score maximization equal to
    /// minimum-distance quantization: `eps_k = -|c_k|^2 / 2`.
    pub fn with_matched_biases(dim: usize, codewords: Vec<f64>) -> Result<Self> {
        if dim == 0 || !codewords.len().is_multiple_of(dim) {
            return Err(Error::ShapeMismatch(format!(
                "{} codeword values do not split into vectors of {dim}",
                codewords.len()
            )));
        }
        let biases = codewords
            .chunks_exact(dim)
            .map(|c| -0.5 * c.iter().map(|v| v * v).sum::<f64>())
            .collect();
        Ok(Self { dim, codewords, biases })
    }

    /// The product lattice `{-delta, 0, delta}^4`, row `k` holding the digits
    /// of code `k`.
    pub fn constrained(delta: f64) -> Self {
        let codewords = (0..BINS)
            .flat_map(|k| decode_index(k).map(|d| d as f64 * delta))
            .collect();
        Self::with_matched_biases(ORDER, codewords).expect("lattice has 81 x 4 entries")
    }

    pub fn len(&self) -> usize {
        self.biases.len()
    }

    pub fn is_empty(&self) -> bool {
        self.biases.is_empty()
    }

    pub fn codeword(&self, k: usize) -> &[f64] {
        &self.codewords[k * self.dim..(k + 1) * self.dim]
    }

    pub(crate) fn check(&self) -> Result<()> {
        if self.dim == 0 || self.codewords.len() != self.len() * self.dim {
            return Err(Error::ShapeMismatch(format!(
                "codebook with {} values for {} codewords of dimension {}",
                self.codewords.len(),
                self.len(),
                self.dim
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum BranchKind {
    Along,
    Across,
}

/// Filter bank plus codebook: one half of the feature.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub bank: ConvBank,
    pub codebook: Codebook,
}

impl Branch {
    pub fn constrained(kind: BranchKind, delta: f64) -> Self {
        Self {
            bank: ConvBank::constrained(kind),
            codebook: Codebook::constrained(delta),
        }
    }

    pub(crate) fn check(&self) -> Result<()> {
        self.bank.check()?;
        self.codebook.check()?;
        if self.bank.filters() != self.codebook.dim {
            return Err(Error::ShapeMismatch(format!(
                "{} filters feed codewords of dimension {}",
                self.bank.filters(),
                self.codebook.dim
            )));
        }
        if self.codebook.len() != BINS {
            return Err(Error::ShapeMismatch(format!(
                "branch needs {BINS} codewords, got {}",
                self.codebook.len()
            )));
        }
        Ok(())
    }
}

/// Parameters of the constrained network.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BowParams {
    pub delta: f64,
    pub along: Branch,
    pub across: Branch,
}

impl BowParams {
    pub fn branch(&self, kind: BranchKind) -> &Branch {
        match kind {
            BranchKind::Along => &self.along,
            BranchKind::Across => &self.across,
        }
    }
}

impl Default for BowParams {
    fn default() -> Self {
        build_constrained_params(DEFAULT_DELTA).expect("default step is positive")
    }
}

pub fn build_constrained_params(delta: f64) -> Result<BowParams> {
    if !(delta > 0.0 && delta.is_finite()) {
        return Err(Error::InvalidParameter(format!(
            "quantization step must be positive, got {delta}"
        )));
    }
    Ok(BowParams {
        delta,
        along: Branch::constrained(BranchKind::Along, delta),
        across: Branch::constrained(BranchKind::Across, delta),
    })
}

/// Filter outputs on the valid grid, one map per filter.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualStack {
    pub width: usize,
    pub height: usize,
    pub channels: Vec<Vec<f64>>,
}

impl ResidualStack {
    pub fn sites(&self) -> usize {
        self.width * self.height
    }

    pub fn vector(&self, site: usize) -> Vec<f64> {
        self.channels.iter().map(|c| c[site]).collect()
    }
}

/// Valid-support correlation of `input` with every filter of `bank`.
/// Output site `(y, x)` reads the window whose top-left corner is `(y, x)`.
pub fn conv_bank(input: &Plane, bank: &ConvBank) -> Result<ResidualStack> {
    bank.check()?;
    if input.width() < bank.cols || input.height() < bank.rows {
        return Err(Error::TooSmall(format!(
            "{}x{} input is smaller than the {}x{} kernel",
            input.width(),
            input.height(),
            bank.rows,
            bank.cols
        )));
    }
    let ow = input.width() - bank.cols + 1;
    let oh = input.height() - bank.rows + 1;
    let channels = (0..bank.filters())
        .map(|n| {
            let mut out = vec![bank.biases[n]; ow * oh];
            correlate_into(input, bank.filter(n), bank.rows, bank.cols, &mut out, ow, oh);
            out
        })
        .collect();
    Ok(ResidualStack {
        width: ow,
        height: oh,
        channels,
    })
}

/// `out[y][x] += sum_ij w[i][j] in[y+i][x+j]`, taps visited in row-major order.
pub(crate) fn correlate_into(
    input: &Plane,
    kernel: &[f64],
    rows: usize,
    cols: usize,
    out: &mut [f64],
    ow: usize,
    oh: usize,
) {
    for i in 0..rows {
        for j in 0..cols {
            let w = kernel[i * cols + j];
            if w == 0.0 {
                continue;
            }
            for y in 0..oh {
                let src = &input.row(y + i)[j..j + ow];
                let dst = &mut out[y * ow..(y + 1) * ow];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += w * s;
                }
            }
        }
    }
}

/// Per-site scores for every codeword, site-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f64>,
}

impl ScoreMap {
    pub fn sites(&self) -> usize {
        self.width * self.height
    }

    pub fn site(&self, s: usize) -> &[f64] {
        &self.data[s * self.channels..(s + 1) * self.channels]
    }
}

/// `m[k][s] = <r_s, c_k> + eps_k`.
pub fn matching_scores(residuals: &ResidualStack, cb: &Codebook) -> Result<ScoreMap> {
    cb.check()?;
    if residuals.channels.len() != cb.dim {
        return Err(Error::ShapeMismatch(format!(
            "{} residual channels for codewords of dimension {}",
            residuals.channels.len(),
            cb.dim
        )));
    }
    let sites = residuals.sites();
    let k = cb.len();
    let mut data = Vec::with_capacity(sites * k);
    let mut r = vec![0.0; cb.dim];
    for s in 0..sites {
        for (n, v) in r.iter_mut().enumerate() {
            *v = residuals.channels[n][s];
        }
        data.extend((0..k).map(|i| {
            cb.codeword(i)
                .iter()
                .zip(&r)
                .fold(cb.biases[i], |acc, (c, x)| acc + c * x)
        }));
    }
    Ok(ScoreMap {
        width: residuals.width,
        height: residuals.height,
        channels: k,
        data,
    })
}

/// One-hot map stored as the winning channel of each site.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OneHotMap {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub winners: Vec<usize>,
}

impl OneHotMap {
    pub fn value(&self, site: usize, k: usize) -> f64 {
        if self.winners[site] == k {
            1.0
        } else {
            0.0
        }
    }
}

/// Index of the largest value, lowest index on ties.
#[inline]
pub fn argmax_first(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

pub fn hardmax(scores: &ScoreMap) -> OneHotMap {
    OneHotMap {
        width: scores.width,
        height: scores.height,
        channels: scores.channels,
        winners: (0..scores.sites()).map(|s| argmax_first(scores.site(s))).collect(),
    }
}

/// Sum pooling: `h_k = sum_s p[k][s]`.
pub fn pool_histogram(onehot: &OneHotMap) -> Vec<f64> {
    let mut h = vec![0.0; onehot.channels];
    for &w in &onehot.winners {
        h[w] += 1.0;
    }
    h
}

fn branch_histogram(input: &Plane, branch: &Branch) -> Result<Vec<f64>> {
    let stack = conv_bank(input, &branch.bank)?;
    Ok(pool_histogram(&hardmax(&matching_scores(&stack, &branch.codebook)?)))
}

/// Hardmax network on a patch and its transpose, sum pooled, ordered as the
/// descriptor (along bins then across bins).
pub fn forward_hardmax(patch: &Plane, params: &BowParams) -> Result<Feature> {
    if patch.width().min(patch.height()) < crate::descriptor::MIN_PATCH_SIDE {
        return Err(Error::TooSmall(format!(
            "network needs patches of side >= 8, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    params.along.check()?;
    params.across.check()?;
    let mut f = Feature::zeros();
    for input in [patch.clone(), transpose(patch)] {
        let along = branch_histogram(&input, &params.along)?;
        let across = branch_histogram(&input, &params.across)?;
        for k in 0..BINS {
            f.0[k] += along[k];
            f.0[BINS + k] += across[k];
        }
    }
    Ok(f)
}
