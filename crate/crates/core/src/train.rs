//! Relaxed, trainable version of the network.
//!
//! The hardmax becomes a soft-max with sharpness `alpha`, pooling becomes an
//! average over the sites of each branch, and a fully connected layer maps the
//! 162 pooled values to two logits. Every weight is free.
//!
//! Soft-max probabilities below `exp(-SOFTMAX_CUTOFF)` of the winner are
//! treated as exactly zero in the forward and backward passes. They are far
//! below double precision resolution of the pooled sums, and skipping them
//! removes most of the exponentials from the inner loop.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bownet::{correlate_into, BowParams, Branch, ResidualStack};
use crate::descriptor::{BINS, FEATURE_LEN, MIN_PATCH_SIDE, ORDER};
use crate::error::{Error, Result};
use crate::image::{transpose, Plane};

pub const CLASSES: usize = 2;
pub const DEFAULT_ALPHA: f64 = 65536.0;
pub const SOFTMAX_CUTOFF: f64 = 40.0;

/// Fully connected head, `CLASSES x FEATURE_LEN` row-major, applied to the
/// pooled vector after a fixed per-dimension standardization
/// `(h - center) / scale`. The standardization is not trained.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Head {
    pub weights: Vec<f64>,
    pub biases: Vec<f64>,
    pub center: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Head {
    pub fn zeros() -> Self {
        Self {
            weights: vec![0.0; CLASSES * FEATURE_LEN],
            biases: vec![0.0; CLASSES],
            center: vec![0.0; FEATURE_LEN],
            scale: vec![1.0; FEATURE_LEN],
        }
    }

    pub fn with_standardization(mut self, center: &[f64], scale: &[f64]) -> Result<Self> {
        if center.len() != FEATURE_LEN || scale.len() != FEATURE_LEN {
            return Err(Error::ShapeMismatch(
                "standardization needs 162 centers and scales".into(),
            ));
        }
        if scale.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return Err(Error::InvalidParameter(
                "standardization scales must be positive".into(),
            ));
        }
        self.center = center.to_vec();
        self.scale = scale.to_vec();
        Ok(self)
    }

    pub fn standardize(&self, h: &[f64]) -> Vec<f64> {
        h.iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (v - c) / s)
            .collect()
    }

    /// Uniform weights in `[-scale, scale]`, zero biases.
    pub fn random(scale: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut h = Self::zeros();
        for w in &mut h.weights {
            *w = rng.random_range(-scale..=scale);
        }
        h
    }

    /// Head whose manipulated-class probability is `logistic(w.h + b)`.
    pub fn from_linear(weights: &[f64], bias: f64) -> Result<Self> {
        if weights.len() != FEATURE_LEN {
            return Err(Error::ShapeMismatch(format!(
                "linear model has {} weights, head needs {FEATURE_LEN}",
                weights.len()
            )));
        }
        let mut h = Self::zeros();
        for (i, &w) in weights.iter().enumerate() {
            h.weights[i] = -0.5 * w;
            h.weights[FEATURE_LEN + i] = 0.5 * w;
        }
        h.biases = vec![-0.5 * bias, 0.5 * bias];
        Ok(h)
    }

    pub fn logits(&self, h: &[f64]) -> [f64; CLASSES] {
        let z = self.standardize(h);
        let mut out = [0.0; CLASSES];
        for (j, o) in out.iter_mut().enumerate() {
            let row = &self.weights[j * FEATURE_LEN..(j + 1) * FEATURE_LEN];
            *o = row.iter().zip(&z).fold(self.biases[j], |acc, (w, x)| acc + w * x);
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetParams {
    pub delta: f64,
    pub along: Branch,
    pub across: Branch,
    pub head: Head,
    pub alpha: f64,
}

impl NetParams {
    pub fn new(bow: BowParams, head: Head, alpha: f64) -> Result<Self> {
        let p = Self {
            delta: bow.delta,
            along: bow.along,
            across: bow.across,
            head,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    /// Constrained layers with a small random head.
    pub fn initial(bow: BowParams, alpha: f64, seed: u64) -> Result<Self> {
        Self::new(bow, Head::random(0.01, seed), alpha)
    }

    pub fn bow(&self) -> BowParams {
        BowParams {
            delta: self.delta,
            along: self.along.clone(),
            across: self.across.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.alpha
            )));
        }
        for b in [&self.along, &self.across] {
            b.check()?;
            if b.codebook.dim != ORDER {
                return Err(Error::ShapeMismatch(format!(
                    "codewords must have dimension {ORDER}, got {}",
                    b.codebook.dim
                )));
            }
        }
        let h = &self.head;
        if h.weights.len() != CLASSES * FEATURE_LEN
            || h.biases.len() != CLASSES
            || h.center.len() != FEATURE_LEN
            || h.scale.len() != FEATURE_LEN
        {
            return Err(Error::ShapeMismatch(
                "head must be 2 x 162 with 2 biases and 162 scales".into(),
            ));
        }
        if h.center.iter().any(|v| !v.is_finite()) || h.scale.iter().any(|&v| !(v > 0.0 && v.is_finite())) {
            return Err(Error::InvalidParameter(
                "head standardization must be finite and positive".into(),
            ));
        }
        if self.tensors().iter().any(|t| t.iter().any(|v| !v.is_finite())) {
            return Err(Error::InvalidParameter("parameters must be finite".into()));
        }
        Ok(())
    }

    pub fn tensors(&self) -> [&[f64]; TENSORS] {
        [
            &self.along.bank.weights,
            &self.along.bank.biases,
            &self.along.codebook.codewords,
            &self.along.codebook.biases,
            &self.across.bank.weights,
            &self.across.bank.biases,
            &self.across.codebook.codewords,
            &self.across.codebook.biases,
            &self.head.weights,
            &self.head.biases,
        ]
    }

    pub fn tensors_mut(&mut self) -> [&mut Vec<f64>; TENSORS] {
        [
            &mut self.along.bank.weights,
            &mut self.along.bank.biases,
            &mut self.along.codebook.codewords,
            &mut self.along.codebook.biases,
            &mut self.across.bank.weights,
            &mut self.across.bank.biases,
            &mut self.across.codebook.codewords,
            &mut self.across.codebook.biases,
            &mut self.head.weights,
            &mut self.head.biases,
        ]
    }

    fn branch(&self, b: usize) -> &Branch {
        if b == 0 {
            &self.along
        } else {
            &self.across
        }
    }
}

pub const TENSORS: usize = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TensorKind {
    ConvWeights,
    ConvBiases,
    Codewords,
    CodewordBiases,
    FcWeights,
    FcBiases,
}

pub const TENSOR_NAMES: [&str; TENSORS] = [
    "along.conv.weights",
    "along.conv.biases",
    "along.codebook.codewords",
    "along.codebook.biases",
    "across.conv.weights",
    "across.conv.biases",
    "across.codebook.codewords",
    "across.codebook.biases",
    "fc.weights",
    "fc.biases",
];

pub const TENSOR_KINDS: [TensorKind; TENSORS] = [
    TensorKind::ConvWeights,
    TensorKind::ConvBiases,
    TensorKind::Codewords,
    TensorKind::CodewordBiases,
    TensorKind::ConvWeights,
    TensorKind::ConvBiases,
    TensorKind::Codewords,
    TensorKind::CodewordBiases,
    TensorKind::FcWeights,
    TensorKind::FcBiases,
];

/// Gradients, laid out exactly like the trainable tensors of [`NetParams`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub tensors: [Vec<f64>; TENSORS],
}

impl Gradients {
    pub fn zeros_like(p: &NetParams) -> Self {
        Self {
            tensors: p.tensors().map(|t| vec![0.0; t.len()]),
        }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for t in &mut self.tensors {
            for x in t.iter_mut() {
                *x *= s;
            }
        }
    }
}

/// Per-tensor learning rate multipliers. Parameters live in very different
/// units (pixel-domain filter taps next to codeword biases in squared residual
/// units), and Adam steps have the units of the learning rate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LrScale {
    pub conv_weights: f64,
    pub conv_biases: f64,
    pub codewords: f64,
    pub codeword_biases: f64,
    pub fc_weights: f64,
    pub fc_biases: f64,
}

impl Default for LrScale {
    fn default() -> Self {
        Self {
            conv_weights: 1.0,
            conv_biases: 1.0,
            codewords: 1.0,
            codeword_biases: 1.0,
            fc_weights: 1.0,
            fc_biases: 1.0,
        }
    }
}

impl LrScale {
    fn all(&self) -> [f64; 6] {
        [
            self.conv_weights,
            self.conv_biases,
            self.codewords,
            self.codeword_biases,
            self.fc_weights,
            self.fc_biases,
        ]
    }

    pub fn get(&self, kind: TensorKind) -> f64 {
        match kind {
            TensorKind::ConvWeights => self.conv_weights,
            TensorKind::ConvBiases => self.conv_biases,
            TensorKind::Codewords => self.codewords,
            TensorKind::CodewordBiases => self.codeword_biases,
            TensorKind::FcWeights => self.fc_weights,
            TensorKind::FcBiases => self.fc_biases,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Freeze {
    pub conv: bool,
    pub codebook: bool,
    pub head: bool,
}

impl Freeze {
    fn frozen(&self, kind: TensorKind) -> bool {
        match kind {
            TensorKind::ConvWeights | TensorKind::ConvBiases => self.conv,
            TensorKind::Codewords | TensorKind::CodewordBiases => self.codebook,
            TensorKind::FcWeights | TensorKind::FcBiases => self.head,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
    pub lr_scale: LrScale,
    pub freeze: Freeze,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 1e-6,
            weight_decay: 5e-4,
            batch_size: 36,
            epochs: 15,
            seed: 0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
            lr_scale: LrScale::default(),
            freeze: Freeze::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.learning_rate >= 0.0
            && self.weight_decay >= 0.0
            && self.batch_size > 0
            && (0.0..1.0).contains(&self.adam_beta1)
            && (0.0..1.0).contains(&self.adam_beta2)
            && self.adam_epsilon > 0.0
            && self.lr_scale.all().iter().all(|&v| v >= 0.0 && v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidParameter(format!("bad training configuration: {self:?}")))
        }
    }

    fn tensor_lr(&self, kind: TensorKind) -> f64 {
        self.learning_rate * self.lr_scale.get(kind)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub m: Gradients,
    pub v: Gradients,
    pub t: u64,
}

impl AdamState {
    pub fn new(p: &NetParams) -> Self {
        Self {
            m: Gradients::zeros_like(p),
            v: Gradients::zeros_like(p),
            t: 0,
        }
    }
}

/// `exp(alpha m_k) / sum_l exp(alpha m_l)`, shifted by the maximum.
pub fn softmax_layer(scores: &[f64], alpha: f64) -> Vec<f64> {
    let mx = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = scores.iter().map(|&m| (alpha * (m - mx)).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|v| v / z).collect()
}

/// `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &[f64; CLASSES], label: usize) -> f64 {
    let mx = logits[0].max(logits[1]);
    let lse = mx + logits.iter().map(|l| (l - mx).exp()).sum::<f64>().ln();
    lse - logits[label]
}

pub fn class_probabilities(logits: &[f64; CLASSES]) -> [f64; CLASSES] {
    let p = softmax_layer(logits, 1.0);
    [p[0], p[1]]
}

/// Channels padded to a multiple of four; padding scores are `-inf`.
const LANES: usize = BINS.div_ceil(4) * 4;

/// `exp(x)` for `x` in `[-SOFTMAX_CUTOFF - 1, 0]`, branch-free so channel
/// loops vectorize. Range reduction to `|r| <= ln 2 / 2` and a degree-13
/// Taylor polynomial; relative error is within a few ulps.
#[inline(always)]
fn exp_nonpositive(x: f64) -> f64 {
    const SHIFT: f64 = 6_755_399_441_055_744.0; // 1.5 * 2^52
    const LN2_HI: f64 = 6.931_471_803_691_238e-1;
    const LN2_LO: f64 = 1.908_214_929_270_587_7e-10;
    let k = x * std::f64::consts::LOG2_E + SHIFT;
    let n = k - SHIFT;
    let r = (x - n * LN2_HI) - n * LN2_LO;
    let mut p = 1.0 / 6_227_020_800.0;
    p = p * r + 1.0 / 479_001_600.0;
    p = p * r + 1.0 / 39_916_800.0;
    p = p * r + 1.0 / 3_628_800.0;
    p = p * r + 1.0 / 362_880.0;
    p = p * r + 1.0 / 40_320.0;
    p = p * r + 1.0 / 5_040.0;
    p = p * r + 1.0 / 720.0;
    p = p * r + 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    p = p * r + 1.0;
    let e = (k.to_bits() as i64)
        .wrapping_sub(SHIFT.to_bits() as i64)
        .wrapping_add(1023);
    p * f64::from_bits((e << 52) as u64)
}

/// Codebook in structure-of-arrays form for the per-site loops.
struct SoaCodebook {
    c: [[f64; LANES]; ORDER],
    eps: [f64; LANES],
}

impl SoaCodebook {
    fn new(branch: &Branch) -> Self {
        let cb = &branch.codebook;
        let mut out = Self {
            c: [[0.0; LANES]; ORDER],
            eps: [f64::NEG_INFINITY; LANES],
        };
        for k in 0..BINS {
            for n in 0..ORDER {
                out.c[n][k] = cb.codeword(k)[n];
            }
            out.eps[k] = cb.biases[k];
        }
        out
    }

    /// Soft-max probabilities of the channels within the cutoff at one site;
    /// all other channels are exactly zero.
    #[inline(always)]
    #[allow(clippy::needless_range_loop)]
    fn site(&self, r: [f64; ORDER], alpha: f64, act: &mut Active) {
        let mut m = [0.0; LANES];
        for k in 0..LANES {
            m[k] = self.eps[k] + self.c[0][k] * r[0] + self.c[1][k] * r[1] + self.c[2][k] * r[2] + self.c[3][k] * r[3];
        }
        let mut lanes = [f64::NEG_INFINITY; 4];
        for chunk in m.chunks_exact(4) {
            for (l, &v) in lanes.iter_mut().zip(chunk) {
                if v > *l {
                    *l = v;
                }
            }
        }
        let mx = lanes[0].max(lanes[1]).max(lanes[2].max(lanes[3]));
        // branch-free compaction of the surviving channels
        let mut n = 0;
        for (k, &mk) in m.iter().enumerate() {
            let t = alpha * (mk - mx);
            act.idx[n] = k;
            act.p[n] = t;
            n += usize::from(t >= -SOFTMAX_CUTOFF);
        }
        act.len = n;
        let p = &mut act.p[..n];
        for v in p.iter_mut() {
            *v = exp_nonpositive(*v);
        }
        let z: f64 = p.iter().sum();
        let inv = 1.0 / z;
        for v in p.iter_mut() {
            *v *= inv;
        }
    }
}

/// Soft-max weights of one site, restricted to channels above the cutoff.
struct Active {
    len: usize,
    idx: [usize; LANES],
    p: [f64; LANES],
}

impl Active {
    fn new() -> Self {
        Self {
            len: 0,
            idx: [0; LANES],
            p: [0.0; LANES],
        }
    }
}

#[inline]
fn site_vector(stack: &ResidualStack, s: usize) -> [f64; ORDER] {
    std::array::from_fn(|n| stack.channels[n][s])
}

fn conv_forward(input: &Plane, branch: &Branch) -> ResidualStack {
    let bank = &branch.bank;
    let ow = input.width() - bank.cols + 1;
    let oh = input.height() - bank.rows + 1;
    let channels = (0..bank.filters())
        .map(|n| {
            let mut out = vec![bank.biases[n]; ow * oh];
            correlate_into(input, bank.filter(n), bank.rows, bank.cols, &mut out, ow, oh);
            out
        })
        .collect();
    ResidualStack {
        width: ow,
        height: oh,
        channels,
    }
}

/// Surviving channels and their probabilities for every site, in site order.
#[derive(Clone, Debug, Default)]
struct SoftSites {
    /// Site `s` owns entries `start[s]..start[s + 1]`.
    start: Vec<u32>,
    idx: Vec<u8>,
    p: Vec<f64>,
}

impl SoftSites {
    fn site(&self, s: usize) -> (&[u8], &[f64]) {
        let (a, b) = (self.start[s] as usize, self.start[s + 1] as usize);
        (&self.idx[a..b], &self.p[a..b])
    }
}

/// Adds the soft assignments of every site to `pooled`, recording them in
/// `record` when given.
fn soft_pool(stack: &ResidualStack, cb: &SoaCodebook, alpha: f64, pooled: &mut [f64], record: Option<&mut SoftSites>) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        return unsafe { soft_pool_avx2(stack, cb, alpha, pooled, record) };
    }
    soft_pool_body(stack, cb, alpha, pooled, record)
}

// Wider vectors only; no FMA, so results are bit-identical to the fallback.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn soft_pool_avx2(
    stack: &ResidualStack,
    cb: &SoaCodebook,
    alpha: f64,
    pooled: &mut [f64],
    record: Option<&mut SoftSites>,
) {
    soft_pool_body(stack, cb, alpha, pooled, record)
}

#[inline(always)]
fn soft_pool_body(
    stack: &ResidualStack,
    cb: &SoaCodebook,
    alpha: f64,
    pooled: &mut [f64],
    mut record: Option<&mut SoftSites>,
) {
    let mut act = Active::new();
    if let Some(rec) = record.as_deref_mut() {
        rec.start.clear();
        rec.start.reserve(stack.sites() + 1);
        rec.start.push(0);
    }
    for s in 0..stack.sites() {
        cb.site(site_vector(stack, s), alpha, &mut act);
        let (idx, p) = (&act.idx[..act.len], &act.p[..act.len]);
        for (&k, &v) in idx.iter().zip(p) {
            pooled[k] += v;
        }
        if let Some(rec) = record.as_deref_mut() {
            rec.idx.extend(idx.iter().map(|&k| k as u8));
            rec.p.extend_from_slice(p);
            rec.start.push(rec.idx.len() as u32);
        }
    }
}

/// Intermediate values kept by [`forward_train`] for [`backward`].
#[derive(Clone, Debug)]
pub struct ForwardCache {
    params: NetParams,
    inputs: [Plane; 2],
    /// Indexed `orientation * 2 + branch`, branch 0 along and 1 across.
    stacks: Vec<ResidualStack>,
    soft: Vec<SoftSites>,
    /// Total site count of each branch over both orientations.
    sites: [usize; 2],
    pub pooled: Vec<f64>,
    pub logits: [f64; CLASSES],
}

fn check_patch(patch: &Plane) -> Result<()> {
    if patch.width().min(patch.height()) < MIN_PATCH_SIDE {
        return Err(Error::TooSmall(format!(
            "network needs patches of side >= {MIN_PATCH_SIDE}, got {}x{}",
            patch.width(),
            patch.height()
        )));
    }
    Ok(())
}

fn check_input(patch: &Plane, params: &NetParams) -> Result<()> {
    check_patch(patch)?;
    params.validate()?;
    for b in [&params.along, &params.across] {
        if patch.width().min(patch.height()) < b.bank.rows.max(b.bank.cols) {
            return Err(Error::TooSmall("patch is smaller than a kernel".into()));
        }
    }
    Ok(())
}

/// Shared forward pass; with `keep`, retains what backward needs.
fn forward_impl(
    patch: &Plane,
    params: &NetParams,
    keep: bool,
) -> (Vec<f64>, [usize; 2], Vec<ResidualStack>, Vec<SoftSites>) {
    let inputs = [patch.clone(), transpose(patch)];
    let cbs = [SoaCodebook::new(&params.along), SoaCodebook::new(&params.across)];
    let mut pooled = vec![0.0; FEATURE_LEN];
    let mut stacks = Vec::new();
    let mut soft = Vec::new();
    let mut sites = [0usize; 2];
    for input in &inputs {
        for (b, cb) in cbs.iter().enumerate() {
            let stack = conv_forward(input, params.branch(b));
            let h = &mut pooled[b * BINS..(b + 1) * BINS];
            sites[b] += stack.sites();
            if keep {
                let mut rec = SoftSites::default();
                soft_pool(&stack, cb, params.alpha, h, Some(&mut rec));
                stacks.push(stack);
                soft.push(rec);
            } else {
                soft_pool(&stack, cb, params.alpha, h, None);
            }
        }
    }
    for (b, &n) in sites.iter().enumerate() {
        for h in &mut pooled[b * BINS..(b + 1) * BINS] {
            *h /= n as f64;
        }
    }
    (pooled, sites, stacks, soft)
}

/// Soft-pooled, site-averaged 162-vector (along bins then across bins).
pub fn soft_feature(patch: &Plane, params: &NetParams) -> Result<Vec<f64>> {
    check_input(patch, params)?;
    Ok(forward_impl(patch, params, false).0)
}

/// Logits without keeping anything for backward.
pub fn forward_logits(patch: &Plane, params: &NetParams) -> Result<[f64; CLASSES]> {
    Ok(params.head.logits(&soft_feature(patch, params)?))
}

pub fn forward_train(patch: &Plane, params: &NetParams) -> Result<([f64; CLASSES], ForwardCache)> {
    check_input(patch, params)?;
    let (pooled, sites, stacks, soft) = forward_impl(patch, params, true);
    let logits = params.head.logits(&pooled);
    Ok((
        logits,
        ForwardCache {
            params: params.clone(),
            inputs: [patch.clone(), transpose(patch)],
            stacks,
            soft,
            sites,
            pooled,
            logits,
        },
    ))
}

/// Gradient of `cross_entropy(logits, label)` with respect to every trainable
/// tensor. `params` must be the parameters the cache was computed with.
pub fn backward(cache: &ForwardCache, label: usize, params: &NetParams) -> Result<Gradients> {
    if *params != cache.params {
        return Err(Error::StaleCache);
    }
    if label >= CLASSES {
        return Err(Error::InvalidParameter(format!("label {label} is not binary")));
    }
    let mut g = Gradients::zeros_like(params);
    let prob = class_probabilities(&cache.logits);
    let dlogits: [f64; CLASSES] = std::array::from_fn(|j| prob[j] - if j == label { 1.0 } else { 0.0 });

    let z = params.head.standardize(&cache.pooled);
    let mut dh = vec![0.0; FEATURE_LEN];
    for (j, &d) in dlogits.iter().enumerate() {
        for i in 0..FEATURE_LEN {
            g.tensors[8][j * FEATURE_LEN + i] = d * z[i];
            dh[i] += params.head.weights[j * FEATURE_LEN + i] * d;
        }
        g.tensors[9][j] = d;
    }
    for (d, s) in dh.iter_mut().zip(&params.head.scale) {
        *d /= s;
    }

    let cbs = [SoaCodebook::new(&params.along), SoaCodebook::new(&params.across)];
    for (idx, stack) in cache.stacks.iter().enumerate() {
        let b = idx % 2;
        let input = &cache.inputs[idx / 2];
        let n = cache.sites[b] as f64;
        let gk: Vec<f64> = dh[b * BINS..(b + 1) * BINS].iter().map(|v| v / n).collect();
        let base = 4 * b;
        let (dconv_w, rest) = g.tensors[base..base + 4].split_at_mut(1);
        let (dconv_b, rest) = rest.split_at_mut(1);
        let (dcw, dcb) = rest.split_at_mut(1);
        let dr = codebook_backward(
            stack,
            &cache.soft[idx],
            &cbs[b],
            params.alpha,
            &gk,
            &mut dcw[0],
            &mut dcb[0],
        );
        conv_backward(input, params.branch(b), stack, &dr, &mut dconv_w[0], &mut dconv_b[0]);
    }
    Ok(g)
}

/// Back-propagates pooled gradients `gk` through soft-max and matching
/// scores; accumulates codebook gradients and returns residual gradients.
fn codebook_backward(
    stack: &ResidualStack,
    soft: &SoftSites,
    cb: &SoaCodebook,
    alpha: f64,
    gk: &[f64],
    dcw: &mut [f64],
    dcb: &mut [f64],
) -> [Vec<f64>; ORDER] {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: the feature was detected at run time.
        return unsafe { codebook_backward_avx2(stack, soft, cb, alpha, gk, dcw, dcb) };
    }
    codebook_backward_body(stack, soft, cb, alpha, gk, dcw, dcb)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
fn codebook_backward_avx2(
    stack: &ResidualStack,
    soft: &SoftSites,
    cb: &SoaCodebook,
    alpha: f64,
    gk: &[f64],
    dcw: &mut [f64],
    dcb: &mut [f64],
) -> [Vec<f64>; ORDER] {
    codebook_backward_body(stack, soft, cb, alpha, gk, dcw, dcb)
}

#[inline(always)]
#[allow(clippy::needless_range_loop)]
fn codebook_backward_body(
    stack: &ResidualStack,
    soft: &SoftSites,
    cb: &SoaCodebook,
    alpha: f64,
    gk: &[f64],
    dcw: &mut [f64],
    dcb: &mut [f64],
) -> [Vec<f64>; ORDER] {
    let sites = stack.sites();
    let mut dr: [Vec<f64>; ORDER] = std::array::from_fn(|_| vec![0.0; sites]);
    let mut dm = [0.0; LANES];
    for s in 0..sites {
        let (idx, p) = soft.site(s);
        let n = idx.len();
        if n == 1 {
            // a single surviving channel has probability 1 and no gradient
            continue;
        }
        let r = site_vector(stack, s);
        let mean_g: f64 = idx.iter().zip(p).map(|(&k, &pk)| pk * gk[k as usize]).sum();
        let mut drs = [0.0; ORDER];
        for i in 0..n {
            let k = idx[i] as usize;
            let d = alpha * p[i] * (gk[k] - mean_g);
            dm[i] = d;
            dcb[k] += d;
            for (j, v) in drs.iter_mut().enumerate() {
                *v += d * cb.c[j][k];
            }
        }
        let w = &mut dcw[..BINS * ORDER];
        for i in 0..n {
            let k = idx[i] as usize;
            for j in 0..ORDER {
                w[k * ORDER + j] += dm[i] * r[j];
            }
        }
        for j in 0..ORDER {
            dr[j][s] = drs[j];
        }
    }
    dr
}

fn conv_backward(
    input: &Plane,
    branch: &Branch,
    stack: &ResidualStack,
    dr: &[Vec<f64>; ORDER],
    dw: &mut [f64],
    db: &mut [f64],
) {
    let bank = &branch.bank;
    let (ow, oh) = (stack.width, stack.height);
    for n in 0..bank.filters() {
        db[n] += dr[n].iter().sum::<f64>();
        for i in 0..bank.rows {
            for j in 0..bank.cols {
                let mut acc = 0.0;
                for y in 0..oh {
                    let src = &input.row(y + i)[j..j + ow];
                    let d = &dr[n][y * ow..(y + 1) * ow];
                    acc += d.iter().zip(src).map(|(a, b)| a * b).sum::<f64>();
                }
                dw[(n * bank.rows + i) * bank.cols + j] += acc;
            }
        }
    }
}

/// One Adam update with `weight_decay * theta` added to each gradient.
pub fn adam_step(params: &mut NetParams, grads: &Gradients, state: &mut AdamState, cfg: &TrainConfig) -> Result<()> {
    let shapes_agree = params
        .tensors()
        .iter()
        .zip(&grads.tensors)
        .zip(state.m.tensors.iter().zip(&state.v.tensors))
        .all(|((p, g), (m, v))| p.len() == g.len() && p.len() == m.len() && p.len() == v.len());
    if !shapes_agree {
        return Err(Error::ShapeMismatch(
            "gradients or optimizer state do not match parameters".into(),
        ));
    }
    state.t += 1;
    let t = state.t as i32;
    let (b1, b2) = (cfg.adam_beta1, cfg.adam_beta2);
    let c1 = 1.0 - b1.powi(t);
    let c2 = 1.0 - b2.powi(t);
    for (ti, theta) in params.tensors_mut().into_iter().enumerate() {
        let kind = TENSOR_KINDS[ti];
        if cfg.freeze.frozen(kind) {
            continue;
        }
        let lr = cfg.tensor_lr(kind);
        let g = &grads.tensors[ti];
        let m = &mut state.m.tensors[ti];
        let v = &mut state.v.tensors[ti];
        for i in 0..theta.len() {
            let gi = g[i] + cfg.weight_decay * theta[i];
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            v[i] = b2 * v[i] + (1.0 - b2) * gi * gi;
            let mh = m[i] / c1;
            let vh = v[i] / c2;
            theta[i] -= lr * mh / (vh.sqrt() + cfg.adam_epsilon);
        }
    }
    Ok(())
}

/// Loss and gradient of one labelled patch.
pub fn sample_gradient(patch: &Plane, label: usize, params: &NetParams) -> Result<(f64, Gradients)> {
    let (logits, cache) = forward_train(patch, params)?;
    let g = backward(&cache, label, params)?;
    Ok((cross_entropy(&logits, label), g))
}

/// Mini-batch Adam training. Per-sample gradients may be computed in
/// parallel; they are always reduced in batch order, so the result does not
/// depend on the thread count.
pub fn train(
    patches: &[Plane],
    labels: &[usize],
    cfg: &TrainConfig,
    init: NetParams,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<(NetParams, Vec<f64>)> {
    cfg.validate()?;
    init.validate()?;
    if patches.is_empty() {
        return Err(Error::Dataset("training set is empty".into()));
    }
    if patches.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} patches with {} labels",
            patches.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().find(|&&l| l >= CLASSES) {
        return Err(Error::Dataset(format!("label {l} is not binary")));
    }
    let mut params = init;
    let mut state = AdamState::new(&params);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..patches.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let per_sample = batch
                .par_iter()
                .map(|&i| sample_gradient(&patches[i], labels[i], &params))
                .collect::<Result<Vec<_>>>()?;
            let mut grad = Gradients::zeros_like(&params);
            for (loss, g) in &per_sample {
                epoch_loss += loss;
                grad.add_assign(g);
            }
            grad.scale(1.0 / batch.len() as f64);
            adam_step(&mut params, &grad, &mut state, cfg)?;
        }
        let mean = epoch_loss / patches.len() as f64;
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok((params, history))
}

pub fn predict_proba(patch: &Plane, params: &NetParams) -> Result<f64> {
    Ok(class_probabilities(&forward_logits(patch, params)?)[1])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bownet::{build_constrained_params, forward_hardmax};

    fn random_patch(w: usize, h: usize, max: u32, rng: &mut ChaCha8Rng) -> Plane {
        Plane::from_fn(w, h, |_, _| rng.random_range(0..max) as f64)
    }

    fn constrained(alpha: f64) -> NetParams {
        NetParams::initial(build_constrained_params(4.5).unwrap(), alpha, 1).unwrap()
    }

    /// Constrained parameters plus noise on every tensor, with a soft alpha.
    fn perturbed(rng: &mut ChaCha8Rng) -> NetParams {
        let mut p = constrained(rng.random_range(0.005..0.05));
        for t in p.tensors_mut() {
            for v in t.iter_mut() {
                *v += rng.random_range(-0.3..0.3);
            }
        }
        let center: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random_range(-0.1..0.1)).collect();
        let scale: Vec<f64> = (0..FEATURE_LEN).map(|_| rng.random_range(0.5..2.0)).collect();
        p.head = p.head.with_standardization(&center, &scale).unwrap();
        p
    }

    #[test]
    fn fast_exp_matches_std() {
        assert_eq!(exp_nonpositive(0.0), 1.0);
        let mut worst: f64 = 0.0;
        for i in 0..=200_000 {
            let x = -(SOFTMAX_CUTOFF + 1.0) * i as f64 / 200_000.0;
            let rel = (exp_nonpositive(x) - x.exp()).abs() / x.exp();
            worst = worst.max(rel);
        }
        assert!(worst < 1e-15, "{worst}");
    }

    #[test]
    fn softmax_examples() {
        let p = softmax_layer(&[2.5; 81], 65536.0);
        assert!(p.iter().all(|&v| (v - 1.0 / 81.0).abs() < 1e-15));
        let mut s = vec![0.0; 81];
        s[17] = 0.001;
        let p = softmax_layer(&s, 65536.0);
        assert!(p[17] > 1.0 - 1e-6);
        // the max channel's share at a gap g over 80 rivals is 1 / (1 + 80 e^{-alpha g})
        let expected = 1.0 / (1.0 + 80.0 * (-65.536f64).exp());
        assert!((p[17] - expected).abs() < 1e-15);
    }

    #[test]
    fn softmax_sum_and_shift_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let s: Vec<f64> = (0..81).map(|_| rng.random_range(-5.0..5.0)).collect();
            let alpha = rng.random_range(0.1..10.0);
            let p = softmax_layer(&s, alpha);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let shifted: Vec<f64> = s.iter().map(|v| v + 3.25).collect();
            let q = softmax_layer(&shifted, alpha);
            for (a, b) in p.iter().zip(&q) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn cross_entropy_examples() {
        assert!((cross_entropy(&[0.0, 0.0], 0) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!((cross_entropy(&[0.0, 0.0], 1) - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(cross_entropy(&[20.0, -20.0], 0) < 1e-16);
        assert!((cross_entropy(&[20.0, -20.0], 1) - 40.0).abs() < 1e-12);
        assert!(cross_entropy(&[1e4, -1e4], 1).is_finite());
    }

    #[test]
    fn zero_head_gives_bias_logits() {
        let mut p = constrained(1.0);
        p.head.weights.iter_mut().for_each(|w| *w = 0.0);
        p.head.biases = vec![0.3, -1.7];
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..3 {
            let (l, _) = forward_train(&random_patch(16, 16, 256, &mut rng), &p).unwrap();
            assert_eq!(l, [0.3, -1.7]);
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let patch = random_patch(20, 18, 64, &mut rng);
        let p = perturbed(&mut rng);
        let (a, ca) = forward_train(&patch, &p).unwrap();
        let (b, cb) = forward_train(&patch, &p).unwrap();
        assert_eq!(a, b);
        assert_eq!(ca.pooled, cb.pooled);
    }

    #[test]
    fn sharp_softmax_matches_hardmax_counts() {
        let p = constrained(65536.0);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..5 {
            let patch = random_patch(32, 32, 256, &mut rng);
            let soft = soft_feature(&patch, &p).unwrap();
            let hard = forward_hardmax(&patch, &p.bow()).unwrap();
            let (na, nc) = crate::descriptor::window_counts(32, 32);
            for k in 0..BINS {
                assert!((soft[k] * na as f64 - hard.0[k]).abs() < 1e-6);
                assert!((soft[BINS + k] * nc as f64 - hard.0[BINS + k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn soft_gap_shrinks_with_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let patch = random_patch(24, 24, 24, &mut rng);
        let hard = forward_hardmax(&patch, &build_constrained_params(4.5).unwrap())
            .unwrap()
            .normalized();
        let mut last = f64::INFINITY;
        for e in [0, 2, 4, 8, 12, 16] {
            let soft = soft_feature(&patch, &constrained(2f64.powi(e))).unwrap();
            let gap = soft
                .iter()
                .zip(hard.as_slice())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(gap <= last, "gap grew at alpha 2^{e}: {gap} > {last}");
            last = gap;
        }
        assert!(last < 1e-12);
    }

    fn finite_difference_check(p: &NetParams, patch: &Plane, label: usize) -> f64 {
        let (_, cache) = forward_train(patch, p).unwrap();
        let g = backward(&cache, label, p).unwrap();
        let loss = |q: &NetParams| cross_entropy(&forward_train(patch, q).unwrap().0, label);
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for t in 0..TENSORS {
            for i in 0..p.tensors()[t].len() {
                let mut plus = p.clone();
                plus.tensors_mut()[t][i] += h;
                let mut minus = p.clone();
                minus.tensors_mut()[t][i] -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let analytic = g.tensors[t][i];
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-5);
                worst = worst.max(rel);
            }
        }
        worst
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..3 {
            let p = perturbed(&mut rng);
            let patch = random_patch(12, 12, 32, &mut rng);
            let worst = finite_difference_check(&p, &patch, rng.random_range(0..2));
            assert!(worst < 1e-4, "relative error {worst}");
        }
    }

    #[test]
    fn fc_bias_gradient_closed_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let p = perturbed(&mut rng);
        let patch = random_patch(16, 16, 40, &mut rng);
        let (logits, cache) = forward_train(&patch, &p).unwrap();
        let g = backward(&cache, 1, &p).unwrap();
        let prob = class_probabilities(&logits);
        assert_eq!(g.tensors[9], vec![prob[0], prob[1] - 1.0]);
    }

    #[test]
    fn zero_patch_bias_gradients_are_reproducible() {
        let p = constrained(1.0);
        let zero = Plane::filled(16, 16, 0.0);
        let run = || {
            let (_, c) = forward_train(&zero, &p).unwrap();
            backward(&c, 1, &p).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a, b);
        assert!(a.tensors[1].iter().chain(&a.tensors[5]).all(|v| v.is_finite()));
    }

    #[test]
    fn stale_cache_is_rejected() {
        let p = constrained(1.0);
        let (_, cache) = forward_train(&Plane::filled(16, 16, 9.0), &p).unwrap();
        let mut q = p.clone();
        q.head.biases[0] += 1.0;
        assert!(matches!(backward(&cache, 0, &q), Err(Error::StaleCache)));
        assert!(backward(&cache, 2, &p).is_err());
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let mut p = constrained(1.0);
        let before = p.clone();
        let mut st = AdamState::new(&p);
        let cfg = TrainConfig {
            weight_decay: 0.0,
            ..TrainConfig::default()
        };
        adam_step(&mut p, &Gradients::zeros_like(&before), &mut st, &cfg).unwrap();
        assert_eq!(p, before);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_is_sign_times_lr() {
        let mut p = constrained(1.0);
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        g.tensors[9] = vec![0.37, -120.0];
        let cfg = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 1e-3,
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert!((p.head.biases[0] - before.head.biases[0] + 1e-3).abs() < 1e-10);
        assert!((p.head.biases[1] - before.head.biases[1] - 1e-3).abs() < 1e-10);
        let mut bad = Gradients::zeros_like(&p);
        bad.tensors[3].pop();
        assert!(matches!(
            adam_step(&mut p, &bad, &mut st, &cfg),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn adam_respects_freeze_and_unit_scale() {
        let mut p = constrained(1.0);
        let before = p.clone();
        let mut g = Gradients::zeros_like(&p);
        for t in g.tensors.iter_mut() {
            t.iter_mut().for_each(|v| *v = 1.0);
        }
        let cfg = TrainConfig {
            weight_decay: 0.0,
            learning_rate: 1e-3,
            lr_scale: LrScale {
                codewords: 10.0,
                codeword_biases: 100.0,
                ..LrScale::default()
            },
            freeze: Freeze {
                conv: true,
                ..Freeze::default()
            },
            ..TrainConfig::default()
        };
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &g, &mut st, &cfg).unwrap();
        assert_eq!(p.along.bank, before.along.bank);
        assert_eq!(p.across.bank, before.across.bank);
        let step = |a: f64, b: f64| b - a;
        assert!((step(p.along.codebook.codewords[0], before.along.codebook.codewords[0]) - 1e-2).abs() < 1e-9);
        assert!((step(p.along.codebook.biases[0], before.along.codebook.biases[0]) - 1e-1).abs() < 1e-8);
        assert!((step(p.head.weights[0], before.head.weights[0]) - 1e-3).abs() < 1e-10);
    }

    fn toy_set() -> (Vec<Plane>, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let smooth = |rng: &mut ChaCha8Rng| {
            let a = rng.random_range(50.0..200.0);
            Plane::from_fn(16, 16, |x, y| a + (x + y) as f64)
        };
        let noisy = |rng: &mut ChaCha8Rng| random_patch(16, 16, 256, rng);
        let patches = vec![smooth(&mut rng), noisy(&mut rng), smooth(&mut rng), noisy(&mut rng)];
        (patches, vec![0, 1, 0, 1])
    }

    #[test]
    fn overfits_four_patches() {
        let (patches, labels) = toy_set();
        // filter taps see raw intensities, so they get a smaller step
        let cfg = TrainConfig {
            learning_rate: 0.03,
            epochs: 200,
            seed: 4,
            lr_scale: LrScale {
                conv_weights: 0.01,
                ..LrScale::default()
            },
            ..TrainConfig::default()
        };
        let init = constrained(0.1);
        let (_, hist) = train(&patches, &labels, &cfg, init, |_, _| {}).unwrap();
        assert_eq!(hist.len(), 200);
        assert!(*hist.last().unwrap() < 0.01, "final loss {}", hist.last().unwrap());
    }

    #[test]
    fn training_is_deterministic() {
        let (patches, labels) = toy_set();
        let cfg = TrainConfig {
            learning_rate: 1e-2,
            epochs: 3,
            batch_size: 3,
            seed: 8,
            ..TrainConfig::default()
        };
        let run = || train(&patches, &labels, &cfg, constrained(0.5), |_, _| {}).unwrap();
        assert_eq!(run(), run());
    }

    #[test]
    fn train_rejects_bad_data() {
        let cfg = TrainConfig::default();
        assert!(train(&[], &[], &cfg, constrained(1.0), |_, _| {}).is_err());
        let (patches, _) = toy_set();
        assert!(train(&patches, &[0, 1, 2, 0], &cfg, constrained(1.0), |_, _| {}).is_err());
    }

    #[test]
    fn linear_head_reproduces_logistic() {
        let w: Vec<f64> = (0..FEATURE_LEN).map(|i| (i as f64 * 0.37).sin()).collect();
        let head = Head::from_linear(&w, 0.4).unwrap();
        let h: Vec<f64> = (0..FEATURE_LEN).map(|i| (i as f64 * 0.11).cos()).collect();
        let score = w.iter().zip(&h).map(|(a, b)| a * b).sum::<f64>() + 0.4;
        let p = class_probabilities(&head.logits(&h))[1];
        assert!((p - 1.0 / (1.0 + (-score).exp())).abs() < 1e-12);
    }
}
