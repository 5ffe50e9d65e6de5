//! Linear SVM trained by stochastic subgradient descent on the hinge loss,
//! plus a one-vs-rest wrapper for several classes.
//!
//! Inputs are standardized per dimension with train-set statistics. The
//! trained hyperplane is stored both in standardized form and folded back
//! into input space, so [`LinearModel::score`] is an affine function of the
//! raw feature.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const STD_FLOOR: f64 = 1e-8;
const MODEL_FORMAT: &str = "srmnet-linear-svm";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[&[f64]]) -> Result<Self> {
        let dim = check_rows(rows)?;
        let n = rows.len() as f64;
        let mut mean = vec![0.0; dim];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r.iter()) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; dim];
        for r in rows {
            for ((s, v), m) in var.iter_mut().zip(r.iter()).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let std = var.into_iter().map(|s| (s / n).sqrt().max(STD_FLOOR)).collect();
        Ok(Self { mean, std })
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(self.mean.iter().zip(&self.std))
            .map(|(v, (m, s))| (v - m) / s)
            .collect()
    }
}

fn check_rows(rows: &[&[f64]]) -> Result<usize> {
    let dim = rows
        .first()
        .map(|r| r.len())
        .ok_or_else(|| Error::Dataset("no training examples".into()))?;
    if dim == 0 {
        return Err(Error::ShapeMismatch("features have no dimensions".into()));
    }
    if let Some(r) = rows.iter().find(|r| r.len() != dim) {
        return Err(Error::ShapeMismatch(format!(
            "feature of length {} among length {dim}",
            r.len()
        )));
    }
    if rows.iter().any(|r| r.iter().any(|v| !v.is_finite())) {
        return Err(Error::InvalidParameter("features must be finite".into()));
    }
    Ok(dim)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SvmConfig {
    pub lambda: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Step size at the first update; later steps follow `1 / (lambda (t + t0))`.
    pub initial_step: f64,
}

impl Default for SvmConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            epochs: 50,
            seed: 0,
            initial_step: 0.1,
        }
    }
}

/// Binary hyperplane; class 1 on the positive side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub standardizer: Standardizer,
    /// Hyperplane in standardized coordinates.
    pub std_weights: Vec<f64>,
    pub std_bias: f64,
    /// The same hyperplane in input coordinates.
    pub weights: Vec<f64>,
    pub bias: f64,
    pub labels: [usize; 2],
}

impl LinearModel {
    pub fn from_standardized(standardizer: Standardizer, std_weights: Vec<f64>, std_bias: f64) -> Self {
        let weights: Vec<f64> = std_weights.iter().zip(&standardizer.std).map(|(w, s)| w / s).collect();
        let bias = std_bias - weights.iter().zip(&standardizer.mean).map(|(w, m)| w * m).sum::<f64>();
        Self {
            standardizer,
            std_weights,
            std_bias,
            weights,
            bias,
            labels: [0, 1],
        }
    }

    pub fn dim(&self) -> usize {
        self.weights.len()
    }

    pub fn score(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::ShapeMismatch(format!(
                "model expects {} features, got {}",
                self.dim(),
                x.len()
            )));
        }
        Ok(self.weights.iter().zip(x).fold(self.bias, |acc, (w, v)| acc + w * v))
    }

    /// Label and score; a zero score goes to class 0.
    pub fn predict(&self, x: &[f64]) -> Result<(usize, f64)> {
        let s = self.score(x)?;
        Ok((if s > 0.0 { self.labels[1] } else { self.labels[0] }, s))
    }

    /// Logistic of the margin, used as a manipulation probability.
    pub fn probability(&self, x: &[f64]) -> Result<f64> {
        Ok(logistic(self.score(x)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, &ModelFile::Binary(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_json(path)? {
            ModelFile::Binary(m) => Ok(m),
            ModelFile::OneVsRest(_) => Err(Error::format("svm model", "expected a binary model")),
        }
    }
}

pub fn logistic(s: f64) -> f64 {
    if s >= 0.0 {
        1.0 / (1.0 + (-s).exp())
    } else {
        let e = s.exp();
        e / (1.0 + e)
    }
}

/// Mean hinge loss with labels mapped to `-1` (class 0) and `+1` (class 1).
pub fn hinge_loss(model: &LinearModel, features: &[&[f64]], labels: &[usize]) -> Result<f64> {
    let mut total = 0.0;
    for (x, &l) in features.iter().zip(labels) {
        let y = if l == model.labels[1] { 1.0 } else { -1.0 };
        total += (1.0 - y * model.score(x)?).max(0.0);
    }
    Ok(total / features.len().max(1) as f64)
}

/// Minimizes `mean hinge + lambda |w|^2 / 2` over standardized features.
pub fn svm_train(features: &[&[f64]], labels: &[usize], cfg: &SvmConfig) -> Result<LinearModel> {
    let dim = check_rows(features)?;
    if features.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} features with {} labels",
            features.len(),
            labels.len()
        )));
    }
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::Dataset("binary training needs labels 0 and 1".into()));
    }
    if !labels.contains(&0) || !labels.contains(&1) {
        return Err(Error::Dataset("training set has a single class".into()));
    }
    if !(cfg.lambda > 0.0 && cfg.initial_step > 0.0) {
        return Err(Error::InvalidParameter(
            "lambda and initial step must be positive".into(),
        ));
    }
    let standardizer = Standardizer::fit(features)?;
    let xs: Vec<Vec<f64>> = features.iter().map(|x| standardizer.apply(x)).collect();
    let ys: Vec<f64> = labels.iter().map(|&l| if l == 1 { 1.0 } else { -1.0 }).collect();

    let mut w = vec![0.0; dim];
    let mut b = 0.0;
    let t0 = 1.0 / (cfg.lambda * cfg.initial_step);
    let mut t = 0.0;
    let mut order: Vec<usize> = (0..xs.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            let eta = 1.0 / (cfg.lambda * (t + t0));
            t += 1.0;
            let x = &xs[i];
            let margin = ys[i] * (w.iter().zip(x).map(|(a, v)| a * v).sum::<f64>() + b);
            let shrink = 1.0 - eta * cfg.lambda;
            if margin < 1.0 {
                for (wj, xj) in w.iter_mut().zip(x) {
                    *wj = shrink * *wj + eta * ys[i] * xj;
                }
                b += eta * ys[i];
            } else {
                w.iter_mut().for_each(|wj| *wj *= shrink);
            }
        }
    }
    Ok(LinearModel::from_standardized(standardizer, w, b))
}

pub fn svm_predict(model: &LinearModel, x: &[f64]) -> Result<(usize, f64)> {
    model.predict(x)
}

/// One binary model per class, each trained class-vs-rest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OneVsRest {
    pub models: Vec<LinearModel>,
}

impl OneVsRest {
    pub fn train(features: &[&[f64]], labels: &[usize], classes: usize, cfg: &SvmConfig) -> Result<Self> {
        if classes < 2 {
            return Err(Error::InvalidParameter("one-vs-rest needs at least two classes".into()));
        }
        if let Some(c) = (0..classes).find(|c| !labels.contains(c)) {
            return Err(Error::Dataset(format!("class {c} has no examples")));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Dataset(format!("label {l} is outside {classes} classes")));
        }
        let models = (0..classes)
            .map(|c| {
                let binary: Vec<usize> = labels.iter().map(|&l| usize::from(l == c)).collect();
                let sub = SvmConfig {
                    seed: cfg.seed.wrapping_add(c as u64),
                    ..cfg.clone()
                };
                svm_train(features, &binary, &sub)
            })
            .collect::<Result<_>>()?;
        Ok(Self { models })
    }

    pub fn scores(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.models.iter().map(|m| m.score(x)).collect()
    }

    /// Class with the largest score, lowest index on ties.
    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let s = self.scores(x)?;
        Ok((1..s.len()).fold(0, |best, c| if s[c] > s[best] { c } else { best }))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        save_json(path, &ModelFile::OneVsRest(self.clone()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        match load_json(path)? {
            ModelFile::OneVsRest(m) => Ok(m),
            ModelFile::Binary(_) => Err(Error::format("svm model", "expected a one-vs-rest model")),
        }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum ModelFile {
    Binary(LinearModel),
    OneVsRest(OneVsRest),
}

#[derive(Serialize, Deserialize)]
struct Envelope<T> {
    format: String,
    version: u32,
    model: T,
}

fn save_json(path: &Path, model: &ModelFile) -> Result<()> {
    let env = Envelope {
        format: MODEL_FORMAT.to_string(),
        version: MODEL_VERSION,
        model,
    };
    let text = serde_json::to_string_pretty(&env).map_err(|e| Error::format("svm model", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn load_json(path: &Path) -> Result<ModelFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let env: Envelope<ModelFile> = serde_json::from_str(&text).map_err(|e| Error::format("svm model", e))?;
    if env.format != MODEL_FORMAT || env.version != MODEL_VERSION {
        return Err(Error::format(
            "svm model",
            format!("unsupported format {} version {}", env.format, env.version),
        ));
    }
    Ok(env.model)
}
