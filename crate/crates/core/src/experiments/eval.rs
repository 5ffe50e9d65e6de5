//! Detectors over patches and binary accuracy.

use rayon::prelude::*;

use super::dataset::Dataset;
use crate::classifier::{logistic, LinearModel};
use crate::descriptor::{extract_feature_with, DEFAULT_DELTA};
use crate::error::{Error, Result};
use crate::image::Plane;
use crate::train::{class_probabilities, forward_logits, NetParams};

/// Something that scores a patch with a manipulation probability.
pub trait Predictor: Sync {
    fn probability(&self, patch: &Plane) -> Result<f64>;

    /// Manipulated (1) when the probability exceeds one half.
    fn predict(&self, patch: &Plane) -> Result<usize> {
        Ok(usize::from(self.probability(patch)? > 0.5))
    }
}

/// Handcrafted feature followed by a linear SVM.
#[derive(Clone, Debug)]
pub struct SvmDetector {
    pub model: LinearModel,
    pub normalize: bool,
    pub delta: f64,
}

impl SvmDetector {
    pub fn new(model: LinearModel, normalize: bool) -> Self {
        Self {
            model,
            normalize,
            delta: DEFAULT_DELTA,
        }
    }

    pub fn score(&self, patch: &Plane) -> Result<f64> {
        let f = extract_feature_with(patch, self.delta, self.normalize)?;
        self.model.score(f.as_slice())
    }
}

impl Predictor for SvmDetector {
    /// Logistic of the margin.
    fn probability(&self, patch: &Plane) -> Result<f64> {
        Ok(logistic(self.score(patch)?))
    }

    fn predict(&self, patch: &Plane) -> Result<usize> {
        Ok(usize::from(self.score(patch)? > 0.0))
    }
}

/// The trainable network; probability is the soft-max of its logits.
#[derive(Clone, Debug)]
pub struct CnnDetector {
    pub params: NetParams,
}

impl Predictor for CnnDetector {
    fn probability(&self, patch: &Plane) -> Result<f64> {
        let logits = forward_logits(patch, &self.params)?;
        Ok(class_probabilities(&logits)[1])
    }

    fn predict(&self, patch: &Plane) -> Result<usize> {
        let logits = forward_logits(patch, &self.params)?;
        Ok(usize::from(logits[1] > logits[0]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BinaryEval {
    pub accuracy: f64,
    /// Recall of class 0 (pristine) and class 1 (manipulated).
    pub recall: [f64; 2],
    pub count: usize,
}

/// Accuracy and per-class recall of binary decisions.
pub fn score_binary(predicted: &[usize], labels: &[usize]) -> Result<BinaryEval> {
    if labels.is_empty() {
        return Err(Error::Dataset("cannot evaluate on an empty set".into()));
    }
    if predicted.len() != labels.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} predictions for {} labels",
            predicted.len(),
            labels.len()
        )));
    }
    if let Some(&l) = labels.iter().chain(predicted).find(|&&l| l > 1) {
        return Err(Error::Dataset(format!("label {l} is not binary")));
    }
    let mut hits = [0usize; 2];
    let mut totals = [0usize; 2];
    for (&p, &l) in predicted.iter().zip(labels) {
        totals[l] += 1;
        if p == l {
            hits[l] += 1;
        }
    }
    let recall = std::array::from_fn(|c| {
        if totals[c] == 0 {
            f64::NAN
        } else {
            hits[c] as f64 / totals[c] as f64
        }
    });
    Ok(BinaryEval {
        accuracy: (hits[0] + hits[1]) as f64 / labels.len() as f64,
        recall,
        count: labels.len(),
    })
}

/// Runs `predictor` on the chosen patches of `ds` in parallel.
pub fn eval_binary(predictor: &dyn Predictor, ds: &Dataset, indices: &[usize]) -> Result<BinaryEval> {
    if indices.is_empty() {
        return Err(Error::Dataset("test set is empty".into()));
    }
    let predicted = indices
        .par_iter()
        .map(|&i| predictor.predict(&ds.patch(i)))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<usize> = indices.iter().map(|&i| ds.records[i].binary_label()).collect();
    score_binary(&predicted, &labels)
}
