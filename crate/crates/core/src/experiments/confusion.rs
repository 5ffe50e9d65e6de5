//! Which manipulation is it? One-vs-rest SVMs over manipulated patches only.

use super::config::{parse_specs, ExperimentConfig};
use super::corpus::Corpus;
use super::dataset::{build_dataset_multi, Split};
use super::seeds;
use super::suite::features;
use crate::classifier::OneVsRest;
use crate::error::{Error, Result};
use crate::manipulate::ManipulationSpec;

/// Rows are true classes, columns predicted classes.
#[derive(Clone, Debug, PartialEq)]
pub struct ConfusionMatrix {
    pub classes: Vec<String>,
    pub counts: Vec<Vec<usize>>,
}

impl ConfusionMatrix {
    /// Counts decisions; every class needs at least one true sample.
    pub fn from_predictions(classes: Vec<String>, predicted: &[usize], truth: &[usize]) -> Result<Self> {
        let k = classes.len();
        if predicted.len() != truth.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} predictions for {} labels",
                predicted.len(),
                truth.len()
            )));
        }
        let mut counts = vec![vec![0usize; k]; k];
        for (&p, &t) in predicted.iter().zip(truth) {
            if p >= k || t >= k {
                return Err(Error::Dataset(format!("label out of range for {k} classes")));
            }
            counts[t][p] += 1;
        }
        if let Some(c) = counts.iter().position(|r| r.iter().sum::<usize>() == 0) {
            return Err(Error::Dataset(format!("class {} has no test samples", classes[c])));
        }
        Ok(Self { classes, counts })
    }

    /// Row-normalized percentages.
    pub fn percent(&self) -> Vec<Vec<f64>> {
        self.counts
            .iter()
            .map(|row| {
                let n: usize = row.iter().sum();
                row.iter().map(|&c| 100.0 * c as f64 / n as f64).collect()
            })
            .collect()
    }

    pub fn get(&self, truth: &str, predicted: &str) -> Option<f64> {
        let t = self.classes.iter().position(|c| c == truth)?;
        let p = self.classes.iter().position(|c| c == predicted)?;
        Some(self.percent()[t][p])
    }

    /// Tab-separated percentages; the first column is the true class.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("true\\predicted");
        for c in &self.classes {
            out.push('\t');
            out.push_str(c);
        }
        out.push('\n');
        for (c, row) in self.classes.iter().zip(self.percent()) {
            out.push_str(c);
            for v in row {
                out.push_str(&format!("\t{v:.2}"));
            }
            out.push('\n');
        }
        out
    }
}

pub fn class_names(specs: &[ManipulationSpec]) -> Vec<String> {
    specs.iter().map(|s| s.kind.name().to_string()).collect()
}

pub fn run_confusion(cfg: &ExperimentConfig, corpus: &Corpus, log: &mut dyn FnMut(&str)) -> Result<ConfusionMatrix> {
    cfg.validate()?;
    let specs: Vec<ManipulationSpec> = parse_specs(&cfg.confusion.manipulations)?
        .into_iter()
        .map(|s| s.with_seed(seeds::derive(cfg.seed, seeds::MANIPULATION)))
        .collect();
    if specs.len() < 2 {
        return Err(Error::InvalidParameter(
            "confusion needs at least two manipulations".into(),
        ));
    }
    let ds = build_dataset_multi(
        corpus,
        &specs,
        false,
        &cfg.dataset,
        seeds::derive(cfg.seed, seeds::SPLIT),
    )?;
    let train_idx = ds.indices(Split::Train);
    let test_idx = ds.indices(Split::Test);
    log(&format!(
        "confusion: {} train / {} test patches",
        train_idx.len(),
        test_idx.len()
    ));
    // manipulated classes are numbered from 1
    let class_of = |i: usize| ds.records[i].class - 1;

    let feats = features(&ds, &train_idx, cfg.svm.normalize)?;
    let rows: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let y: Vec<usize> = train_idx.iter().map(|&i| class_of(i)).collect();
    let model = OneVsRest::train(
        &rows,
        &y,
        specs.len(),
        &cfg.svm.svm_config(seeds::derive(cfg.seed, seeds::SVM)),
    )?;
    drop(feats);

    let test_feats = features(&ds, &test_idx, cfg.svm.normalize)?;
    let predicted = test_feats
        .iter()
        .map(|f| model.predict(f.as_slice()))
        .collect::<Result<Vec<_>>>()?;
    let truth: Vec<usize> = test_idx.iter().map(|&i| class_of(i)).collect();
    ConfusionMatrix::from_predictions(class_names(&specs), &predicted, &truth)
}
