//! Binary pristine-versus-manipulated detection for a list of manipulations,
//! with the handcrafted SVM and the fine-tuned network side by side.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::config::{parse_specs, ExperimentConfig, HeadInit};
use super::corpus::Corpus;
use super::dataset::{build_dataset, Dataset, Split};
use super::eval::{eval_binary, BinaryEval, CnnDetector, SvmDetector};
use super::seeds;
use crate::bownet::build_constrained_params;
use crate::classifier::{svm_train, LinearModel};
use crate::descriptor::{extract_feature_with, Feature, DEFAULT_DELTA};
use crate::error::Result;
use crate::image::Plane;
use crate::manipulate::ManipulationSpec;
use crate::train::{train, Head, NetParams};

/// Lower bound on the head's standardization scale. Bins that are (nearly)
/// constant on hard features still receive soft mass during training.
pub const HEAD_SCALE_FLOOR: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Svm,
    Cnn,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Svm => "svm",
            Method::Cnn => "cnn",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SuiteRow {
    pub manipulation: ManipulationSpec,
    pub method: Method,
    pub eval: BinaryEval,
    pub train_patches: usize,
}

/// Everything trained for one manipulation.
#[derive(Clone, Debug)]
pub struct SuiteEntry {
    pub manipulation: ManipulationSpec,
    pub svm: SvmDetector,
    pub cnn: Option<CnnDetector>,
    pub cnn_loss: Vec<f64>,
    pub rows: Vec<SuiteRow>,
}

#[derive(Clone, Debug, Default)]
pub struct SuiteReport {
    pub entries: Vec<SuiteEntry>,
}

pub const SUITE_HEADER: &str =
    "manipulation\tparameter\tmethod\taccuracy\trecall_pristine\trecall_manipulated\ttrain_patches\ttest_patches";

impl SuiteReport {
    pub fn rows(&self) -> impl Iterator<Item = &SuiteRow> {
        self.entries.iter().flat_map(|e| &e.rows)
    }

    pub fn find(&self, spec: &str, method: Method) -> Option<&SuiteRow> {
        self.rows()
            .find(|r| r.method == method && format!("{}", r.manipulation) == spec)
    }

    /// Tab-separated table, accuracies in percent.
    pub fn to_tsv(&self) -> String {
        let mut out = format!("{SUITE_HEADER}\n");
        for r in self.rows() {
            out.push_str(&format!(
                "{}\t{}\t{}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\n",
                r.manipulation.kind.name(),
                r.manipulation.parameter,
                r.method.name(),
                100.0 * r.eval.accuracy,
                100.0 * r.eval.recall[0],
                100.0 * r.eval.recall[1],
                r.train_patches,
                r.eval.count,
            ));
        }
        out
    }
}

pub fn features(ds: &Dataset, indices: &[usize], normalize: bool) -> Result<Vec<Feature>> {
    indices
        .par_iter()
        .map(|&i| extract_feature_with(&ds.patch(i), DEFAULT_DELTA, normalize))
        .collect()
}

fn labels(ds: &Dataset, indices: &[usize]) -> Vec<usize> {
    indices.iter().map(|&i| ds.records[i].binary_label()).collect()
}

fn fit_svm(feats: &[Feature], labels: &[usize], cfg: &ExperimentConfig) -> Result<LinearModel> {
    let rows: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    svm_train(&rows, labels, &cfg.svm.svm_config(seeds::derive(cfg.seed, seeds::SVM)))
}

/// Head reproducing `model`, with scales floored at [`HEAD_SCALE_FLOOR`] and
/// the weights rescaled so the decision function is unchanged.
pub fn head_from_linear(model: &LinearModel) -> Result<Head> {
    let sd = &model.standardizer;
    let scale: Vec<f64> = sd.std.iter().map(|&s| s.max(HEAD_SCALE_FLOOR)).collect();
    let w: Vec<f64> = model
        .std_weights
        .iter()
        .zip(sd.std.iter().zip(&scale))
        .map(|(w, (s, t))| w * t / s)
        .collect();
    Head::from_linear(&w, model.std_bias)?.with_standardization(&sd.mean, &scale)
}

/// Constrained layers plus the configured head, before fine-tuning.
pub fn initial_network(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train_idx: &[usize],
    svm: &SvmDetector,
) -> Result<NetParams> {
    let bow = build_constrained_params(DEFAULT_DELTA)?;
    let head = match cfg.cnn.head_init {
        HeadInit::Random => Head::random(0.01, seeds::derive(cfg.seed, seeds::CNN_INIT)),
        HeadInit::Linear if svm.normalize => head_from_linear(&svm.model)?,
        HeadInit::Linear => {
            let f = features(ds, train_idx, true)?;
            head_from_linear(&fit_svm(&f, &labels(ds, train_idx), cfg)?)?
        }
    };
    NetParams::new(bow, head, cfg.cnn.alpha)
}

/// Fine-tunes the network on `train_idx`, or a seeded subset of
/// `cfg.cnn.max_train_patches` of it. Returns the parameters, the loss per
/// epoch and the number of patches used.
pub fn train_network(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    train_idx: &[usize],
    svm: &SvmDetector,
    on_epoch: &mut dyn FnMut(usize, f64),
) -> Result<(NetParams, Vec<f64>, usize)> {
    let init = initial_network(cfg, ds, train_idx, svm)?;
    let mut subset = train_idx.to_vec();
    let max = cfg.cnn.max_train_patches;
    if max > 0 && max < subset.len() {
        subset.shuffle(&mut ChaCha8Rng::seed_from_u64(seeds::derive(
            cfg.seed,
            seeds::CNN_SUBSET,
        )));
        subset.truncate(max);
        subset.sort_unstable();
    }
    let patches: Vec<Plane> = subset.iter().map(|&i| ds.patch(i)).collect();
    let mut tc = cfg.cnn.train.clone();
    tc.seed = seeds::derive(cfg.seed, seeds::CNN_SHUFFLE);
    let (params, history) = train(&patches, &labels(ds, &subset), &tc, init, on_epoch)?;
    Ok((params, history, subset.len()))
}

/// Trains and evaluates both detectors on one manipulation.
pub fn run_entry(
    cfg: &ExperimentConfig,
    corpus: &Corpus,
    spec: ManipulationSpec,
    log: &mut dyn FnMut(&str),
) -> Result<SuiteEntry> {
    let spec = spec.with_seed(seeds::derive(cfg.seed, seeds::MANIPULATION));
    let ds = build_dataset(corpus, &spec, &cfg.dataset, seeds::derive(cfg.seed, seeds::SPLIT))?;
    let train_idx = ds.indices(Split::Train);
    let test_idx = ds.indices(Split::Test);
    log(&format!(
        "{spec}: {} train / {} test patches",
        train_idx.len(),
        test_idx.len()
    ));

    let feats = features(&ds, &train_idx, cfg.svm.normalize)?;
    let svm = SvmDetector::new(fit_svm(&feats, &labels(&ds, &train_idx), cfg)?, cfg.svm.normalize);
    drop(feats);
    let svm_eval = eval_binary(&svm, &ds, &test_idx)?;
    log(&format!("{spec}: svm accuracy {:.2}%", 100.0 * svm_eval.accuracy));
    let mut rows = vec![SuiteRow {
        manipulation: spec,
        method: Method::Svm,
        eval: svm_eval,
        train_patches: train_idx.len(),
    }];

    let mut cnn = None;
    let mut cnn_loss = Vec::new();
    if cfg.cnn.enabled {
        let (params, history, subset) = train_network(cfg, &ds, &train_idx, &svm, &mut |e, l| {
            log(&format!("{spec}: cnn epoch {} loss {l:.5}", e + 1))
        })?;
        let det = CnnDetector { params };
        let eval = eval_binary(&det, &ds, &test_idx)?;
        log(&format!("{spec}: cnn accuracy {:.2}%", 100.0 * eval.accuracy));
        rows.push(SuiteRow {
            manipulation: spec,
            method: Method::Cnn,
            eval,
            train_patches: subset,
        });
        cnn = Some(det);
        cnn_loss = history;
    }
    Ok(SuiteEntry {
        manipulation: spec,
        svm,
        cnn,
        cnn_loss,
        rows,
    })
}

/// Runs every manipulation of `cfg.suite` in order. The output depends only
/// on the configuration and the corpus.
pub fn run_binary_suite(cfg: &ExperimentConfig, corpus: &Corpus, log: &mut dyn FnMut(&str)) -> Result<SuiteReport> {
    cfg.validate()?;
    let mut report = SuiteReport::default();
    for spec in parse_specs(&cfg.suite.manipulations)? {
        report.entries.push(run_entry(cfg, corpus, spec, log)?);
    }
    Ok(report)
}
