//! TOML experiment configuration.
//!
//! Every table and key is optional; missing keys take the defaults below.
//!
//! ```toml
//! seed = 0
//!
//! [corpus]
//! # dir = "images"          # one subdirectory of images per source device
//! groups = 6                # synthetic corpus, used when `dir` is absent
//! images_per_group = 32
//! width = 512
//! height = 512
//!
//! [dataset]
//! split_fraction = 0.6666666666666666
//! patch_size = 128
//! patches_per_image = 0     # 0 keeps every grid patch
//!
//! [svm]
//! lambda = 1e-4
//! epochs = 50
//! initial_step = 0.1
//! normalize = true
//!
//! [cnn]
//! enabled = true
//! alpha = 4.0
//! head_init = "linear"      # or "random"
//! max_train_patches = 0     # 0 trains on the whole training split
//! [cnn.train]               # optimizer settings, see TrainConfig
//!
//! [suite]
//! manipulations = ["median:5", "blur:0.5", ...]
//!
//! [confusion]
//! manipulations = ["median:5", "blur:0.75", "noise:0.5", "resize:1.125", "jpeg:80"]
//!
//! [localize]
//! window = 128
//! stride = 16
//! region = 256
//! sigma = 0.5
//! images = 5
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::corpus::{synthesize, Corpus, SynthConfig};
use super::dataset::DatasetConfig;
use super::seeds;
use crate::classifier::SvmConfig;
use crate::error::{Error, Result};
use crate::manipulate::{ManipulationKind, ManipulationSpec};
use crate::train::{LrScale, TrainConfig};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub corpus: CorpusConfig,
    pub dataset: DatasetConfig,
    pub svm: SvmSettings,
    pub cnn: CnnSettings,
    pub suite: SuiteSettings,
    pub confusion: ConfusionSettings,
    pub localize: LocalizeSettings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusConfig {
    pub dir: Option<PathBuf>,
    pub groups: usize,
    pub images_per_group: usize,
    pub width: usize,
    pub height: usize,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        let s = SynthConfig::default();
        Self {
            dir: None,
            groups: s.groups,
            images_per_group: s.images_per_group,
            width: s.width,
            height: s.height,
        }
    }
}

impl CorpusConfig {
    pub fn synth(&self) -> SynthConfig {
        SynthConfig {
            groups: self.groups,
            images_per_group: self.images_per_group,
            width: self.width,
            height: self.height,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SvmSettings {
    pub lambda: f64,
    pub epochs: usize,
    pub initial_step: f64,
    pub normalize: bool,
}

impl Default for SvmSettings {
    fn default() -> Self {
        let c = SvmConfig::default();
        Self {
            lambda: c.lambda,
            epochs: c.epochs,
            initial_step: c.initial_step,
            normalize: true,
        }
    }
}

impl SvmSettings {
    pub fn svm_config(&self, seed: u64) -> SvmConfig {
        SvmConfig {
            lambda: self.lambda,
            epochs: self.epochs,
            seed,
            initial_step: self.initial_step,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadInit {
    /// Start from a linear SVM fitted on the hard (quantizer) features.
    Linear,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnSettings {
    pub enabled: bool,
    pub alpha: f64,
    pub head_init: HeadInit,
    pub max_train_patches: usize,
    pub train: TrainConfig,
}

impl Default for CnnSettings {
    fn default() -> Self {
        Self {
            enabled: true,
            alpha: 4.0,
            head_init: HeadInit::Linear,
            max_train_patches: 0,
            train: TrainConfig {
                learning_rate: 1e-3,
                weight_decay: 0.0,
                batch_size: 32,
                epochs: 2,
                lr_scale: LrScale {
                    conv_weights: 0.01,
                    conv_biases: 0.01,
                    ..LrScale::default()
                },
                ..TrainConfig::default()
            },
        }
    }
}

fn specs(list: &[&str]) -> Vec<String> {
    list.iter().map(|s| s.to_string()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SuiteSettings {
    pub manipulations: Vec<String>,
}

impl Default for SuiteSettings {
    fn default() -> Self {
        Self {
            manipulations: ManipulationSpec::standard_grid()
                .iter()
                .map(|s| s.to_string())
                .collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfusionSettings {
    pub manipulations: Vec<String>,
}

impl Default for ConfusionSettings {
    fn default() -> Self {
        Self {
            manipulations: specs(&["median:5", "blur:0.75", "noise:0.5", "resize:1.125", "jpeg:80"]),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LocalizeSettings {
    pub window: usize,
    pub stride: usize,
    /// Side of the square, centred, manipulated region of the splice.
    pub region: usize,
    pub sigma: f64,
    pub images: usize,
}

impl Default for LocalizeSettings {
    fn default() -> Self {
        Self {
            window: 128,
            stride: 16,
            region: 256,
            sigma: 0.5,
            images: 5,
        }
    }
}

pub fn parse_specs(list: &[String]) -> Result<Vec<ManipulationSpec>> {
    list.iter().map(|s| s.parse()).collect()
}

fn merge(base: &mut toml::Table, over: toml::Table) {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => merge(b, o),
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
}

impl ExperimentConfig {
    /// Parses `text` over the defaults, so a partial table keeps the
    /// default values of the keys it omits.
    pub fn from_toml(text: &str) -> Result<Self> {
        let err = |e: &dyn std::fmt::Display| Error::format("experiment config", e.to_string());
        let given: toml::Table = toml::from_str(text).map_err(|e| err(&e))?;
        let mut merged = toml::Table::try_from(Self::default()).map_err(|e| err(&e))?;
        merge(&mut merged, given);
        let cfg: Self = toml::Value::Table(merged).try_into().map_err(|e| err(&e))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::format("experiment config", e))
    }

    pub fn validate(&self) -> Result<()> {
        self.cnn.train.validate()?;
        if !(self.cnn.alpha > 0.0 && self.cnn.alpha.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "alpha must be positive, got {}",
                self.cnn.alpha
            )));
        }
        if !(self.svm.lambda > 0.0 && self.svm.initial_step > 0.0) {
            return Err(Error::InvalidParameter(
                "svm lambda and initial_step must be positive".into(),
            ));
        }
        if self.localize.window == 0 || self.localize.stride == 0 {
            return Err(Error::InvalidParameter(
                "localization window and stride must be positive".into(),
            ));
        }
        parse_specs(&self.suite.manipulations)?;
        let conf = parse_specs(&self.confusion.manipulations)?;
        let mut kinds: Vec<ManipulationKind> = conf.iter().map(|s| s.kind).collect();
        kinds.sort();
        kinds.dedup();
        if kinds.len() != conf.len() {
            return Err(Error::InvalidParameter(
                "confusion manipulations must be distinct kinds".into(),
            ));
        }
        Ok(())
    }

    /// Loads `corpus.dir`, or synthesizes the corpus from the master seed.
    pub fn corpus(&self) -> Result<Corpus> {
        let c = match &self.corpus.dir {
            Some(dir) => Corpus::load(dir)?,
            None => synthesize(&self.corpus.synth(), seeds::derive(self.seed, seeds::CORPUS))?,
        };
        c.check()?;
        Ok(c)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(ExperimentConfig::from_toml("").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn toml_round_trip() {
        let mut c = ExperimentConfig {
            seed: 17,
            ..Default::default()
        };
        c.corpus.dir = Some("imgs".into());
        c.cnn.head_init = HeadInit::Random;
        c.suite.manipulations = vec!["blur:0.5".into()];
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_tables() {
        let c = ExperimentConfig::from_toml("seed = 3\n[cnn.train]\nepochs = 7\n[localize]\nstride = 32\n").unwrap();
        assert_eq!(c.seed, 3);
        assert_eq!(c.cnn.train.epochs, 7);
        assert_eq!(c.cnn.train.batch_size, CnnSettings::default().train.batch_size);
        assert_eq!(c.localize.stride, 32);
        assert_eq!(c.localize.window, 128);
    }

    #[test]
    fn rejects_bad_configs() {
        assert!(ExperimentConfig::from_toml("sed = 3").is_err());
        assert!(ExperimentConfig::from_toml("[suite]\nmanipulations = [\"warp:2\"]").is_err());
        assert!(ExperimentConfig::from_toml("[confusion]\nmanipulations = [\"blur:1\", \"blur:2\"]").is_err());
        assert!(ExperimentConfig::from_toml("[cnn]\nalpha = 0.0").is_err());
    }
}
