//! JSON container shared by constrained-network parameter files and trained
//! model files.
//!
//! ```text
//! {
//!   "format": "srmnet-params",
//!   "version": 1,
//!   "layers": ["along.conv", "along.codebook", "across.conv", "across.codebook", ...],
//!   "delta": 4.5,
//!   "along":  { "bank": {...}, "codebook": {...} },
//!   "across": { "bank": {...}, "codebook": {...} },
//!   "head": {...},          // trained models only
//!   "alpha": 1.0,           // trained models only
//!   "training": {...}       // trained models only
//! }
//! ```
//!
//! Floats are written with shortest round-trip formatting, so a saved file
//! reloads to bit-identical parameters.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bownet::{BowParams, Branch};
use crate::error::{Error, Result};
use crate::train::{Head, NetParams, TrainConfig};

pub const PARAMS_FORMAT: &str = "srmnet-params";
pub const PARAMS_VERSION: u32 = 1;

const BOW_LAYERS: [&str; 4] = ["along.conv", "along.codebook", "across.conv", "across.codebook"];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainingRecord {
    pub config: TrainConfig,
    pub epochs: usize,
    pub final_loss: f64,
    pub loss_history: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct ParamFile {
    format: String,
    version: u32,
    layers: Vec<String>,
    delta: f64,
    along: Branch,
    across: Branch,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    head: Option<Head>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    alpha: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    training: Option<TrainingRecord>,
}

impl ParamFile {
    fn bow(p: &BowParams) -> Self {
        Self {
            format: PARAMS_FORMAT.into(),
            version: PARAMS_VERSION,
            layers: BOW_LAYERS.iter().map(|s| s.to_string()).collect(),
            delta: p.delta,
            along: p.along.clone(),
            across: p.across.clone(),
            head: None,
            alpha: None,
            training: None,
        }
    }
}

fn write(path: &Path, f: &ParamFile) -> Result<()> {
    let text = serde_json::to_string_pretty(f).map_err(|e| Error::format("parameter file", e))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<ParamFile> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text)
}

fn parse(text: &str) -> Result<ParamFile> {
    let f: ParamFile = serde_json::from_str(text).map_err(|e| Error::format("parameter file", e))?;
    if f.format != PARAMS_FORMAT {
        return Err(Error::format(
            "parameter file",
            format!("unknown format tag {:?}", f.format),
        ));
    }
    if f.version != PARAMS_VERSION {
        return Err(Error::format(
            "parameter file",
            format!("unsupported version {}", f.version),
        ));
    }
    f.along.check()?;
    f.across.check()?;
    Ok(f)
}

pub fn save_bow_params(path: impl AsRef<Path>, p: &BowParams) -> Result<()> {
    write(path.as_ref(), &ParamFile::bow(p))
}

/// Loads the network layers of any parameter file, trained or not.
pub fn load_bow_params(path: impl AsRef<Path>) -> Result<BowParams> {
    let f = read(path.as_ref())?;
    Ok(BowParams {
        delta: f.delta,
        along: f.along,
        across: f.across,
    })
}

pub fn save_model(path: impl AsRef<Path>, p: &NetParams, training: Option<&TrainingRecord>) -> Result<()> {
    let mut f = ParamFile::bow(&p.bow());
    f.layers.extend(["fc".to_string(), "softmax".to_string()]);
    f.head = Some(p.head.clone());
    f.alpha = Some(p.alpha);
    f.training = training.cloned();
    write(path.as_ref(), &f)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<(NetParams, Option<TrainingRecord>)> {
    let f = read(path.as_ref())?;
    let (Some(head), Some(alpha)) = (f.head, f.alpha) else {
        return Err(Error::format(
            "model file",
            "no fully connected head; this is a constrained parameter file",
        ));
    };
    let p = NetParams {
        delta: f.delta,
        along: f.along,
        across: f.across,
        head,
        alpha,
    };
    p.validate()?;
    Ok((p, f.training))
}

/// Tab-separated per-epoch losses with a header row.
pub fn format_loss_history(history: &[f64]) -> String {
    let mut out = String::from("epoch\tmean_loss\n");
    for (i, l) in history.iter().enumerate() {
        out.push_str(&format!("{}\t{l}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bownet::build_constrained_params;

    #[test]
    fn bow_params_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.json");
        let mut p = build_constrained_params(4.5).unwrap();
        p.across.codebook.codewords[7] = 0.1 + 0.2;
        save_bow_params(&path, &p).unwrap();
        assert_eq!(load_bow_params(&path).unwrap(), p);
        assert!(load_model(&path).is_err());
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        let p = NetParams::initial(build_constrained_params(4.5).unwrap(), 1.0 / 3.0, 5).unwrap();
        let rec = TrainingRecord {
            config: TrainConfig::default(),
            epochs: 2,
            final_loss: 0.123456789,
            loss_history: vec![0.7, 0.123456789],
        };
        save_model(&path, &p, Some(&rec)).unwrap();
        let (q, r) = load_model(&path).unwrap();
        assert_eq!(q, p);
        assert_eq!(r.unwrap(), rec);
        assert_eq!(load_bow_params(&path).unwrap(), p.bow());
    }

    #[test]
    fn rejects_foreign_files() {
        let p = build_constrained_params(4.5).unwrap();
        let good = serde_json::to_string(&ParamFile::bow(&p)).unwrap();
        assert!(parse(&good).is_ok());
        assert!(parse(&good.replace(PARAMS_FORMAT, "other")).is_err());
        assert!(parse(&good.replace("\"version\":1", "\"version\":9")).is_err());
        assert!(parse("{").is_err());
    }

    #[test]
    fn loss_history_table() {
        assert_eq!(format_loss_history(&[0.5, 0.25]), "epoch\tmean_loss\n1\t0.5\n2\t0.25\n");
    }
}
