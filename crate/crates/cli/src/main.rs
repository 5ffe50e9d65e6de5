use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use srmnet::bownet::build_constrained_params;
use srmnet::classifier::LinearModel;
use srmnet::descriptor::{write_features, FeatureRecord, DEFAULT_DELTA};
use srmnet::experiments::config::ExperimentConfig;
use srmnet::experiments::confusion::run_confusion;
use srmnet::experiments::corpus::synthesize;
use srmnet::experiments::dataset::{build_dataset, load_dataset, save_dataset, Dataset, Split};
use srmnet::experiments::eval::{eval_binary, BinaryEval, CnnDetector, Predictor, SvmDetector};
use srmnet::experiments::localize::{localize, save_heatmap};
use srmnet::experiments::seeds;
use srmnet::experiments::suite::{features, run_binary_suite, train_network};
use srmnet::image::load_image;
use srmnet::manipulate::ManipulationSpec;
use srmnet::modelio::{format_loss_history, load_model, save_bow_params, save_model, TrainingRecord};

#[derive(Parser)]
#[command(
    name = "srmnet",
    version,
    about = "Residual co-occurrence descriptors and their CNN counterpart for manipulation detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML experiment configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed, overriding the configuration.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

impl Common {
    fn config(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(p) => ExperimentConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Synthetic multi-device corpus.
    #[command(subcommand)]
    Corpus(CorpusCmd),
    #[command(subcommand)]
    Dataset(DatasetCmd),
    #[command(subcommand)]
    Feature(FeatureCmd),
    #[command(subcommand)]
    Params(ParamsCmd),
    #[command(subcommand)]
    Svm(SvmCmd),
    #[command(subcommand)]
    Cnn(CnnCmd),
    #[command(subcommand)]
    Suite(SuiteCmd),
    #[command(subcommand)]
    Confusion(ConfusionCmd),
    /// Sliding-window heat map of one image.
    Localize(LocalizeArgs),
}

#[derive(Subcommand)]
enum CorpusCmd {
    /// Writes one directory of PGM images per synthetic device.
    Synth(Common),
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Paired pristine/manipulated patches with a source-disjoint split.
    Build {
        #[command(flatten)]
        common: Common,
        /// Manipulation as `kind:parameter`, e.g. `blur:0.5`.
        #[arg(long)]
        manipulation: ManipulationSpec,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Train,
    Test,
    All,
}

#[derive(Subcommand)]
enum FeatureCmd {
    /// Writes the 162-dimensional descriptor of every dataset patch.
    Extract {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_enum, default_value = "all")]
        split: SplitArg,
    },
}

#[derive(Subcommand)]
enum ParamsCmd {
    /// Writes the constrained network parameters.
    Init(Common),
}

#[derive(Subcommand)]
enum SvmCmd {
    /// Fits a linear SVM on the training split.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    /// Accuracy on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Subcommand)]
enum CnnCmd {
    /// Fine-tunes the network from its constrained initialization.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
    },
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
}

#[derive(Subcommand)]
enum SuiteCmd {
    /// Binary detection table for every configured manipulation.
    Run(Common),
}

#[derive(Subcommand)]
enum ConfusionCmd {
    /// Multi-class confusion matrix over manipulated patches.
    Run(Common),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Svm,
    Cnn,
}

#[derive(Args)]
struct LocalizeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_enum)]
    method: MethodArg,
}

fn log(msg: &str) {
    eprintln!("{msg}");
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn eval_table(rows: &[(&str, BinaryEval)]) -> String {
    let mut out = String::from("method\taccuracy\trecall_pristine\trecall_manipulated\ttest_patches\n");
    for (m, e) in rows {
        out.push_str(&format!(
            "{m}\t{:.4}\t{:.4}\t{:.4}\t{}\n",
            100.0 * e.accuracy,
            100.0 * e.recall[0],
            100.0 * e.recall[1],
            e.count
        ));
    }
    out
}

fn binary_labels(ds: &Dataset, idx: &[usize]) -> Vec<usize> {
    idx.iter().map(|&i| ds.records[i].binary_label()).collect()
}

fn load_ds(path: &Path) -> Result<Dataset> {
    load_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn train_svm(cfg: &ExperimentConfig, ds: &Dataset) -> Result<LinearModel> {
    let idx = ds.indices(Split::Train);
    let feats = features(ds, &idx, cfg.svm.normalize)?;
    let rows: Vec<&[f64]> = feats.iter().map(|f| f.as_slice()).collect();
    let model = srmnet::classifier::svm_train(
        &rows,
        &binary_labels(ds, &idx),
        &cfg.svm.svm_config(seeds::derive(cfg.seed, seeds::SVM)),
    )?;
    Ok(model)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Corpus(CorpusCmd::Synth(c)) => {
            let cfg = c.config()?;
            let corpus = synthesize(&cfg.corpus.synth(), seeds::derive(cfg.seed, seeds::CORPUS))?;
            corpus.save(&c.out)?;
            log(&format!(
                "{} images in {} groups",
                corpus.image_count(),
                corpus.groups.len()
            ));
        }
        Command::Dataset(DatasetCmd::Build { common, manipulation }) => {
            let cfg = common.config()?;
            let corpus = cfg.corpus()?;
            let spec = manipulation.with_seed(seeds::derive(cfg.seed, seeds::MANIPULATION));
            let ds = build_dataset(&corpus, &spec, &cfg.dataset, seeds::derive(cfg.seed, seeds::SPLIT))?;
            save_dataset(&ds, &common.out)?;
            log(&format!("{} patches", ds.len()));
        }
        Command::Feature(FeatureCmd::Extract { common, dataset, split }) => {
            let cfg = common.config()?;
            let ds = load_ds(&dataset)?;
            let idx: Vec<usize> = match split {
                SplitArg::Train => ds.indices(Split::Train),
                SplitArg::Test => ds.indices(Split::Test),
                SplitArg::All => (0..ds.len()).collect(),
            };
            let feats = features(&ds, &idx, cfg.svm.normalize)?;
            let records: Vec<FeatureRecord> = idx
                .iter()
                .zip(feats)
                .map(|(&i, feature)| FeatureRecord {
                    id: format!("{i}"),
                    label: ds.records[i].class,
                    feature,
                })
                .collect();
            write_features(&common.out, &records)?;
        }
        Command::Params(ParamsCmd::Init(c)) => {
            save_bow_params(&c.out, &build_constrained_params(DEFAULT_DELTA)?)?;
        }
        Command::Svm(SvmCmd::Train { common, dataset }) => {
            let cfg = common.config()?;
            let model = train_svm(&cfg, &load_ds(&dataset)?)?;
            model.save(&common.out)?;
        }
        Command::Svm(SvmCmd::Eval { common, dataset, model }) => {
            let cfg = common.config()?;
            let ds = load_ds(&dataset)?;
            let det = SvmDetector::new(LinearModel::load(&model)?, cfg.svm.normalize);
            let e = eval_binary(&det, &ds, &ds.indices(Split::Test))?;
            write(&common.out, &eval_table(&[("svm", e)]))?;
        }
        Command::Cnn(CnnCmd::Train { common, dataset }) => {
            let cfg = common.config()?;
            let ds = load_ds(&dataset)?;
            let idx = ds.indices(Split::Train);
            let svm = SvmDetector::new(train_svm(&cfg, &ds)?, cfg.svm.normalize);
            let (params, history, used) = train_network(&cfg, &ds, &idx, &svm, &mut |e, l| {
                log(&format!("epoch {} loss {l:.5}", e + 1))
            })?;
            log(&format!("trained on {used} patches"));
            let mut tc = cfg.cnn.train.clone();
            tc.seed = seeds::derive(cfg.seed, seeds::CNN_SHUFFLE);
            let record = TrainingRecord {
                config: tc,
                epochs: history.len(),
                final_loss: history.last().copied().unwrap_or(f64::NAN),
                loss_history: history.clone(),
            };
            save_model(&common.out, &params, Some(&record))?;
            write(&common.out.with_extension("loss.tsv"), &format_loss_history(&history))?;
        }
        Command::Cnn(CnnCmd::Eval { common, dataset, model }) => {
            let ds = load_ds(&dataset)?;
            let (params, _) = load_model(&model)?;
            let e = eval_binary(&CnnDetector { params }, &ds, &ds.indices(Split::Test))?;
            write(&common.out, &eval_table(&[("cnn", e)]))?;
        }
        Command::Suite(SuiteCmd::Run(c)) => {
            let cfg = c.config()?;
            let corpus = cfg.corpus()?;
            let report = run_binary_suite(&cfg, &corpus, &mut log)?;
            create_dir(&c.out)?;
            write(&c.out.join("suite.tsv"), &report.to_tsv())?;
            for e in report.entries.iter().filter(|e| !e.cnn_loss.is_empty()) {
                let name = format!("loss_{}_{}.tsv", e.manipulation.kind.name(), e.manipulation.parameter);
                write(&c.out.join(name), &format_loss_history(&e.cnn_loss))?;
            }
        }
        Command::Confusion(ConfusionCmd::Run(c)) => {
            let cfg = c.config()?;
            let corpus = cfg.corpus()?;
            let m = run_confusion(&cfg, &corpus, &mut log)?;
            create_dir(&c.out)?;
            write(&c.out.join("confusion.tsv"), &m.to_tsv())?;
        }
        Command::Localize(a) => {
            let cfg = a.common.config()?;
            let image = load_image(&a.image)?;
            let predictor: Box<dyn Predictor> = match a.method {
                MethodArg::Svm => Box::new(SvmDetector::new(LinearModel::load(&a.model)?, cfg.svm.normalize)),
                MethodArg::Cnn => Box::new(CnnDetector {
                    params: load_model(&a.model)?.0,
                }),
            };
            if image.width() < cfg.localize.window || image.height() < cfg.localize.window {
                bail!(
                    "image is {}x{}, smaller than the {} pixel window",
                    image.width(),
                    image.height(),
                    cfg.localize.window
                );
            }
            let map = localize(&image, predictor.as_ref(), cfg.localize.window, cfg.localize.stride)?;
            save_heatmap(&map, &a.common.out)?;
            let mut table = String::from("row\tcol\tx\ty\tscore\n");
            for r in 0..map.rows {
                for c in 0..map.cols {
                    let o = map.origin(c, r);
                    table.push_str(&format!("{r}\t{c}\t{}\t{}\t{:.6}\n", o.x, o.y, map.get(c, r)));
                }
            }
            write(&a.common.out.with_extension("tsv"), &table)?;
        }
    }
    Ok(())
}

fn main() -> Result<()> {
    run(Cli::parse())
}
