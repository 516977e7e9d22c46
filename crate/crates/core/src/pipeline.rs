//! Pipeline stages with on-disk artifacts: datasets, denoiser, classifier
//! and translator checkpoints. Each loader reports the command that builds
//! a missing artifact.

use std::path::{Path, PathBuf};

use log::info;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::diffusion::{train_denoiser, validation_loss, Denoiser, DenoiserConfig, NoiseSchedule, TrainConfig, TrainPair};
use crate::error::{Error, Result};
use crate::eval::{train_attr_classifier, AttrClassifier, ClassifierConfig, HeadAccuracy};
use crate::image::ImageDims;
use crate::synthdata::{export_dataset, import_dataset, sample_dataset, Caption, Dataset, MANIFEST_FILE};
use crate::translator::{train_translator, I2ILogEntry, I2ITrainConfig, I2IVariant, TaskSpec, TranslationNetwork};

pub const DENOISER_KIND: &str = "denoiser";
pub const CLASSIFIER_KIND: &str = "classifier";
pub const TRANSLATOR_KIND: &str = "translator";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Heldout,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Heldout => "heldout",
        }
    }
}

pub fn split_dir(cfg: &RunConfig, split: Split) -> PathBuf {
    cfg.paths.data_dir.join(split.name())
}

pub fn denoiser_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("denoiser.ckpt")
}

pub fn classifier_path(cfg: &RunConfig) -> PathBuf {
    cfg.paths.checkpoint_dir.join("classifier.ckpt")
}

pub fn translator_path(cfg: &RunConfig, variant: I2IVariant) -> PathBuf {
    cfg.paths.checkpoint_dir.join(format!("i2i-{variant}.ckpt"))
}

fn missing(what: impl Into<String>, command: &str) -> Error {
    Error::MissingPrerequisite { what: what.into(), command: format!("ddslab {command} --config <config.json>") }
}

/// Generates and exports both dataset splits.
pub fn gen_data(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = sample_dataset(cfg.stream("data-train"), cfg.data.train_size, cfg.data.canvas)?;
    let heldout = sample_dataset(cfg.stream("data-heldout"), cfg.data.heldout_size, cfg.data.canvas)?;
    export_dataset(&train, &split_dir(cfg, Split::Train))?;
    export_dataset(&heldout, &split_dir(cfg, Split::Heldout))?;
    info!("wrote {} + {} items under {}", train.len(), heldout.len(), cfg.paths.data_dir.display());
    Ok((train, heldout))
}

pub fn load_split(cfg: &RunConfig, split: Split) -> Result<Dataset> {
    let dir = split_dir(cfg, split);
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(missing(format!("dataset {}", dir.display()), "gen-data"));
    }
    let d = import_dataset(&dir)?;
    if d.canvas != cfg.data.canvas {
        return Err(Error::Config(format!("dataset {} has canvas {}, config says {}", dir.display(), d.canvas, cfg.data.canvas)));
    }
    Ok(d)
}

pub fn captioned(d: &Dataset) -> Vec<TrainPair> {
    d.items.iter().map(|(i, s)| (i.clone(), s.caption())).collect()
}

/// Validation batch stored with the denoiser.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidationRecord {
    pub pairs: usize,
    pub seed: u64,
    pub loss: f64,
}

/// Training stream position: the stream seed and how many steps drew from it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    pub steps_completed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserMeta {
    pub schedule: NoiseSchedule,
    pub arch: DenoiserConfig,
    pub train: TrainConfig,
    pub final_train_loss: Option<f64>,
    pub validation: ValidationRecord,
    pub rng: RngState,
}

/// Recomputes the stored validation loss.
pub fn revalidate(den: &Denoiser, meta: &DenoiserMeta, heldout: &Dataset) -> Result<f64> {
    let pairs = captioned(heldout);
    let n = meta.validation.pairs.min(pairs.len());
    validation_loss(den, &pairs[..n], meta.validation.seed, false)
}

pub fn train_denoiser_stage(cfg: &RunConfig) -> Result<(Denoiser, DenoiserMeta)> {
    let train = load_split(cfg, Split::Train)?;
    let heldout = load_split(cfg, Split::Heldout)?;
    let schedule = NoiseSchedule::cosine();
    let (den, log) = train_denoiser(&captioned(&train), schedule, &cfg.denoiser.arch, &cfg.denoiser.train)?;
    let mut meta = DenoiserMeta {
        schedule,
        arch: cfg.denoiser.arch.clone(),
        train: cfg.denoiser.train.clone(),
        final_train_loss: log.loss.last().map(|&(_, l)| l),
        validation: ValidationRecord { pairs: cfg.denoiser.validation_pairs, seed: cfg.stream("validation"), loss: 0.0 },
        rng: RngState { seed: cfg.denoiser.train.seed, steps_completed: cfg.denoiser.train.steps },
    };
    meta.validation.loss = revalidate(&den, &meta, &heldout)?;
    let path = denoiser_path(cfg);
    Checkpoint::new(DENOISER_KIND, &meta, den.params().clone())?.save(&path)?;
    let mut w = csv::Writer::from_path(path.with_file_name("denoiser_loss.csv"))?;
    w.write_record(["step", "loss"])?;
    for (step, loss) in &log.loss {
        w.write_record([step.to_string(), loss.to_string()])?;
    }
    w.flush()?;
    info!("denoiser validation loss {:.6}, saved to {}", meta.validation.loss, path.display());
    Ok((den, meta))
}

pub fn load_denoiser(path: &Path) -> Result<(Denoiser, DenoiserMeta)> {
    let c = Checkpoint::load_kind(path, DENOISER_KIND)?;
    let meta: DenoiserMeta = c.meta_as(path)?;
    let den = Denoiser::from_params(meta.arch.clone(), meta.schedule, c.params)?;
    Ok((den, meta))
}

pub fn load_denoiser_for(cfg: &RunConfig) -> Result<(Denoiser, DenoiserMeta)> {
    let path = denoiser_path(cfg);
    if !path.exists() {
        return Err(missing(format!("denoiser checkpoint {}", path.display()), "train-denoiser"));
    }
    let (den, meta) = load_denoiser(&path)?;
    if meta.arch != cfg.denoiser.arch {
        return Err(Error::Config(format!("{} was trained with a different architecture", path.display())));
    }
    Ok((den, meta))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierMeta {
    pub canvas: ImageDims,
    pub config: ClassifierConfig,
    pub heldout: HeadAccuracy,
}

pub fn train_classifier_stage(cfg: &RunConfig) -> Result<AttrClassifier> {
    let train = load_split(cfg, Split::Train)?;
    let heldout = load_split(cfg, Split::Heldout)?;
    let clf = train_attr_classifier(&train.items, &heldout.items, &cfg.classifier)?;
    let meta = ClassifierMeta { canvas: cfg.data.canvas, config: cfg.classifier.clone(), heldout: clf.heldout.expect("trained classifier") };
    let path = classifier_path(cfg);
    Checkpoint::new(CLASSIFIER_KIND, &meta, clf.params().clone())?.save(&path)?;
    info!("classifier saved to {}", path.display());
    Ok(clf)
}

pub fn load_classifier(path: &Path) -> Result<AttrClassifier> {
    let c = Checkpoint::load_kind(path, CLASSIFIER_KIND)?;
    let meta: ClassifierMeta = c.meta_as(path)?;
    let clf = AttrClassifier::from_params(meta.canvas, meta.config, c.params, Some(meta.heldout))?;
    if let Some(acc) = clf.heldout {
        let (head, accuracy) = acc.weakest();
        if accuracy < crate::eval::ACCURACY_GATE {
            return Err(Error::GateUnmet { head, accuracy, required: crate::eval::ACCURACY_GATE });
        }
    }
    Ok(clf)
}

pub fn load_classifier_for(cfg: &RunConfig) -> Result<AttrClassifier> {
    let path = classifier_path(cfg);
    if !path.exists() {
        return Err(missing(format!("classifier checkpoint {}", path.display()), "train-classifier"));
    }
    let clf = load_classifier(&path)?;
    if clf.canvas() != cfg.data.canvas {
        return Err(Error::Config(format!("{} was trained on a different canvas", path.display())));
    }
    Ok(clf)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranslatorMeta {
    pub arch: DenoiserConfig,
    pub tasks: Vec<TaskSpec>,
    pub variant: I2IVariant,
    pub train: I2ITrainConfig,
    pub denoiser_digest: String,
    pub log: Vec<I2ILogEntry>,
}

/// Source images with captions for translator training.
pub fn translator_data(train: &Dataset) -> Vec<(crate::image::Image, Caption)> {
    captioned(train)
}

pub fn train_translator_with(
    den: &Denoiser,
    train: &Dataset,
    tasks: &[TaskSpec],
    base: &I2ITrainConfig,
    variant: I2IVariant,
) -> Result<(TranslationNetwork, TranslatorMeta)> {
    let net = TranslationNetwork::build(den, tasks)?;
    let cfg = variant.apply(base);
    let (net, log) = train_translator(net, &translator_data(train), &cfg, den)?;
    let meta = TranslatorMeta {
        arch: net.config().clone(),
        tasks: tasks.to_vec(),
        variant,
        train: cfg,
        denoiser_digest: log.denoiser_digest,
        log: log.entries,
    };
    Ok((net, meta))
}

pub fn train_translator_stage(cfg: &RunConfig, variant: I2IVariant) -> Result<(TranslationNetwork, TranslatorMeta)> {
    let (den, _) = load_denoiser_for(cfg)?;
    let train = load_split(cfg, Split::Train)?;
    let (net, meta) = train_translator_with(&den, &train, &cfg.i2i.tasks, &cfg.i2i.train, variant)?;
    let path = translator_path(cfg, variant);
    save_translator(&net, &meta, &path)?;
    info!("translator ({variant}) saved to {}", path.display());
    Ok((net, meta))
}

pub fn save_translator(net: &TranslationNetwork, meta: &TranslatorMeta, path: &Path) -> Result<()> {
    Checkpoint::new(TRANSLATOR_KIND, meta, net.params().clone())?.save(path)
}

pub fn load_translator(path: &Path) -> Result<(TranslationNetwork, TranslatorMeta)> {
    let c = Checkpoint::load_kind(path, TRANSLATOR_KIND)?;
    let meta: TranslatorMeta = c.meta_as(path)?;
    let net = TranslationNetwork::from_params(meta.arch.clone(), meta.tasks.clone(), c.params)?;
    Ok((net, meta))
}

pub fn load_translator_for(cfg: &RunConfig, variant: I2IVariant) -> Result<(TranslationNetwork, TranslatorMeta)> {
    let path = translator_path(cfg, variant);
    if !path.exists() {
        return Err(missing(format!("translator checkpoint {}", path.display()), &format!("train-i2i --variant {variant}")));
    }
    load_translator(&path)
}

/// Writes the translator training log as CSV.
pub fn write_translator_log(meta: &TranslatorMeta, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["iter", "tasks", "omega", "lambda_id", "l_id", "score_norm"])?;
    for e in &meta.log {
        let tasks: Vec<String> = e.tasks.iter().map(|t| t.to_string()).collect();
        w.write_record([
            e.iter.to_string(),
            tasks.join(" "),
            format!("{:.9}", e.omega),
            format!("{:.9}", e.lambda_id),
            format!("{:.9e}", e.l_id),
            format!("{:.9e}", e.score_norm),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Builds every artifact that is missing or was built from a different
/// configuration. The digest of each stage's inputs is kept next to the
/// artifact.
pub fn ensure_all(cfg: &RunConfig, variants: &[I2IVariant]) -> Result<()> {
    let data_key = RunConfig::digest_of(&(&cfg.data, cfg.stream("data-train"), cfg.stream("data-heldout")))?;
    let fresh_data = !stamp_matches(&cfg.paths.data_dir, "data", &data_key);
    if fresh_data {
        gen_data(cfg)?;
        write_stamp(&cfg.paths.data_dir, "data", &data_key)?;
    }
    let den_key = RunConfig::digest_of(&(&data_key, &cfg.denoiser, cfg.stream("validation")))?;
    if !stamp_matches(&cfg.paths.checkpoint_dir, "denoiser", &den_key) {
        train_denoiser_stage(cfg)?;
        write_stamp(&cfg.paths.checkpoint_dir, "denoiser", &den_key)?;
    }
    let clf_key = RunConfig::digest_of(&(&data_key, &cfg.classifier))?;
    if !stamp_matches(&cfg.paths.checkpoint_dir, "classifier", &clf_key) {
        train_classifier_stage(cfg)?;
        write_stamp(&cfg.paths.checkpoint_dir, "classifier", &clf_key)?;
    }
    for &v in variants {
        let key = RunConfig::digest_of(&(&den_key, &cfg.i2i, v))?;
        let label = format!("i2i-{v}");
        if !stamp_matches(&cfg.paths.checkpoint_dir, &label, &key) {
            train_translator_stage(cfg, v)?;
            write_stamp(&cfg.paths.checkpoint_dir, &label, &key)?;
        }
    }
    Ok(())
}

fn stamp_path(dir: &Path, label: &str) -> PathBuf {
    dir.join(format!(".{label}.stamp"))
}

fn stamp_matches(dir: &Path, label: &str, key: &str) -> bool {
    std::fs::read_to_string(stamp_path(dir, label)).is_ok_and(|s| s.trim() == key)
}

fn write_stamp(dir: &Path, label: &str, key: &str) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(stamp_path(dir, label), key)?;
    Ok(())
}
