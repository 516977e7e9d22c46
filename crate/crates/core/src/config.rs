//! Run configuration: named presets, JSON overlays and seed fan-out.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::diffusion::{DenoiserConfig, TrainConfig};
use crate::editor::EditSettings;
use crate::error::{Error, Result};
use crate::eval::ClassifierConfig;
use crate::image::ImageDims;
use crate::rng;
use crate::synthdata::{Caption, ShapeColor};
use crate::translator::{I2ITrainConfig, TaskSpec};

pub const RUNS_DIR_ENV: &str = "DDSLAB_RUNS_DIR";
pub const PRESETS: &[&str] = &["desk", "paper", "tiny"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub runs_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub canvas: ImageDims,
    pub train_size: usize,
    pub heldout_size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserBlock {
    pub arch: DenoiserConfig,
    pub train: TrainConfig,
    /// Held-out pairs used for the validation loss stored with the checkpoint.
    pub validation_pairs: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2IBlock {
    pub train: I2ITrainConfig,
    pub tasks: Vec<TaskSpec>,
}

/// Sizes and grids of the scripted experiments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub t_grid: Vec<f64>,
    pub omega: f64,
    pub norm_pairs: usize,
    pub norm_draws: usize,
    pub cosine_quads: usize,
    pub cosine_draws: usize,
    pub edit_tasks: usize,
    pub sweep_tasks: usize,
    pub cfg_omegas: Vec<f64>,
    pub fidelity_threshold: f64,
    pub reg_lambdas: Vec<f64>,
    pub step_counts: Vec<usize>,
    pub i2i_heldout: usize,
    /// Fidelity slack when comparing methods at comparable fidelity.
    pub fidelity_margin: f64,
    pub sample_steps: usize,
    pub sample_omega: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: String,
    pub seed: u64,
    pub paths: Paths,
    pub data: DataConfig,
    pub denoiser: DenoiserBlock,
    pub classifier: ClassifierConfig,
    pub edit: EditSettings,
    pub i2i: I2IBlock,
    pub experiments: ExperimentConfig,
}

fn recolor_task(name: &str, color: ShapeColor) -> TaskSpec {
    let c = Caption { shape_color: Some(color), ..Caption::NULL };
    TaskSpec { name: name.to_string(), init_caption_attrs: c, target_caption_attrs: c }
}

fn default_tasks() -> Vec<TaskSpec> {
    vec![recolor_task("to-blue", ShapeColor::Blue), recolor_task("to-red", ShapeColor::Red)]
}

fn desk() -> RunConfig {
    RunConfig {
        preset: "desk".into(),
        seed: 0,
        paths: Paths { data_dir: "data".into(), checkpoint_dir: "checkpoints".into(), runs_dir: "runs".into() },
        data: DataConfig { canvas: ImageDims::rgb(32, 32), train_size: 8000, heldout_size: 512 },
        denoiser: DenoiserBlock { arch: DenoiserConfig::desk(), train: TrainConfig::default(), validation_pairs: 256 },
        classifier: ClassifierConfig::default(),
        edit: EditSettings::default(),
        i2i: I2IBlock { train: I2ITrainConfig::desk(), tasks: default_tasks() },
        experiments: ExperimentConfig {
            t_grid: vec![0.05, 0.2, 0.35, 0.5, 0.65, 0.8, 0.95],
            omega: 7.5,
            norm_pairs: 100,
            norm_draws: 200,
            cosine_quads: 1000,
            cosine_draws: 1,
            edit_tasks: 32,
            sweep_tasks: 16,
            cfg_omegas: vec![2.0, 5.0, 10.0, 20.0],
            fidelity_threshold: 0.5,
            reg_lambdas: vec![0.0, 0.1, 1.0, 10.0],
            step_counts: vec![25, 50, 100, 200],
            i2i_heldout: 64,
            fidelity_margin: 0.05,
            sample_steps: 50,
            sample_omega: 3.0,
        },
    }
}

fn tiny() -> RunConfig {
    let base = desk();
    RunConfig {
        preset: "tiny".into(),
        data: DataConfig { canvas: ImageDims::rgb(16, 16), train_size: 2000, heldout_size: 256 },
        denoiser: DenoiserBlock {
            arch: DenoiserConfig::tiny(),
            train: TrainConfig { steps: 10_000, batch_size: 32, lr: 1e-3, warmup_steps: 100, log_every: 100, ..TrainConfig::default() },
            validation_pairs: 128,
        },
        i2i: I2IBlock {
            train: I2ITrainConfig {
                batch: 8,
                total_iters: 3000,
                lr: 3e-4,
                lr_warmup_iters: 150,
                omega_warmup_iters: 600,
                lambda_cool_iters: 600,
                ..I2ITrainConfig::desk()
            },
            tasks: default_tasks(),
        },
        ..base
    }
}

fn paper() -> RunConfig {
    let mut c = desk();
    c.preset = "paper".into();
    c.i2i.train = I2ITrainConfig::paper();
    c.experiments.cosine_quads = 10_000;
    c
}

/// The effective configuration of a named preset.
pub fn preset(name: &str) -> Result<RunConfig> {
    match name {
        "desk" => Ok(desk()),
        "paper" => Ok(paper()),
        "tiny" => Ok(tiny()),
        other => Err(Error::Config(format!("unknown preset `{other}`; known: {}", PRESETS.join(", ")))),
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

impl RunConfig {
    /// Expands the overlay's `preset` (default `desk`) and applies the
    /// overlay on top. Unknown keys anywhere are rejected.
    pub fn from_overlay(overlay: Value) -> Result<Self> {
        if !overlay.is_object() {
            return Err(Error::Config("configuration must be a JSON object".into()));
        }
        let name = overlay.get("preset").and_then(Value::as_str).unwrap_or("desk").to_string();
        let mut value = serde_json::to_value(preset(&name)?)?;
        merge(&mut value, overlay);
        let cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        Self::from_overlay(v)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.data.canvas != self.denoiser.arch.canvas {
            return Err(Error::Config(format!(
                "data canvas {} differs from denoiser canvas {}",
                self.data.canvas, self.denoiser.arch.canvas
            )));
        }
        self.denoiser.arch.validate()?;
        self.edit.validate()?;
        self.i2i.train.validate()?;
        if self.i2i.tasks.is_empty() {
            return Err(Error::Config("i2i.tasks is empty".into()));
        }
        if self.data.train_size < 2 || self.data.heldout_size < 2 {
            return Err(Error::Config("datasets need at least two items".into()));
        }
        let e = &self.experiments;
        if e.t_grid.iter().any(|&t| !(t > 0.0 && t < 1.0)) {
            return Err(Error::Config("experiments.t_grid values must lie in (0, 1)".into()));
        }
        Ok(())
    }

    /// Replaces the global seed and re-derives every module seed from it.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.denoiser.train.seed = self.stream("denoiser-train");
        self.classifier.seed = self.stream("classifier-train");
        self.i2i.train.seed = self.stream("i2i-train");
        self
    }

    /// Seed of a named module stream.
    pub fn stream(&self, label: &str) -> u64 {
        rng::derive(self.seed, label)
    }

    /// Applies `DDSLAB_RUNS_DIR` when set.
    pub fn with_env(mut self) -> Self {
        if let Some(dir) = std::env::var_os(RUNS_DIR_ENV) {
            self.paths.runs_dir = dir.into();
        }
        self
    }

    /// Rebases relative paths onto `root`.
    pub fn rooted(mut self, root: &Path) -> Self {
        for p in [&mut self.paths.data_dir, &mut self.paths.checkpoint_dir, &mut self.paths.runs_dir] {
            if p.is_relative() {
                *p = root.join(&*p);
            }
        }
        self
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Short digest of a serialisable part of the configuration.
    pub fn digest_of(part: &impl Serialize) -> Result<String> {
        let bytes = serde_json::to_vec(part)?;
        Ok(Sha256::digest(&bytes).iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}
