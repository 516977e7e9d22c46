//! Zero-shot editing by direct pixel optimisation under SDS or DDS.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::NoisePredictor;
use crate::error::{invalid, Error, Result};
use crate::eval::{source_fidelity, target_fidelity, AttrClassifier, CLIP_PROXY, LPIPS_PROXY};
use crate::image::{save_grid, Batch, Image, Map2};
use crate::rng;
use crate::scores::{dds_grad_batch, saliency_of, sds_grad_batch};
use crate::synthdata::{Caption, EditMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Optimizer {
    Sgd,
    Adam,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "method", rename_all = "kebab-case")]
pub enum EditMethod {
    Dds,
    Sds,
    /// SDS plus `λ·(z − ẑ)`.
    SdsReg { lambda: f64 },
}

impl fmt::Display for EditMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Dds => f.write_str("dds"),
            Self::Sds => f.write_str("sds"),
            Self::SdsReg { lambda } => write!(f, "sds-reg({lambda})"),
        }
    }
}

impl FromStr for EditMethod {
    type Err = Error;

    /// `dds`, `sds`, `sds-reg` (λ = 1) or `sds-reg:<λ>`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dds" => Ok(Self::Dds),
            "sds" => Ok(Self::Sds),
            "sds-reg" => Ok(Self::SdsReg { lambda: 1.0 }),
            _ => match s.strip_prefix("sds-reg:").map(str::parse::<f64>) {
                Some(Ok(lambda)) if lambda >= 0.0 => Ok(Self::SdsReg { lambda }),
                _ => Err(invalid(format!("unknown edit method `{s}` (dds, sds, sds-reg, sds-reg:<lambda>)"))),
            },
        }
    }
}

/// Moment decays and stabiliser of the pixel-space Adam variant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PixelAdam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for PixelAdam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Optimisation settings shared by every edit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EditSettings {
    pub omega: f64,
    pub iters: usize,
    pub optimizer: Optimizer,
    pub lr: f64,
    pub lr_decay: f64,
    pub lr_decay_interval: usize,
    /// Step size used when the optimiser is Adam.
    pub adam_lr: f64,
    pub adam: PixelAdam,
    /// Timesteps are drawn from `U(t_min, t_max)` each iteration.
    pub t_min: f64,
    pub t_max: f64,
    /// Keep every k-th iterate (0 keeps none).
    pub trajectory_every: usize,
}

impl Default for EditSettings {
    fn default() -> Self {
        Self {
            omega: 7.5,
            iters: 200,
            optimizer: Optimizer::Sgd,
            lr: 2.0,
            lr_decay: 0.9,
            lr_decay_interval: 20,
            adam_lr: 0.05,
            adam: PixelAdam::default(),
            t_min: 0.05,
            t_max: 0.95,
            trajectory_every: 0,
        }
    }
}

impl EditSettings {
    pub fn validate(&self) -> Result<()> {
        if self.iters < 1 {
            return Err(invalid("an edit needs at least one iteration"));
        }
        if !(self.lr > 0.0 && self.adam_lr > 0.0) {
            return Err(invalid("learning rates must be positive"));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return Err(invalid("lr decay must lie in (0, 1]"));
        }
        if self.lr_decay_interval == 0 {
            return Err(invalid("lr decay interval must be positive"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(invalid("timestep range must satisfy 0 < t_min < t_max < 1"));
        }
        Ok(())
    }

    /// `lr·decay^⌊k / interval⌋` for the active optimiser.
    pub fn lr_at(&self, k: usize) -> f64 {
        let base = match self.optimizer {
            Optimizer::Sgd => self.lr,
            Optimizer::Adam => self.adam_lr,
        };
        base * self.lr_decay.powi((k / self.lr_decay_interval) as i32)
    }
}

/// One edit: move `zhat` (described by `yhat`) towards `y`.
#[derive(Debug, Clone, PartialEq)]
pub struct EditTask {
    pub zhat: Image,
    pub yhat: Caption,
    pub y: Caption,
    pub settings: EditSettings,
    pub seed: u64,
}

impl EditTask {
    /// A task with default settings; `yhat = None` uses the null caption.
    pub fn new(zhat: Image, yhat: Option<Caption>, y: Caption, seed: u64) -> Self {
        Self { zhat, yhat: yhat.unwrap_or(Caption::NULL), y, settings: EditSettings::default(), seed }
    }

    pub fn with_settings(mut self, settings: EditSettings) -> Self {
        self.settings = settings;
        self
    }

    pub fn with_optimizer(mut self, optimizer: Optimizer) -> Self {
        self.settings.optimizer = optimizer;
        self
    }

    pub fn with_omega(mut self, omega: f64) -> Self {
        self.settings.omega = omega;
        self
    }

    pub fn with_iters(mut self, iters: usize) -> Self {
        self.settings.iters = iters;
        self
    }
}

/// Optional per-iteration measurements.
#[derive(Debug, Clone, Copy, Default)]
pub struct Monitor<'a> {
    pub classifier: Option<&'a AttrClassifier>,
    /// Union of the source and target shape masks; off-target MSE uses its complement.
    pub mask: Option<&'a EditMask>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub iter: usize,
    pub lr: f64,
    pub t: f64,
    pub target_fidelity: Option<f64>,
    pub off_target_mse: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditResult {
    pub method: EditMethod,
    /// Final iterate, unclamped.
    pub z_final: Image,
    /// `(iteration, iterate)` every `trajectory_every` iterations.
    pub trajectory: Vec<(usize, Image)>,
    /// `Σ_k Σ_c |Δz|` per pixel.
    pub accumulated_diff: Map2,
    /// Saliency of the update at the trajectory iterations.
    pub update_saliency: Vec<(usize, Map2)>,
    /// Metrics after each iteration (empty without a monitor).
    pub log: Vec<StepLog>,
    /// Share of the total squared update inside the mask, when a mask was given.
    pub in_mask_energy: Option<f64>,
    pub t_range: (f64, f64),
}

impl EditResult {
    pub fn final_fidelity(&self) -> Option<f64> {
        self.log.last().and_then(|l| l.target_fidelity)
    }

    pub fn final_off_target(&self) -> Option<f64> {
        self.log.last().and_then(|l| l.off_target_mse)
    }

    /// First iteration (1-based count) whose fidelity reaches `threshold`.
    pub fn iters_to_fidelity(&self, threshold: f64) -> Option<usize> {
        self.log.iter().find(|l| l.target_fidelity.is_some_and(|f| f >= threshold)).map(|l| l.iter + 1)
    }

    pub fn total_diff(&self) -> f64 {
        self.accumulated_diff.sum()
    }

    /// Writes `z_final.png`, `trajectory.png`, `accumulated_diff.png` and `metrics.csv`.
    pub fn export(&self, zhat: &Image, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.z_final.clamped().save_png(dir.join("z_final.png"))?;
        let mut frames = vec![zhat.clone()];
        frames.extend(self.trajectory.iter().map(|(_, z)| z.clamped()));
        frames.push(self.z_final.clamped());
        save_grid(&frames, frames.len().min(10), dir.join("trajectory.png"))?;
        self.accumulated_diff.save_heatmap(dir.join("accumulated_diff.png"))?;
        let mut w = csv::Writer::from_path(dir.join("metrics.csv"))?;
        w.write_record(["iter", "lr", "t", CLIP_PROXY, LPIPS_PROXY])?;
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        for l in &self.log {
            w.write_record([l.iter.to_string(), l.lr.to_string(), l.t.to_string(), opt(l.target_fidelity), opt(l.off_target_mse)])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs one edit. Each iteration draws a fresh `(t, ε)` from the task's seed
/// stream, so two methods on the same task see the same draws.
pub fn edit(model: &dyn NoisePredictor, task: &EditTask, method: EditMethod, monitor: Monitor<'_>) -> Result<EditResult> {
    let s = &task.settings;
    s.validate()?;
    let dims = task.zhat.dims();
    if dims != model.dims() {
        return Err(Error::ShapeMismatch { expected: model.dims().to_string(), got: dims.to_string() });
    }
    use EditMethod::*;
    if let SdsReg { lambda } = method {
        if lambda.is_nan() || lambda < 0.0 {
            return Err(invalid("lambda must be non-negative"));
        }
    }
    let hw = dims.pixels();
    let norm = 1.0 / hw as f64;
    let mut r = rng::rng_for(task.seed, "edit");
    let zhat_b = Batch::from_images([&task.zhat])?;
    let mut z = task.zhat.clone();
    let mut acc = Map2::zeros(dims.height, dims.width);
    let (mut m1, mut m2) = (vec![0.0f64; dims.len()], vec![0.0f64; dims.len()]);
    let (mut e_in, mut e_all) = (0.0f64, 0.0f64);
    let mut trajectory = Vec::new();
    let mut update_saliency = Vec::new();
    let mut log = Vec::new();

    for k in 0..s.iters {
        let t = r.gen_range(s.t_min..s.t_max) as f32;
        let eps = Batch::from_vec(dims, 1, rng::normal_vec(&mut r, dims.len()))?;
        let z_b = Batch::from_images([&z])?;
        let grad = match method {
            Dds => dds_grad_batch(model, &z_b, &[task.y], &zhat_b, &[task.yhat], &eps, &[t], s.omega)?.0,
            Sds | SdsReg { .. } => sds_grad_batch(model, &z_b, &[task.y], &eps, &[t], s.omega)?.0,
        };
        let lambda = if let SdsReg { lambda } = method { lambda } else { 0.0 };
        let lr = s.lr_at(k);
        let mut update = vec![0.0f32; dims.len()];
        for (i, u) in update.iter_mut().enumerate() {
            let mut g = f64::from(grad.data()[i]);
            if lambda != 0.0 {
                g += lambda * f64::from(z.data()[i] - task.zhat.data()[i]);
            }
            let g = g * norm;
            *u = match s.optimizer {
                Optimizer::Sgd => (-lr * g) as f32,
                Optimizer::Adam => {
                    let PixelAdam { beta1, beta2, eps } = s.adam;
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * g;
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * g * g;
                    let mh = m1[i] / (1.0 - beta1.powi(k as i32 + 1));
                    let vh = m2[i] / (1.0 - beta2.powi(k as i32 + 1));
                    (-lr * mh / (vh.sqrt() + eps)) as f32
                }
            };
        }
        if update.iter().any(|u| !u.is_finite()) {
            return Err(Error::NonFinite(format!("edit update at iteration {k}")));
        }
        for c in 0..dims.channels {
            for p in 0..hw {
                let u = update[c * hw + p];
                z.data_mut()[c * hw + p] += u;
                acc.data[p] += u.abs();
                let e = f64::from(u) * f64::from(u);
                e_all += e;
                if monitor.mask.is_some_and(|m| m.as_slice()[p]) {
                    e_in += e;
                }
            }
        }
        if s.trajectory_every > 0 && (k + 1) % s.trajectory_every == 0 {
            trajectory.push((k + 1, z.clone()));
            update_saliency.push((k + 1, saliency_of(&Image::from_vec(dims, update)?)));
        }
        if monitor.classifier.is_some() || monitor.mask.is_some() {
            let target_fidelity = monitor.classifier.map(|c| target_fidelity(c, &z, &task.y)).transpose()?;
            let off_target_mse = monitor.mask.map(|m| source_fidelity(&z.clamped(), &task.zhat, m)).transpose()?;
            log.push(StepLog { iter: k, lr, t: f64::from(t), target_fidelity, off_target_mse });
        }
    }
    let in_mask_energy = monitor.mask.map(|_| if e_all > 0.0 { e_in / e_all } else { 0.0 });
    Ok(EditResult {
        method,
        z_final: z,
        trajectory,
        accumulated_diff: acc,
        update_saliency,
        log,
        in_mask_energy,
        t_range: (s.t_min, s.t_max),
    })
}

pub fn edit_dds(model: &dyn NoisePredictor, task: &EditTask, monitor: Monitor<'_>) -> Result<EditResult> {
    edit(model, task, EditMethod::Dds, monitor)
}

pub fn edit_sds(model: &dyn NoisePredictor, task: &EditTask, monitor: Monitor<'_>) -> Result<EditResult> {
    edit(model, task, EditMethod::Sds, monitor)
}

pub fn edit_sds_regularized(model: &dyn NoisePredictor, task: &EditTask, lambda_id: f64, monitor: Monitor<'_>) -> Result<EditResult> {
    edit(model, task, EditMethod::SdsReg { lambda: lambda_id }, monitor)
}

/// The same task optimised with SGD and with Adam.
#[derive(Debug, Clone)]
pub struct OptimizerComparison {
    pub sgd: EditResult,
    pub adam: EditResult,
}

impl OptimizerComparison {
    pub fn sgd_in_mask(&self) -> f64 {
        self.sgd.in_mask_energy.unwrap_or(f64::NAN)
    }

    pub fn adam_in_mask(&self) -> f64 {
        self.adam.in_mask_energy.unwrap_or(f64::NAN)
    }
}

/// Runs DDS with both optimisers; `monitor.mask` is required for the energy report.
pub fn compare_optimizers(model: &dyn NoisePredictor, task: &EditTask, monitor: Monitor<'_>) -> Result<OptimizerComparison> {
    if monitor.mask.is_none() {
        return Err(invalid("optimizer comparison needs an edit mask"));
    }
    let sgd = edit(model, &task.clone().with_optimizer(Optimizer::Sgd), EditMethod::Dds, monitor)?;
    let adam = edit(model, &task.clone().with_optimizer(Optimizer::Adam), EditMethod::Dds, monitor)?;
    Ok(OptimizerComparison { sgd, adam })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepSweepRow {
    pub task: usize,
    pub steps: usize,
    pub target_fidelity: f64,
    pub off_target_mse: f64,
}

/// Final metrics of DDS edits for every task at every step count.
pub fn step_sweep(
    model: &dyn NoisePredictor,
    tasks: &[(EditTask, EditMask)],
    step_counts: &[usize],
    classifier: &AttrClassifier,
) -> Result<Vec<StepSweepRow>> {
    if step_counts.is_empty() {
        return Err(invalid("no step counts"));
    }
    if step_counts.contains(&0) {
        return Err(invalid("a step count of 0 is not an edit"));
    }
    let mut rows = Vec::new();
    for (i, (task, mask)) in tasks.iter().enumerate() {
        for &steps in step_counts {
            let res = edit(model, &task.clone().with_iters(steps), EditMethod::Dds, Monitor { classifier: None, mask: None })?;
            let z = res.z_final.clamped();
            rows.push(StepSweepRow {
                task: i,
                steps,
                target_fidelity: target_fidelity(classifier, &z, &task.y)?,
                off_target_mse: source_fidelity(&z, &task.zhat, mask)?,
            });
        }
    }
    Ok(rows)
}
