//! Feed-forward multi-task image-to-image translation trained with DDS.
//!
//! The generator is a copy of the denoiser network with a residual output,
//! `g(ẑ | j) = ẑ + UNet(ẑ; time = τ, cond = k_j)`, where `k_j` is a learned
//! per-task vector in the condition slot and `τ` a learned vector in the
//! time-feature slot.

use std::f64::consts::PI;

use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::diffusion::{time_features, Denoiser, DenoiserConfig, NoisePredictor};
use crate::error::{invalid, Error, Result};
use crate::image::{Batch, Image};
use crate::nn::{Act, Adam, AdamConfig, Grads, Init, Mat, ParamId, ParamStore, UNet, UNetTape};
use crate::rng;
use crate::scores::{dds_grad_batch, sds_grad_batch};
use crate::synthdata::Caption;

pub const TASK_EMBEDDINGS: &str = "task.embeddings";
pub const TIME_EMBEDDING: &str = "task.time";
const CHUNK: usize = 4;

/// One translation task: the caption whose embedding initialises `k_j`,
/// and the attributes the target caption overrides on each source caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub name: String,
    pub init_caption_attrs: Caption,
    pub target_caption_attrs: Caption,
}

impl TaskSpec {
    pub fn target_for(&self, source: &Caption) -> Caption {
        source.overridden(&self.target_caption_attrs)
    }
}

/// Which score drives the generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainingScore {
    Dds,
    Sds,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct I2ITrainConfig {
    pub batch: usize,
    pub total_iters: usize,
    pub lr: f32,
    pub lr_warmup_iters: usize,
    pub omega_max: f64,
    /// Cosine warmup of ω from 1; 0 disables the warmup.
    pub omega_warmup_iters: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_cool_iters: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub score: TrainingScore,
    pub log_every: usize,
    pub seed: u64,
}

impl I2ITrainConfig {
    /// Desk-scale schedule.
    pub fn desk() -> Self {
        Self {
            batch: 8,
            total_iters: 20_000,
            lr: 1e-4,
            lr_warmup_iters: 1_000,
            omega_max: 25.0,
            omega_warmup_iters: 4_000,
            lambda_start: 3.0,
            lambda_end: 0.1,
            lambda_cool_iters: 4_000,
            t_min: 0.05,
            t_max: 0.98,
            score: TrainingScore::Dds,
            log_every: 50,
            seed: 0,
        }
    }

    /// The published schedule.
    pub fn paper() -> Self {
        Self {
            batch: 2,
            total_iters: 125_000,
            lr: 1e-5,
            lr_warmup_iters: 10_000,
            omega_warmup_iters: 20_000,
            lambda_cool_iters: 20_000,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.total_iters == 0 {
            return Err(invalid("batch and iteration count must be positive"));
        }
        if !(self.lambda_start >= self.lambda_end && self.lambda_end >= 0.0) {
            return Err(invalid("identity weights must satisfy lambda_start >= lambda_end >= 0"));
        }
        if self.omega_max < 1.0 {
            return Err(invalid("omega_max must be at least 1 (the warmup starts there)"));
        }
        if !(0.0 < self.t_min && self.t_min < self.t_max && self.t_max < 1.0) {
            return Err(invalid("timestep range must satisfy 0 < t_min < t_max < 1"));
        }
        Ok(())
    }
}

/// Training variants compared in the ablation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum I2IVariant {
    Full,
    NoWarmup,
    Sds,
}

impl I2IVariant {
    pub const ALL: [I2IVariant; 3] = [I2IVariant::Full, I2IVariant::NoWarmup, I2IVariant::Sds];

    pub fn name(self) -> &'static str {
        match self {
            I2IVariant::Full => "full",
            I2IVariant::NoWarmup => "no-warmup",
            I2IVariant::Sds => "sds",
        }
    }

    /// The training configuration of this variant derived from `base`.
    pub fn apply(self, base: &I2ITrainConfig) -> I2ITrainConfig {
        let mut c = base.clone();
        match self {
            I2IVariant::Full => c.score = TrainingScore::Dds,
            I2IVariant::NoWarmup => {
                c.score = TrainingScore::Dds;
                c.omega_warmup_iters = 0;
            }
            I2IVariant::Sds => c.score = TrainingScore::Sds,
        }
        c
    }
}

impl std::fmt::Display for I2IVariant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for I2IVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL.into_iter().find(|v| v.name() == s).ok_or_else(|| invalid(format!("unknown variant `{s}`; known: full, no-warmup, sds")))
    }
}

/// Cosine ramp of the guidance scale from 1 to `omega_max`.
pub fn cfg_warmup(iter: usize, cfg: &I2ITrainConfig) -> f64 {
    if iter >= cfg.omega_warmup_iters {
        return cfg.omega_max;
    }
    let p = iter as f64 / cfg.omega_warmup_iters as f64;
    1.0 + (cfg.omega_max - 1.0) * (1.0 - (PI * p).cos()) / 2.0
}

/// Cosine decay of the identity weight from `lambda_start` to `lambda_end`.
pub fn id_weight(iter: usize, cfg: &I2ITrainConfig) -> f64 {
    if iter >= cfg.lambda_cool_iters {
        return cfg.lambda_end;
    }
    let p = iter as f64 / cfg.lambda_cool_iters as f64;
    cfg.lambda_end + (cfg.lambda_start - cfg.lambda_end) * (1.0 + (PI * p).cos()) / 2.0
}

/// Generator parameters plus the task table.
#[derive(Debug, Clone)]
pub struct TranslationNetwork {
    config: DenoiserConfig,
    tasks: Vec<TaskSpec>,
    params: ParamStore,
    net: UNet,
    task_emb: ParamId,
    time_emb: ParamId,
}

impl TranslationNetwork {
    /// Copies the denoiser network; `k_j` starts at the embedding of task
    /// `j`'s init caption and `τ` at the time features of `t = 0.5`.
    pub fn build(denoiser: &Denoiser, tasks: &[TaskSpec]) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid("a translator needs at least one task"));
        }
        let config = denoiser.config().clone();
        let mut ps = ParamStore::new();
        // weights are overwritten below; the stream only shapes the store
        let net = UNet::new(&mut ps, "unet", &config.unet, &mut rng::rng(0));
        let names: Vec<String> = ps.iter().map(|(n, _)| n.to_string()).collect();
        for name in names {
            let dst = ps.id_of(&name).unwrap();
            let src = denoiser.params().id_of(&name).ok_or_else(|| invalid(format!("denoiser lacks `{name}`")))?;
            ps.get_mut(dst).copy_from_slice(denoiser.params().get(src));
        }
        let e = config.unet.emb_dim;
        let mut rows = Vec::with_capacity(tasks.len() * e);
        for t in tasks {
            rows.extend(denoiser.caption_embedding(&t.init_caption_attrs));
        }
        let mut r = rng::rng(0);
        let task_emb = ps.add(TASK_EMBEDDINGS, &[tasks.len(), e], Init::Values(rows), &mut r);
        let tf = config.unet.time_features;
        let time_emb = ps.add(TIME_EMBEDDING, &[tf], Init::Values(time_features(0.5, tf)), &mut r);
        Ok(Self { config, tasks: tasks.to_vec(), params: ps, net, task_emb, time_emb })
    }

    /// Rebuilds a stored network; names and shapes must match.
    pub fn from_params(config: DenoiserConfig, tasks: Vec<TaskSpec>, params: ParamStore) -> Result<Self> {
        if tasks.is_empty() {
            return Err(invalid("a translator needs at least one task"));
        }
        let mut ps = ParamStore::new();
        let mut r = rng::rng(0);
        let net = UNet::new(&mut ps, "unet", &config.unet, &mut r);
        let task_emb = ps.add(TASK_EMBEDDINGS, &[tasks.len(), config.unet.emb_dim], Init::Zeros, &mut r);
        let time_emb = ps.add(TIME_EMBEDDING, &[config.unet.time_features], Init::Zeros, &mut r);
        if ps.len() != params.len() || ps.iter().zip(params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape != b.1.shape) {
            return Err(invalid("translator parameters do not match the architecture"));
        }
        Ok(Self { config, tasks, params, net, task_emb, time_emb })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Mutable access for tests that corrupt individual rows.
    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn task_index(&self, name: &str) -> Result<usize> {
        self.tasks.iter().position(|t| t.name == name).ok_or_else(|| {
            let known: Vec<&str> = self.tasks.iter().map(|t| t.name.as_str()).collect();
            invalid(format!("unknown task `{name}`; known: {}", known.join(", ")))
        })
    }

    fn inputs(&self, tasks: &[usize]) -> (Mat, Mat) {
        let e = self.config.unet.emb_dim;
        let tf = self.config.unet.time_features;
        let mut time = Mat::zeros(tasks.len(), tf);
        let mut cond = Mat::zeros(tasks.len(), e);
        for (i, &j) in tasks.iter().enumerate() {
            time.row_mut(i).copy_from_slice(self.params.get(self.time_emb));
            cond.row_mut(i).copy_from_slice(&self.params.get(self.task_emb)[j * e..(j + 1) * e]);
        }
        (time, cond)
    }

    fn forward_chunk(&self, x: &Batch, tasks: &[usize]) -> (Batch, UNetTape) {
        let (time, cond) = self.inputs(tasks);
        let (res, tape) = self.net.forward(&self.params, &Act::from_batch(x), &time, &cond);
        let mut out = res.to_batch();
        for (o, v) in out.data_mut().iter_mut().zip(x.data()) {
            *o += v;
        }
        (out, tape)
    }

    fn backward_chunk(&self, grads: &mut Grads, tape: &UNetTape, tasks: &[usize], d_out: &Batch) {
        let g = self.net.backward(&self.params, grads, tape, &Act::from_batch(d_out));
        let e = self.config.unet.emb_dim;
        for (i, &j) in tasks.iter().enumerate() {
            for (d, v) in grads.get_mut(self.task_emb)[j * e..(j + 1) * e].iter_mut().zip(g.cond_in.row(i)) {
                *d += v;
            }
            for (d, v) in grads.get_mut(self.time_emb).iter_mut().zip(g.time_in.row(i)) {
                *d += v;
            }
        }
    }

    /// Raw generator output for a batch (unclamped).
    pub fn generate(&self, x: &Batch, tasks: &[usize]) -> Result<Batch> {
        if x.dims() != self.config.canvas {
            return Err(Error::ShapeMismatch { expected: self.config.canvas.to_string(), got: x.dims().to_string() });
        }
        if tasks.len() != x.len() {
            return Err(invalid("one task index per image"));
        }
        if let Some(&j) = tasks.iter().find(|&&j| j >= self.tasks.len()) {
            return Err(invalid(format!("task index {j} out of range (0..{})", self.tasks.len())));
        }
        let mut out = Batch::zeros(x.dims(), 0);
        for start in (0..x.len()).step_by(CHUNK) {
            let r = start..(start + CHUNK).min(x.len());
            out.extend(&self.forward_chunk(&x.slice(r.clone()), &tasks[r]).0);
        }
        Ok(out)
    }
}

/// Single feed-forward translation, clamped to `[−1, 1]`.
pub fn translate(net: &TranslationNetwork, image: &Image, task_index: usize) -> Result<Image> {
    if !image.in_range() {
        return Err(invalid("input pixels must lie in [-1, 1]"));
    }
    Ok(net.generate(&Batch::from_images([image])?, &[task_index])?.image(0).clamped())
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2ILogEntry {
    pub iter: usize,
    pub tasks: Vec<usize>,
    pub omega: f64,
    pub lambda_id: f64,
    /// Batch mean of `‖g(ẑ) − ẑ‖² / (H·W)`.
    pub l_id: f64,
    /// Batch mean L2 norm of the score gradient.
    pub score_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct I2ITrainLog {
    pub config: I2ITrainConfig,
    pub entries: Vec<I2ILogEntry>,
    pub denoiser_digest: String,
}

/// Trains the generator against the frozen denoiser. `data` holds source
/// images with their captions; each sample draws an image and a task
/// uniformly, the target caption is the source caption with the task's
/// overrides applied.
pub fn train_translator(
    mut net: TranslationNetwork,
    data: &[(Image, Caption)],
    cfg: &I2ITrainConfig,
    denoiser: &Denoiser,
) -> Result<(TranslationNetwork, I2ITrainLog)> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(invalid("translator training set is empty"));
    }
    let dims = net.config.canvas;
    if denoiser.dims() != dims {
        return Err(Error::ShapeMismatch { expected: dims.to_string(), got: denoiser.dims().to_string() });
    }
    let digest = denoiser.params().digest();
    let mut opt = Adam::new(&net.params, AdamConfig::default());
    let mut grads = Grads::zeros_like(&net.params);
    let mut r = rng::rng_for(cfg.seed, "translator-train");
    let norm = 1.0 / dims.pixels() as f64;
    let mut entries = Vec::new();

    for iter in 0..cfg.total_iters {
        let omega = cfg_warmup(iter, cfg);
        let lambda = id_weight(iter, cfg);
        let mut src = Batch::zeros(dims, 0);
        let mut tasks = Vec::with_capacity(cfg.batch);
        let mut ref_caps = Vec::with_capacity(cfg.batch);
        let mut target_caps = Vec::with_capacity(cfg.batch);
        let mut t = Vec::with_capacity(cfg.batch);
        for _ in 0..cfg.batch {
            let (img, cap) = &data[r.gen_range(0..data.len())];
            let j = r.gen_range(0..net.tasks.len());
            src.push(img);
            tasks.push(j);
            ref_caps.push(*cap);
            target_caps.push(net.tasks[j].target_for(cap));
            t.push(r.gen_range(cfg.t_min..cfg.t_max) as f32);
        }
        let eps = Batch::from_vec(dims, cfg.batch, rng::normal_vec(&mut r, dims.len() * cfg.batch))?;

        let mut out = Batch::zeros(dims, 0);
        let mut tapes = Vec::new();
        for start in (0..cfg.batch).step_by(CHUNK) {
            let rg = start..(start + CHUNK).min(cfg.batch);
            let (o, tape) = net.forward_chunk(&src.slice(rg.clone()), &tasks[rg]);
            out.extend(&o);
            tapes.push(tape);
        }
        let score = match cfg.score {
            TrainingScore::Dds => dds_grad_batch(denoiser, &out, &target_caps, &src, &ref_caps, &eps, &t, omega)?.0,
            TrainingScore::Sds => sds_grad_batch(denoiser, &out, &target_caps, &eps, &t, omega)?.0,
        };
        // d/dg of (1/HW)[⟨sg(score), g⟩ + λ‖g − ẑ‖²], averaged over the batch
        let mut d_out = Batch::zeros(dims, cfg.batch);
        let (mut l_id, mut score_norm) = (0.0f64, 0.0f64);
        let scale = norm / cfg.batch as f64;
        for i in 0..cfg.batch {
            let (g, s, x) = (out.item(i), score.item(i), src.item(i));
            let mut sq = 0.0f64;
            for (k, d) in d_out.item_mut(i).iter_mut().enumerate() {
                let diff = f64::from(g[k] - x[k]);
                sq += diff * diff;
                *d = (scale * (f64::from(s[k]) + 2.0 * lambda * diff)) as f32;
            }
            l_id += sq * norm;
            score_norm += s.iter().map(|&v| f64::from(v).powi(2)).sum::<f64>().sqrt();
        }
        l_id /= cfg.batch as f64;
        score_norm /= cfg.batch as f64;
        if !(l_id.is_finite() && score_norm.is_finite()) {
            return Err(Error::Diverged {
                step: iter,
                detail: format!("omega {omega}, lambda {lambda}, l_id {l_id}, score norm {score_norm}, tasks {tasks:?}"),
            });
        }

        grads.zero();
        for (c, tape) in tapes.iter().enumerate() {
            let rg = c * CHUNK..((c + 1) * CHUNK).min(cfg.batch);
            net.backward_chunk(&mut grads, tape, &tasks[rg.clone()], &d_out.slice(rg));
        }
        if !grads.all_finite() {
            return Err(Error::Diverged { step: iter, detail: format!("non-finite generator gradient (omega {omega}, lambda {lambda})") });
        }
        let warm = if cfg.lr_warmup_iters == 0 { 1.0 } else { ((iter + 1) as f32 / cfg.lr_warmup_iters as f32).min(1.0) };
        opt.step(&mut net.params, &grads, cfg.lr * warm);

        if iter % cfg.log_every.max(1) == 0 || iter + 1 == cfg.total_iters {
            debug!("i2i iter {iter} omega {omega:.2} lambda {lambda:.3} l_id {l_id:.5} score {score_norm:.4}");
            entries.push(I2ILogEntry { iter, tasks, omega, lambda_id: lambda, l_id, score_norm });
        }
    }
    if denoiser.params().digest() != digest {
        return Err(invalid("denoiser parameters changed during translator training"));
    }
    info!("trained translator for {} iterations ({:?})", cfg.total_iters, cfg.score);
    Ok((net, I2ITrainLog { config: cfg.clone(), entries, denoiser_digest: digest }))
}

/// A generator whose parameter gradient can be formed by a vector–Jacobian product.
pub trait Generator {
    fn forward(&self, x: &Image) -> Image;

    /// `(∂g/∂θ)ᵀ·dy` at input `x`.
    fn vjp(&self, x: &Image, dy: &Image) -> Vec<f64>;
}

/// `g_θ(ẑ) = θ ⊙ ẑ`.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearGenerator {
    pub theta: Image,
}

impl Generator for LinearGenerator {
    fn forward(&self, x: &Image) -> Image {
        self.theta.zip_map(x, |a, b| a * b)
    }

    fn vjp(&self, x: &Image, dy: &Image) -> Vec<f64> {
        x.data().iter().zip(dy.data()).map(|(&a, &b)| f64::from(a) * f64::from(b)).collect()
    }
}

/// Parameter gradient of the DDS surrogate `⟨sg(∇_z L_DDS), g_θ(ẑ)⟩` for one
/// draw. Returns the parameter gradient and the pixel-space score at `g_θ(ẑ)`.
#[allow(clippy::too_many_arguments)]
pub fn dds_generator_grad(
    model: &dyn NoisePredictor,
    generator: &dyn Generator,
    zhat: &Image,
    y: &Caption,
    yhat: &Caption,
    eps: &Image,
    t: f64,
    omega: f64,
) -> Result<(Vec<f64>, Image)> {
    let z = generator.forward(zhat);
    let pixel = crate::scores::dds_grad(model, &z, y, zhat, yhat, eps, t, omega)?.grad;
    Ok((generator.vjp(zhat, &pixel), pixel))
}
