use log::{debug, info};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{add_noise_batch, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::image::{Batch, Image, ImageDims};
use crate::nn::{Act, Adam, AdamConfig, Grads, Init, Mat, ParamId, ParamStore, UNet, UNetConfig, UNetTape};
use crate::rng;
use crate::synthdata::{Background, Caption, Shape, ShapeColor};

/// Architecture of the denoiser and the canvas it operates on.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenoiserConfig {
    pub canvas: ImageDims,
    pub unet: UNetConfig,
}

impl DenoiserConfig {
    /// 32×32 canvas, three levels, base width 64 (about 2.5 M parameters).
    pub fn desk() -> Self {
        Self {
            canvas: ImageDims::rgb(32, 32),
            unet: UNetConfig {
                in_channels: 3,
                base_width: 64,
                channel_mults: vec![1, 2, 2],
                emb_dim: 256,
                time_features: 64,
                groups: 8,
            },
        }
    }

    /// 16×16 canvas, two levels, base width 16; trains in minutes on one core.
    pub fn tiny() -> Self {
        Self {
            canvas: ImageDims::rgb(16, 16),
            unet: UNetConfig {
                in_channels: 3,
                base_width: 16,
                channel_mults: vec![1, 2],
                emb_dim: 64,
                time_features: 32,
                groups: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.canvas.channels != self.unet.in_channels {
            return Err(invalid("canvas channels differ from network input channels"));
        }
        if !self.unet.supports(self.canvas.height, self.canvas.width) {
            return Err(invalid(format!("canvas {} does not halve {} times", self.canvas, self.unet.levels() - 1)));
        }
        if !self.unet.time_features.is_multiple_of(2) {
            return Err(invalid("time feature count must be even"));
        }
        Ok(())
    }
}

/// Sinusoidal features of `t ∈ (0,1)` scaled to a 1000-step positional index.
pub fn time_features(t: f32, dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let pos = f64::from(t) * 1000.0;
    let mut out = vec![0.0; dim];
    for i in 0..half {
        let freq = (-(10000f64.ln()) * i as f64 / half as f64).exp();
        out[i] = (pos * freq).sin() as f32;
        out[half + i] = (pos * freq).cos() as f32;
    }
    out
}

/// Conditional noise-prediction network `ε_φ(z_t, y, t)`.
///
/// The condition vector is the sum of one learned row per attribute table;
/// each table's last row is that attribute's null token.
#[derive(Debug, Clone)]
pub struct Denoiser {
    config: DenoiserConfig,
    schedule: NoiseSchedule,
    params: ParamStore,
    net: UNet,
    shape_table: ParamId,
    color_table: ParamId,
    background_table: ParamId,
}

/// Items per forward pass; small chunks keep activations cache-resident.
const CHUNK: usize = 4;

pub const SHAPE_TABLE: &str = "cond.shape";
pub const COLOR_TABLE: &str = "cond.color";
pub const BACKGROUND_TABLE: &str = "cond.background";

impl Denoiser {
    pub fn new(config: DenoiserConfig, schedule: NoiseSchedule, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::rng_for(seed, "denoiser-init");
        let mut ps = ParamStore::new();
        let net = UNet::new(&mut ps, "unet", &config.unet, &mut r);
        let e = config.unet.emb_dim;
        let sd = 1.0 / 3f32.sqrt();
        let shape_table = ps.add(SHAPE_TABLE, &[Shape::COUNT + 1, e], Init::Normal(sd), &mut r);
        let color_table = ps.add(COLOR_TABLE, &[ShapeColor::COUNT + 1, e], Init::Normal(sd), &mut r);
        let background_table = ps.add(BACKGROUND_TABLE, &[Background::COUNT + 1, e], Init::Normal(sd), &mut r);
        Ok(Self { config, schedule, params: ps, net, shape_table, color_table, background_table })
    }

    /// Rebuild from stored parameters; names and shapes must match the architecture exactly.
    pub fn from_params(config: DenoiserConfig, schedule: NoiseSchedule, params: ParamStore) -> Result<Self> {
        let mut d = Self::new(config, schedule, 0)?;
        if d.params.len() != params.len() {
            return Err(invalid(format!("expected {} parameter arrays, found {}", d.params.len(), params.len())));
        }
        for ((na, ta), (nb, tb)) in d.params.iter().zip(params.iter()) {
            if na != nb || ta.shape != tb.shape {
                return Err(invalid(format!("parameter mismatch: `{na}` {:?} vs `{nb}` {:?}", ta.shape, tb.shape)));
            }
        }
        d.params = params;
        Ok(d)
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn net(&self) -> &UNet {
        &self.net
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_scalars()
    }

    fn rows(c: &Caption) -> [usize; 3] {
        [
            c.shape.map_or(Shape::COUNT, Shape::index),
            c.shape_color.map_or(ShapeColor::COUNT, ShapeColor::index),
            c.background.map_or(Background::COUNT, Background::index),
        ]
    }

    fn tables(&self) -> [ParamId; 3] {
        [self.shape_table, self.color_table, self.background_table]
    }

    /// Condition vector of a caption.
    pub fn caption_embedding(&self, caption: &Caption) -> Vec<f32> {
        let e = self.config.unet.emb_dim;
        let mut out = vec![0.0; e];
        for (table, row) in self.tables().into_iter().zip(Self::rows(caption)) {
            for (o, v) in out.iter_mut().zip(&self.params.get(table)[row * e..(row + 1) * e]) {
                *o += v;
            }
        }
        out
    }

    fn cond_matrix(&self, conds: &[Caption]) -> Mat {
        let e = self.config.unet.emb_dim;
        let mut m = Mat::zeros(conds.len(), e);
        for (i, c) in conds.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&self.caption_embedding(c));
        }
        m
    }

    fn time_matrix(&self, t: &[f32]) -> Mat {
        let tf = self.config.unet.time_features;
        let mut m = Mat::zeros(t.len(), tf);
        for (i, &ti) in t.iter().enumerate() {
            m.row_mut(i).copy_from_slice(&time_features(ti, tf));
        }
        m
    }

    fn check_batch(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> Result<()> {
        if z_t.dims() != self.config.canvas {
            return Err(Error::ShapeMismatch { expected: self.config.canvas.to_string(), got: z_t.dims().to_string() });
        }
        if conds.len() != z_t.len() || t.len() != z_t.len() {
            return Err(invalid("batch, condition and timestep counts differ"));
        }
        Ok(())
    }

    fn forward_tape(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> (Batch, UNetTape) {
        let (out, tape) = self.net.forward(&self.params, &Act::from_batch(z_t), &self.time_matrix(t), &self.cond_matrix(conds));
        (out.to_batch(), tape)
    }

    fn backward(&self, grads: &mut Grads, tape: &UNetTape, conds: &[Caption], d_out: &Batch) {
        let g = self.net.backward(&self.params, grads, tape, &Act::from_batch(d_out));
        let e = self.config.unet.emb_dim;
        for (i, c) in conds.iter().enumerate() {
            for (table, row) in self.tables().into_iter().zip(Self::rows(c)) {
                let dst = &mut grads.get_mut(table)[row * e..(row + 1) * e];
                for (d, v) in dst.iter_mut().zip(g.cond_in.row(i)) {
                    *d += v;
                }
            }
        }
    }
}

impl NoisePredictor for Denoiser {
    fn dims(&self) -> ImageDims {
        self.config.canvas
    }

    fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    fn predict(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> Result<Batch> {
        self.check_batch(z_t, conds, t)?;
        let mut out = Batch::zeros(z_t.dims(), 0);
        for start in (0..z_t.len()).step_by(CHUNK) {
            let r = start..(start + CHUNK).min(z_t.len());
            out.extend(&self.forward_tape(&z_t.slice(r.clone()), &conds[r.clone()], &t[r]).0);
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub warmup_steps: usize,
    /// Probability of replacing a caption by the null token.
    pub p_uncond: f64,
    pub t_min: f64,
    pub t_max: f64,
    pub grad_clip: f32,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 20_000,
            batch_size: 64,
            lr: 2e-4,
            warmup_steps: 200,
            p_uncond: 0.1,
            t_min: 0.02,
            t_max: 0.98,
            grad_clip: 1.0,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    /// Mean training loss per logging window, as `(step, loss)`.
    pub loss: Vec<(usize, f64)>,
}

/// A training or validation example.
pub type TrainPair = (Image, Caption);

/// Minimise the Monte-Carlo diffusion loss `w(t)·‖ε_φ(z_t, y, t) − ε‖²`.
pub fn train_denoiser(
    data: &[TrainPair],
    schedule: NoiseSchedule,
    config: &DenoiserConfig,
    train: &TrainConfig,
) -> Result<(Denoiser, TrainLog)> {
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    if train.steps == 0 || train.batch_size == 0 {
        return Err(invalid("steps and batch size must be positive"));
    }
    for (img, _) in data {
        if img.dims() != config.canvas {
            return Err(Error::ShapeMismatch { expected: config.canvas.to_string(), got: img.dims().to_string() });
        }
    }
    let mut model = Denoiser::new(config.clone(), schedule, train.seed)?;
    let mut opt = Adam::new(&model.params, AdamConfig::default());
    let mut grads = Grads::zeros_like(&model.params);
    let mut r = rng::rng_for(train.seed, "denoiser-train");
    let dims = config.canvas;
    let per_item = dims.len();
    let mut log = TrainLog::default();
    let mut window = (0.0f64, 0usize);

    for step in 0..train.steps {
        let mut clean = Batch::zeros(dims, 0);
        let mut conds = Vec::with_capacity(train.batch_size);
        let mut t = Vec::with_capacity(train.batch_size);
        for _ in 0..train.batch_size {
            let (img, cap) = &data[r.gen_range(0..data.len())];
            clean.push(img);
            conds.push(if r.gen_bool(train.p_uncond) { Caption::NULL } else { *cap });
            t.push(r.gen_range(train.t_min..train.t_max) as f32);
        }
        let eps = Batch::from_vec(dims, train.batch_size, rng::normal_vec(&mut r, per_item * train.batch_size))?;
        let z_t = add_noise_batch(&clean, &eps, &t, &schedule);

        let denom = (train.batch_size * per_item) as f64;
        let mut loss = 0.0f64;
        grads.zero();
        for start in (0..train.batch_size).step_by(CHUNK) {
            let r = start..(start + CHUNK).min(train.batch_size);
            let (pred, tape) = model.forward_tape(&z_t.slice(r.clone()), &conds[r.clone()], &t[r.clone()]);
            let mut d_out = Batch::zeros(dims, r.len());
            for (k, i) in r.clone().enumerate() {
                let w = schedule.weight(f64::from(t[i]));
                let scale = (2.0 * w / denom) as f32;
                for ((d, &p), &e) in d_out.item_mut(k).iter_mut().zip(pred.item(k)).zip(eps.item(i)) {
                    let diff = p - e;
                    loss += w * f64::from(diff) * f64::from(diff);
                    *d = scale * diff;
                }
            }
            model.backward(&mut grads, &tape, &conds[r], &d_out);
        }
        loss /= denom;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, detail: format!("loss {loss}") });
        }
        let norm = grads.global_norm();
        if !norm.is_finite() {
            return Err(Error::Diverged { step, detail: "non-finite gradient".into() });
        }
        if train.grad_clip > 0.0 && norm > f64::from(train.grad_clip) {
            grads.scale((f64::from(train.grad_clip) / norm) as f32);
        }
        let warm = if train.warmup_steps == 0 { 1.0 } else { ((step + 1) as f32 / train.warmup_steps as f32).min(1.0) };
        opt.step(&mut model.params, &grads, train.lr * warm);

        window.0 += loss;
        window.1 += 1;
        if window.1 == train.log_every.max(1) || step + 1 == train.steps {
            let mean = window.0 / window.1 as f64;
            log.loss.push((step + 1, mean));
            debug!("denoiser step {} loss {mean:.5}", step + 1);
            window = (0.0, 0);
        }
    }
    if !model.params.all_finite() {
        return Err(Error::Diverged { step: train.steps, detail: "non-finite parameters".into() });
    }
    info!("trained denoiser: {} parameters, final loss {:?}", model.num_parameters(), log.loss.last());
    Ok((model, log))
}

/// Mean diffusion loss over `data` with draws fixed by `seed` (one noise and
/// timestep per item). With `force_null` every caption is replaced by the
/// null token.
pub fn validation_loss(model: &dyn NoisePredictor, data: &[TrainPair], seed: u64, force_null: bool) -> Result<f64> {
    if data.is_empty() {
        return Err(invalid("validation set is empty"));
    }
    let dims = model.dims();
    let sched = *model.schedule();
    let mut r = rng::rng_for(seed, "validation");
    let mut total = 0.0f64;
    let mut count = 0usize;
    for chunk in data.chunks(64) {
        let clean = Batch::from_images(chunk.iter().map(|(i, _)| i))?;
        let conds: Vec<Caption> = chunk.iter().map(|(_, c)| if force_null { Caption::NULL } else { *c }).collect();
        let t: Vec<f32> = (0..chunk.len()).map(|_| r.gen_range(0.02..0.98) as f32).collect();
        let eps = Batch::from_vec(dims, chunk.len(), rng::normal_vec(&mut r, dims.len() * chunk.len()))?;
        let z_t = add_noise_batch(&clean, &eps, &t, &sched);
        let pred = model.predict(&z_t, &conds, &t)?;
        for i in 0..chunk.len() {
            let w = sched.weight(f64::from(t[i]));
            let se: f64 = pred.item(i).iter().zip(eps.item(i)).map(|(p, e)| f64::from(p - e).powi(2)).sum();
            total += w * se / dims.len() as f64;
            count += 1;
        }
    }
    Ok(total / count as f64)
}
