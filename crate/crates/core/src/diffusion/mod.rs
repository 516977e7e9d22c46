//! Noise schedule, forward noising, the conditional denoiser, guided
//! prediction and the reverse sampler.

mod denoiser;
mod sampler;
mod schedule;

pub use denoiser::{
    time_features, train_denoiser, validation_loss, Denoiser, DenoiserConfig, TrainConfig, TrainLog, TrainPair,
};
pub use sampler::{sample, sample_batch, SamplerConfig};
pub use schedule::{NoiseSchedule, ScheduleKind, Weighting};

use crate::error::{invalid, Error, Result};
use crate::image::{Batch, Image, ImageDims};
use crate::synthdata::Caption;

/// Anything that predicts the noise in a noised batch: the trained
/// denoiser, or an analytic stub in tests.
pub trait NoisePredictor: Sync {
    fn dims(&self) -> ImageDims;

    fn schedule(&self) -> &NoiseSchedule;

    /// `ε_φ(z_t, y, t)` for every item of the batch.
    fn predict(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> Result<Batch>;
}

/// A noised image together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisedImage {
    pub z_t: Image,
    pub eps: Image,
    pub t: f64,
}

pub fn check_timestep(t: f64) -> Result<()> {
    if !(t > 0.0 && t < 1.0) {
        return Err(invalid(format!("timestep {t} outside (0, 1)")));
    }
    Ok(())
}

/// `z_t = √ᾱ(t)·z + √(1-ᾱ(t))·ε`.
pub fn add_noise(z: &Image, eps: &Image, t: f64, sched: &NoiseSchedule) -> Result<NoisedImage> {
    check_timestep(t)?;
    z.ensure_same_dims(eps)?;
    let (a, b) = sched.coefficients(t);
    let z_t = noise_with_coefficients(z, eps, a, b);
    Ok(NoisedImage { z_t, eps: eps.clone(), t })
}

pub(crate) fn noise_with_coefficients(z: &Image, eps: &Image, a: f64, b: f64) -> Image {
    let (a, b) = (a as f32, b as f32);
    z.zip_map(eps, |z, e| a * z + b * e)
}

/// Noise every item of a batch with its own timestep.
pub fn add_noise_batch(z: &Batch, eps: &Batch, t: &[f32], sched: &NoiseSchedule) -> Batch {
    let mut out = z.clone();
    for i in 0..z.len() {
        let (a, b) = sched.coefficients(f64::from(t[i]));
        let (a, b) = (a as f32, b as f32);
        for (o, e) in out.item_mut(i).iter_mut().zip(eps.item(i)) {
            *o = a * *o + b * e;
        }
    }
    out
}

/// Classifier-free guided prediction `(1+ω)·ε_φ(z_t,y,t) − ω·ε_φ(z_t,∅,t)`,
/// evaluated with one batched call. Items whose condition is already null
/// return the unconditional prediction unchanged.
pub fn cfg_predict(model: &dyn NoisePredictor, z_t: &Batch, conds: &[Caption], t: &[f32], omega: f64) -> Result<Batch> {
    if conds.len() != z_t.len() || t.len() != z_t.len() {
        return Err(invalid("batch, condition and timestep counts differ"));
    }
    let n = z_t.len();
    let cond_idx: Vec<usize> = (0..n).filter(|&i| !conds[i].is_null()).collect();
    let mut inputs = z_t.clone();
    let mut all_conds: Vec<Caption> = vec![Caption::NULL; n];
    let mut all_t = t.to_vec();
    for &i in &cond_idx {
        inputs.push(&z_t.image(i));
        all_conds.push(conds[i]);
        all_t.push(t[i]);
    }
    let pred = model.predict(&inputs, &all_conds, &all_t)?;
    if !pred.is_finite() {
        return Err(Error::NonFinite("denoiser output".into()));
    }
    let mut out = Batch::from_vec(z_t.dims(), n, pred.data()[..n * z_t.dims().len()].to_vec())?;
    for (k, &i) in cond_idx.iter().enumerate() {
        let c = pred.item(n + k);
        for (o, &cv) in out.item_mut(i).iter_mut().zip(c) {
            *o = ((1.0 + omega) * f64::from(cv) - omega * f64::from(*o)) as f32;
        }
    }
    Ok(out)
}

/// Single-image convenience wrapper around [`cfg_predict`].
pub fn cfg_predict_one(model: &dyn NoisePredictor, z_t: &Image, y: &Caption, t: f64, omega: f64) -> Result<Image> {
    check_timestep(t)?;
    let out = cfg_predict(model, &Batch::from_images([z_t])?, std::slice::from_ref(y), &[t as f32], omega)?;
    Ok(out.image(0))
}
