use serde::{Deserialize, Serialize};

use super::{cfg_predict, NoisePredictor};
use crate::error::{invalid, Result};
use crate::image::{Batch, Image};
use crate::rng;
use crate::synthdata::Caption;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    /// Timestep of the first reverse step.
    pub t_start: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self { t_start: 0.98 }
    }
}

/// Deterministic DDIM reverse process with guided predictions. Item `i`
/// starts from the noise stream `(seed, i)`, independent of batch size.
pub fn sample_batch(
    model: &dyn NoisePredictor,
    captions: &[Caption],
    omega: f64,
    steps: usize,
    seed: u64,
    cfg: SamplerConfig,
) -> Result<Vec<Image>> {
    if steps < 1 {
        return Err(invalid("sampling needs at least one step"));
    }
    if captions.is_empty() {
        return Ok(Vec::new());
    }
    let dims = model.dims();
    let sched = *model.schedule();
    let n = captions.len();
    let mut data = Vec::with_capacity(n * dims.len());
    for i in 0..n {
        data.extend(rng::normal_vec(&mut rng::rng(rng::derive_index(seed, i as u64)), dims.len()));
    }
    let mut x = Batch::from_vec(dims, n, data)?;
    let times: Vec<f64> = (0..=steps).map(|k| cfg.t_start * (1.0 - k as f64 / steps as f64)).collect();
    let mut x0 = x.clone();
    for k in 0..steps {
        let (t, t_next) = (times[k], times[k + 1]);
        let eps = cfg_predict(model, &x, captions, &vec![t as f32; n], omega)?;
        let (a, b) = sched.coefficients(t);
        let (an, bn) = if t_next > 0.0 { sched.coefficients(t_next) } else { (1.0, 0.0) };
        for i in 0..n {
            let xi = x.item_mut(i);
            let x0i = x0.item_mut(i);
            for ((xv, x0v), &e) in xi.iter_mut().zip(x0i.iter_mut()).zip(eps.item(i)) {
                let x = f64::from(*xv);
                let pred = ((x - b * f64::from(e)) / a).clamp(-1.0, 1.0);
                let e = (x - a * pred) / b;
                *x0v = pred as f32;
                *xv = (an * pred + bn * e) as f32;
            }
        }
    }
    Ok(x0.images())
}

pub fn sample(model: &dyn NoisePredictor, y: &Caption, omega: f64, steps: usize, seed: u64) -> Result<Image> {
    Ok(sample_batch(model, std::slice::from_ref(y), omega, steps, seed, SamplerConfig::default())?.remove(0))
}
