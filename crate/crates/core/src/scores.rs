//! Score distillation gradients (SDS, DDS) and the Monte-Carlo diagnostics
//! built on them.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::diffusion::{add_noise_batch, cfg_predict, check_timestep, NoisePredictor, NoiseSchedule};
use crate::error::{invalid, Error, Result};
use crate::eval::stats::mean_stderr;
use crate::image::{Batch, Image, Map2};
use crate::rng;
use crate::synthdata::{Caption, EditMask};

/// Items per guided prediction call in the curve estimators.
const DRAW_BATCH: usize = 32;

/// Where a score came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreMeta {
    pub t: f64,
    pub omega: f64,
    /// Seed of the noise stream, when the noise was drawn internally.
    pub eps_seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreResult {
    pub grad: Image,
    /// Guided prediction `ε^ω(z_t, y, t)`.
    pub branch_cond: Image,
    /// Guided prediction `ε^ω(ẑ_t, ŷ, t)` of the reference branch.
    pub branch_ref: Option<Image>,
    pub meta: ScoreMeta,
}

impl ScoreResult {
    pub fn saliency(&self) -> Map2 {
        saliency_of(&self.grad)
    }
}

/// `w(t)·√ᾱ(t)`: the loss weight times `∂z_t/∂z`.
pub fn residual_scale(sched: &NoiseSchedule, t: f64) -> f64 {
    sched.weight(t) * sched.alpha(t).sqrt()
}

fn scaled_difference(a: &[f32], b: &[f32], scale: f64, out: &mut [f32]) {
    for ((o, &x), &y) in out.iter_mut().zip(a).zip(b) {
        *o = (scale * (f64::from(x) - f64::from(y))) as f32;
    }
}

fn check_draws(z: &Batch, conds: &[Caption], eps: &Batch, t: &[f32]) -> Result<()> {
    if z.dims() != eps.dims() || z.len() != eps.len() {
        return Err(Error::ShapeMismatch { expected: format!("{} x{}", z.dims(), z.len()), got: format!("{} x{}", eps.dims(), eps.len()) });
    }
    if conds.len() != z.len() || t.len() != z.len() {
        return Err(invalid("batch, condition and timestep counts differ"));
    }
    for &ti in t {
        check_timestep(f64::from(ti))?;
    }
    Ok(())
}

/// Batched SDS: `w(t)·√ᾱ(t)·(ε^ω(z_t, y, t) − ε)` per item. Returns the
/// gradients and the guided predictions.
pub fn sds_grad_batch(
    model: &dyn NoisePredictor,
    z: &Batch,
    conds: &[Caption],
    eps: &Batch,
    t: &[f32],
    omega: f64,
) -> Result<(Batch, Batch)> {
    check_draws(z, conds, eps, t)?;
    let sched = *model.schedule();
    let z_t = add_noise_batch(z, eps, t, &sched);
    let pred = cfg_predict(model, &z_t, conds, t, omega)?;
    let mut grad = Batch::zeros(z.dims(), z.len());
    for i in 0..z.len() {
        let s = residual_scale(&sched, f64::from(t[i]));
        scaled_difference(pred.item(i), eps.item(i), s, grad.item_mut(i));
    }
    Ok((grad, pred))
}

/// Batched DDS: `w(t)·√ᾱ(t)·(ε^ω(z_t, y, t) − ε^ω(ẑ_t, ŷ, t))` with the same
/// `(ε, t)` in both branches. Both branches go through one guided call so
/// identical inputs give bitwise-identical predictions. Returns the gradients
/// and the two guided predictions.
#[allow(clippy::too_many_arguments)]
pub fn dds_grad_batch(
    model: &dyn NoisePredictor,
    z: &Batch,
    conds: &[Caption],
    zhat: &Batch,
    ref_conds: &[Caption],
    eps: &Batch,
    t: &[f32],
    omega: f64,
) -> Result<(Batch, Batch, Batch)> {
    check_draws(z, conds, eps, t)?;
    check_draws(zhat, ref_conds, eps, t)?;
    let sched = *model.schedule();
    let n = z.len();
    let both = add_noise_batch(z, eps, t, &sched).concat(&add_noise_batch(zhat, eps, t, &sched));
    let all_conds: Vec<Caption> = conds.iter().chain(ref_conds).copied().collect();
    let all_t: Vec<f32> = t.iter().chain(t).copied().collect();
    let pred = cfg_predict(model, &both, &all_conds, &all_t, omega)?;
    let (cond, reference) = (pred.slice(0..n), pred.slice(n..2 * n));
    let mut grad = Batch::zeros(z.dims(), n);
    for i in 0..n {
        let s = residual_scale(&sched, f64::from(t[i]));
        scaled_difference(cond.item(i), reference.item(i), s, grad.item_mut(i));
    }
    Ok((grad, cond, reference))
}

fn single(img: &Image) -> Result<Batch> {
    Batch::from_images([img])
}

/// Score distillation gradient with respect to the image itself.
pub fn sds_grad(model: &dyn NoisePredictor, z: &Image, y: &Caption, eps: &Image, t: f64, omega: f64) -> Result<ScoreResult> {
    check_timestep(t)?;
    z.ensure_same_dims(eps)?;
    let (grad, pred) = sds_grad_batch(model, &single(z)?, std::slice::from_ref(y), &single(eps)?, &[t as f32], omega)?;
    Ok(ScoreResult { grad: grad.image(0), branch_cond: pred.image(0), branch_ref: None, meta: ScoreMeta { t, omega, eps_seed: None } })
}

/// Delta denoising gradient. The reference branch is a constant: nothing is
/// ever reported with respect to `ẑ`.
#[allow(clippy::too_many_arguments)]
pub fn dds_grad(
    model: &dyn NoisePredictor,
    z: &Image,
    y: &Caption,
    zhat: &Image,
    yhat: &Caption,
    eps: &Image,
    t: f64,
    omega: f64,
) -> Result<ScoreResult> {
    check_timestep(t)?;
    z.ensure_same_dims(zhat)?;
    z.ensure_same_dims(eps)?;
    let (grad, cond, reference) = dds_grad_batch(
        model,
        &single(z)?,
        std::slice::from_ref(y),
        &single(zhat)?,
        std::slice::from_ref(yhat),
        &single(eps)?,
        &[t as f32],
        omega,
    )?;
    Ok(ScoreResult {
        grad: grad.image(0),
        branch_cond: cond.image(0),
        branch_ref: Some(reference.image(0)),
        meta: ScoreMeta { t, omega, eps_seed: None },
    })
}

/// Per-pixel L2 norm over channels, scaled so the maximum is 1.
pub fn saliency_of(grad: &Image) -> Map2 {
    let d = grad.dims();
    let mut map = Map2::zeros(d.height, d.width);
    for c in 0..d.channels {
        for (m, &g) in map.data.iter_mut().zip(&grad.data()[c * d.pixels()..(c + 1) * d.pixels()]) {
            *m += g * g;
        }
    }
    for m in &mut map.data {
        *m = m.sqrt();
    }
    let max = map.max();
    if max > 0.0 {
        for m in &mut map.data {
            *m /= max;
        }
    }
    map
}

/// Fraction of a map's total mass that lies inside the mask; 0 for an empty map.
pub fn mass_inside(map: &Map2, mask: &EditMask) -> f64 {
    let (mut inside, mut total) = (0.0f64, 0.0f64);
    for (&v, &m) in map.data.iter().zip(mask.as_slice()) {
        total += f64::from(v);
        if m {
            inside += f64::from(v);
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Monte-Carlo estimate of the expected SDS gradient at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    pub t: f64,
    pub mean: Image,
    /// `√(Σ_p s_p² / n)`: the expected L2 distance of `mean` from its limit.
    pub stderr: f64,
    pub n: usize,
}

impl BiasEstimate {
    pub fn norm(&self) -> f64 {
        self.mean.norm_l2()
    }
}

fn draw_stream(seed: u64, item: usize, t_index: usize) -> rng::Rng {
    rng::rng(rng::derive_index(rng::derive_index(seed, item as u64), t_index as u64))
}

fn check_grid(t_grid: &[f64], n: usize) -> Result<()> {
    if n == 0 {
        return Err(invalid("need at least one draw"));
    }
    if t_grid.is_empty() {
        return Err(invalid("empty timestep grid"));
    }
    t_grid.iter().try_for_each(|&t| check_timestep(t))
}

/// Mean SDS gradient of a (matched) pair over `n` fresh noise draws per grid
/// timestep. For a matched pair this estimates the bias component.
pub fn estimate_bias(
    model: &dyn NoisePredictor,
    zhat: &Image,
    yhat: &Caption,
    n: usize,
    t_grid: &[f64],
    omega: f64,
    seed: u64,
) -> Result<Vec<BiasEstimate>> {
    check_grid(t_grid, n)?;
    let dims = zhat.dims();
    let len = dims.len();
    let mut out = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let mut r = draw_stream(seed, 0, j);
        let mut sum = vec![0.0f64; len];
        let mut sum2 = vec![0.0f64; len];
        let mut done = 0;
        while done < n {
            let k = DRAW_BATCH.min(n - done);
            let z = Batch::from_images(std::iter::repeat_n(zhat, k))?;
            let eps = Batch::from_vec(dims, k, rng::normal_vec(&mut r, len * k))?;
            let (g, _) = sds_grad_batch(model, &z, &vec![*yhat; k], &eps, &vec![t as f32; k], omega)?;
            for i in 0..k {
                for ((s, s2), &v) in sum.iter_mut().zip(&mut sum2).zip(g.item(i)) {
                    *s += f64::from(v);
                    *s2 += f64::from(v) * f64::from(v);
                }
            }
            done += k;
        }
        let nf = n as f64;
        let mean: Vec<f32> = sum.iter().map(|s| (s / nf) as f32).collect();
        let stderr = if n > 1 {
            let var: f64 = sum.iter().zip(&sum2).map(|(s, s2)| ((s2 - s * s / nf) / (nf - 1.0)).max(0.0)).sum();
            (var / nf).sqrt()
        } else {
            f64::NAN
        };
        out.push(BiasEstimate { t, mean: Image::from_vec(dims, mean)?, stderr, n });
    }
    Ok(out)
}

/// One point of a diagnostic curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Number of per-item values averaged.
    pub n: usize,
    /// Draws dropped because a gradient had zero norm.
    pub excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Curve {
    pub condition_set: String,
    pub points: Vec<CurvePoint>,
}

impl Curve {
    pub fn means(&self) -> Vec<f64> {
        self.points.iter().map(|p| p.mean).collect()
    }

    /// True when `self` lies strictly above `other` at every interior grid point.
    pub fn dominates_interior(&self, other: &Curve) -> bool {
        let n = self.points.len().min(other.points.len());
        n > 2 && (1..n - 1).all(|i| self.points[i].mean > other.points[i].mean)
    }
}

/// `E‖∇L_SDS‖₂` against `t`: for each pair the mean gradient norm over `n`
/// draws, then averaged over pairs (stderr across pairs). Pair `i` uses the
/// same noise stream whatever its caption, so two condition sets built from
/// the same images are compared on common draws.
pub fn sds_norm_curve(
    model: &dyn NoisePredictor,
    pairs: &[(Image, Caption)],
    t_grid: &[f64],
    n: usize,
    omega: f64,
    seed: u64,
    condition_set: &str,
) -> Result<Curve> {
    check_grid(t_grid, n)?;
    if pairs.is_empty() {
        return Err(invalid("no pairs"));
    }
    let dims = model.dims();
    let len = dims.len();
    let mut points = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let mut per_pair = Vec::with_capacity(pairs.len());
        for (p, (img, cap)) in pairs.iter().enumerate() {
            let mut r = draw_stream(seed, p, j);
            let mut total = 0.0f64;
            let mut done = 0;
            while done < n {
                let k = DRAW_BATCH.min(n - done);
                let z = Batch::from_images(std::iter::repeat_n(img, k))?;
                let eps = Batch::from_vec(dims, k, rng::normal_vec(&mut r, len * k))?;
                let (g, _) = sds_grad_batch(model, &z, &vec![*cap; k], &eps, &vec![t as f32; k], omega)?;
                for i in 0..k {
                    total += g.item(i).iter().map(|&v| f64::from(v) * f64::from(v)).sum::<f64>().sqrt();
                }
                done += k;
            }
            per_pair.push(total / n as f64);
        }
        let (mean, stderr) = mean_stderr(&per_pair);
        points.push(CurvePoint { t, mean, stderr, n: per_pair.len(), excluded: 0 });
    }
    Ok(Curve { condition_set: condition_set.to_string(), points })
}

/// Two image–caption pairs scored on shared draws.
#[derive(Debug, Clone, PartialEq)]
pub struct Quad {
    pub z: Image,
    pub y: Caption,
    pub zhat: Image,
    pub yhat: Caption,
}

/// Cosine similarity of flattened vectors; `None` when either has zero norm.
pub fn cosine(a: &[f32], b: &[f32]) -> Option<f64> {
    let (mut ab, mut aa, mut bb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (f64::from(x), f64::from(y));
        ab += x * y;
        aa += x * x;
        bb += y * y;
    }
    (aa > 0.0 && bb > 0.0).then(|| (ab / (aa.sqrt() * bb.sqrt())).clamp(-1.0, 1.0))
}

/// Mean cosine similarity of `∇L_SDS(z, y)` and `∇L_SDS(ẑ, ŷ)` under shared
/// `(ε, t)` against `t`. Each quad contributes its mean over the `n` draws;
/// zero-norm draws are excluded and counted.
pub fn grad_cosine_curve(
    model: &dyn NoisePredictor,
    quads: &[Quad],
    t_grid: &[f64],
    n: usize,
    omega: f64,
    seed: u64,
    condition_set: &str,
) -> Result<Curve> {
    check_grid(t_grid, n)?;
    if quads.is_empty() {
        return Err(invalid("no quads"));
    }
    let dims = model.dims();
    let len = dims.len();
    let mut points = Vec::with_capacity(t_grid.len());
    for (j, &t) in t_grid.iter().enumerate() {
        let mut per_quad = Vec::with_capacity(quads.len());
        let mut excluded = 0;
        // draws are grouped across quads so each guided call is a full batch
        let jobs: Vec<(usize, usize)> = (0..quads.len()).flat_map(|q| (0..n).map(move |d| (q, d))).collect();
        let mut eps_of = Vec::with_capacity(jobs.len());
        for q in 0..quads.len() {
            let mut r = draw_stream(seed, q, j);
            for _ in 0..n {
                eps_of.push(rng::normal_vec(&mut r, len));
            }
        }
        let mut sums = vec![(0.0f64, 0usize); quads.len()];
        for chunk in jobs.chunks(DRAW_BATCH / 2) {
            let k = chunk.len();
            let mut z = Batch::zeros(dims, 0);
            let mut conds = Vec::with_capacity(2 * k);
            let mut eps = Vec::with_capacity(2 * k * len);
            for &(q, _) in chunk {
                z.push(&quads[q].z);
                conds.push(quads[q].y);
            }
            for &(q, _) in chunk {
                z.push(&quads[q].zhat);
                conds.push(quads[q].yhat);
            }
            for _ in 0..2 {
                for &(q, d) in chunk {
                    eps.extend_from_slice(&eps_of[q * n + d]);
                }
            }
            let eps = Batch::from_vec(dims, 2 * k, eps)?;
            let (g, _) = sds_grad_batch(model, &z, &conds, &eps, &vec![t as f32; 2 * k], omega)?;
            for (i, &(q, _)) in chunk.iter().enumerate() {
                match cosine(g.item(i), g.item(k + i)) {
                    Some(c) => {
                        sums[q].0 += c;
                        sums[q].1 += 1;
                    }
                    None => excluded += 1,
                }
            }
        }
        for (s, c) in sums {
            if c > 0 {
                per_quad.push(s / c as f64);
            }
        }
        let (mean, stderr) = mean_stderr(&per_quad);
        points.push(CurvePoint { t, mean, stderr, n: per_quad.len(), excluded });
    }
    Ok(Curve { condition_set: condition_set.to_string(), points })
}

#[derive(Serialize)]
struct CurveRow<'a> {
    t: f64,
    mean: f64,
    stderr: f64,
    n: usize,
    condition_set: &'a str,
}

/// Writes curves as CSV with columns `t,mean,stderr,n,condition_set`.
pub fn write_curves_csv(path: &Path, curves: &[&Curve]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for c in curves {
        for p in &c.points {
            w.serialize(CurveRow { t: p.t, mean: p.mean, stderr: p.stderr, n: p.n, condition_set: &c.condition_set })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::image::ImageDims;
    use crate::synthdata::{Shape, ShapeColor};

    fn dims() -> ImageDims {
        ImageDims::rgb(3, 3)
    }

    fn ramp(offset: f32) -> Image {
        Image::from_vec(dims(), (0..27).map(|i| ((i as f32 * 0.37 + offset).sin()) * 0.8).collect()).unwrap()
    }

    fn caption(color: ShapeColor) -> Caption {
        Caption { shape: Some(Shape::Circle), shape_color: Some(color), background: None }
    }

    /// Knows the clean image and returns the exact noise, plus an optional
    /// caption-dependent offset; the null branch can be corrupted.
    struct Oracle {
        clean: Image,
        sched: NoiseSchedule,
        offset: f32,
        null_garbage: bool,
    }

    impl Oracle {
        fn exact(clean: Image) -> Self {
            Self { clean, sched: NoiseSchedule::cosine(), offset: 0.0, null_garbage: false }
        }
    }

    impl NoisePredictor for Oracle {
        fn dims(&self) -> ImageDims {
            self.clean.dims()
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.sched
        }
        fn predict(&self, z_t: &Batch, conds: &[Caption], t: &[f32]) -> Result<Batch> {
            let mut out = z_t.clone();
            for i in 0..z_t.len() {
                let (a, b) = self.sched.coefficients(f64::from(t[i]));
                let shift = match conds[i].shape_color {
                    Some(ShapeColor::Red) => self.offset,
                    Some(ShapeColor::Blue) => -self.offset,
                    Some(_) => 0.5 * self.offset,
                    None => 0.0,
                };
                for (k, (o, &c)) in out.item_mut(i).iter_mut().zip(self.clean.data()).enumerate() {
                    *o = if conds[i].is_null() && self.null_garbage {
                        10.0 * (k as f32).cos()
                    } else {
                        ((f64::from(*o) - a * f64::from(c)) / b) as f32 + shift * (k as f32 * 0.1).cos()
                    };
                }
            }
            Ok(out)
        }
    }

    /// Fixed linear map of the noised input, caption-dependent gain.
    struct Linear(NoiseSchedule);

    impl NoisePredictor for Linear {
        fn dims(&self) -> ImageDims {
            dims()
        }
        fn schedule(&self) -> &NoiseSchedule {
            &self.0
        }
        fn predict(&self, z_t: &Batch, conds: &[Caption], _: &[f32]) -> Result<Batch> {
            let mut out = z_t.clone();
            for i in 0..z_t.len() {
                let g = conds[i].shape_color.map_or(0.3, |c| 0.5 + 0.1 * c.index() as f32);
                for (k, v) in out.item_mut(i).iter_mut().enumerate() {
                    *v = g * *v + 0.01 * k as f32;
                }
            }
            Ok(out)
        }
    }

    #[test]
    fn oracle_gives_zero_sds() {
        let z = ramp(0.0);
        let o = Oracle::exact(z.clone());
        let r = sds_grad(&o, &z, &caption(ShapeColor::Red), &ramp(2.0), 0.4, 7.5).unwrap();
        assert!(r.grad.max_abs() < 1e-5);
        for b in estimate_bias(&o, &z, &caption(ShapeColor::Red), 3, &[0.2, 0.8], 7.5, 1).unwrap() {
            assert!(b.mean.max_abs() < 1e-5);
        }
        let curve = sds_norm_curve(&o, &[(z, caption(ShapeColor::Red))], &[0.3, 0.6], 4, 3.0, 0, "m").unwrap();
        assert!(curve.means().iter().all(|m| m.abs() < 1e-4));
    }

    #[test]
    fn omega_zero_is_conditional_residual() {
        let m = Linear(NoiseSchedule::cosine());
        let (z, eps, t) = (ramp(0.0), ramp(1.0), 0.3);
        let y = caption(ShapeColor::Green);
        let r = sds_grad(&m, &z, &y, &eps, t, 0.0).unwrap();
        let z_t = crate::diffusion::add_noise(&z, &eps, t, m.schedule()).unwrap().z_t;
        let cond = m.predict(&Batch::from_images([&z_t]).unwrap(), &[y], &[t as f32]).unwrap().image(0);
        let expect = cond.sub(&eps).scale(m.schedule().alpha(t).sqrt() as f32);
        assert!(r.grad.sub(&expect).max_abs() < 1e-6);
    }

    #[test]
    fn dds_self_annihilates_and_matches_difference_of_sds() {
        let m = Linear(NoiseSchedule::cosine());
        let (z, zh, eps) = (ramp(0.0), ramp(0.7), ramp(3.0));
        let (y, yh) = (caption(ShapeColor::Blue), caption(ShapeColor::Red));
        for &(t, w) in &[(0.1, 0.0), (0.5, 7.5), (0.9, 20.0)] {
            let same = dds_grad(&m, &z, &y, &z, &y, &eps, t, w).unwrap();
            assert!(same.grad.data().iter().all(|&v| v == 0.0));
            let d = dds_grad(&m, &z, &y, &zh, &yh, &eps, t, w).unwrap();
            let a = sds_grad(&m, &z, &y, &eps, t, w).unwrap();
            let b = sds_grad(&m, &zh, &yh, &eps, t, w).unwrap();
            let diff = a.grad.sub(&b.grad);
            assert!(d.grad.sub(&diff).max_abs() < 1e-6);
            assert!(d.branch_ref.is_some());
        }
    }

    #[test]
    fn shared_image_cancels_unconditional_branch() {
        let z = ramp(0.0);
        let eps = ramp(1.5);
        let (y, yh) = (caption(ShapeColor::Red), caption(ShapeColor::Green));
        let (t, w) = (0.45, 5.0);
        let clean = Oracle { offset: 0.2, ..Oracle::exact(z.clone()) };
        let garbage = Oracle { null_garbage: true, offset: 0.2, ..Oracle::exact(z.clone()) };
        let a = dds_grad(&clean, &z, &y, &z, &yh, &eps, t, w).unwrap();
        let b = dds_grad(&garbage, &z, &y, &z, &yh, &eps, t, w).unwrap();
        assert!(a.grad.sub(&b.grad).max_abs() < 1e-4);
        // expected: √ᾱ(1+ω)(ε_φ(y) − ε_φ(ŷ))
        let s = clean.schedule().alpha(t).sqrt() * (1.0 + w);
        for (k, &g) in a.grad.data().iter().enumerate() {
            let expect = s * (0.2 - 0.1) * (k as f64 * 0.1).cos();
            assert!((f64::from(g) - expect).abs() < 1e-4, "{g} vs {expect}");
        }
    }

    #[test]
    fn cosine_extremes() {
        let z = ramp(0.0);
        let same = Quad { z: z.clone(), y: caption(ShapeColor::Red), zhat: z.clone(), yhat: caption(ShapeColor::Red) };
        let m = Linear(NoiseSchedule::cosine());
        let c = grad_cosine_curve(&m, &[same], &[0.3, 0.7], 3, 7.5, 0, "same").unwrap();
        assert!(c.means().iter().all(|v| (v - 1.0).abs() < 1e-9));

        let o = Oracle { offset: 0.3, ..Oracle::exact(z.clone()) };
        let neg = Quad { z: z.clone(), y: caption(ShapeColor::Red), zhat: z.clone(), yhat: caption(ShapeColor::Blue) };
        let c = grad_cosine_curve(&o, &[neg], &[0.3, 0.7], 3, 2.0, 0, "neg").unwrap();
        assert!(c.means().iter().all(|v| (v + 1.0).abs() < 1e-4), "{:?}", c.means());
    }

    #[test]
    fn zero_norm_draws_are_excluded() {
        let z = ramp(0.0);
        let o = Oracle::exact(z.clone());
        let q = Quad { z: z.clone(), y: caption(ShapeColor::Red), zhat: z, yhat: caption(ShapeColor::Red) };
        let c = grad_cosine_curve(&o, &[q], &[0.5], 4, 1.0, 0, "zero");
        // the exact oracle gives gradients that are zero up to rounding
        let c = c.unwrap();
        assert_eq!(c.points[0].n + usize::from(c.points[0].excluded == 4), 1);
        assert_eq!(cosine(&[0.0, 0.0], &[1.0, 0.0]), None);
    }

    #[test]
    fn saliency_limits() {
        let u = Image::filled(dims(), -0.3);
        assert!(saliency_of(&u).data.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        assert!(saliency_of(&Image::zeros(dims())).data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bias_estimate_single_draw_and_stderr_scaling() {
        let m = Linear(NoiseSchedule::cosine());
        let z = ramp(0.0);
        let y = caption(ShapeColor::Yellow);
        let one = estimate_bias(&m, &z, &y, 1, &[0.5], 4.0, 11).unwrap();
        let mut r = draw_stream(11, 0, 0);
        let eps = Image::from_vec(dims(), rng::normal_vec(&mut r, 27)).unwrap();
        let direct = sds_grad(&m, &z, &y, &eps, 0.5, 4.0).unwrap();
        assert!(one[0].mean.sub(&direct.grad).max_abs() < 1e-6);

        let small = estimate_bias(&m, &z, &y, 400, &[0.5], 4.0, 1).unwrap();
        let large = estimate_bias(&m, &z, &y, 1600, &[0.5], 4.0, 2).unwrap();
        let ratio = small[0].stderr / large[0].stderr;
        assert!((ratio - 2.0).abs() < 0.2, "{ratio}");
        let gap = (small[0].norm() - large[0].norm()).abs();
        assert!(gap < 4.0 * (small[0].stderr.powi(2) + large[0].stderr.powi(2)).sqrt());
    }

    #[test]
    fn rejects_bad_inputs() {
        let m = Linear(NoiseSchedule::cosine());
        let z = ramp(0.0);
        let y = caption(ShapeColor::Red);
        assert!(sds_grad(&m, &z, &y, &z, 1.0, 1.0).is_err());
        let other = Image::zeros(ImageDims::rgb(2, 2));
        assert!(dds_grad(&m, &z, &y, &other, &y, &z, 0.5, 1.0).is_err());
        assert!(estimate_bias(&m, &z, &y, 0, &[0.5], 1.0, 0).is_err());
    }
}
