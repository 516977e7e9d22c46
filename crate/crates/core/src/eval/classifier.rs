use log::info;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::{Batch, Image, ImageDims};
use crate::nn::{
    avg_pool2, avg_pool2_backward, silu, silu_backward, Act, Adam, AdamConfig, Conv2d, ConvCache, Grads, Linear, Mat,
    ParamStore,
};
use crate::rng;
use crate::synthdata::{Background, Caption, SceneSpec, Shape, ShapeColor};

/// Held-out accuracy every head must reach before its scores may be used.
pub const ACCURACY_GATE: f64 = 0.98;

const HEADS: [(&str, usize); 3] = [("shape", Shape::COUNT), ("shape_color", ShapeColor::COUNT), ("background", Background::COUNT)];
const LOGITS: usize = Shape::COUNT + ShapeColor::COUNT + Background::COUNT;
const CHUNK: usize = 16;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierConfig {
    pub width: usize,
    pub hidden: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f32,
    /// Largest standard deviation of the Gaussian noise added to training inputs.
    pub noise_augment: f32,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self { width: 32, hidden: 64, steps: 3000, batch_size: 32, lr: 2e-3, noise_augment: 0.15, seed: 0 }
    }
}

/// Per-head class probabilities of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadProbs {
    pub shape: Vec<f64>,
    pub shape_color: Vec<f64>,
    pub background: Vec<f64>,
}

impl HeadProbs {
    fn head(&self, h: usize) -> &[f64] {
        match h {
            0 => &self.shape,
            1 => &self.shape_color,
            _ => &self.background,
        }
    }

    fn argmax(p: &[f64]) -> usize {
        p.iter().enumerate().fold(0, |best, (i, &v)| if v > p[best] { i } else { best })
    }

    pub fn predicted(&self) -> Caption {
        Caption {
            shape: Shape::from_index(Self::argmax(&self.shape)),
            shape_color: ShapeColor::from_index(Self::argmax(&self.shape_color)),
            background: Background::from_index(Self::argmax(&self.background)),
        }
    }

    /// Product of the probabilities of the caption's non-null attributes.
    pub fn probability_of(&self, target: &Caption) -> f64 {
        let mut p = 1.0;
        if let Some(s) = target.shape {
            p *= self.shape[s.index()];
        }
        if let Some(c) = target.shape_color {
            p *= self.shape_color[c.index()];
        }
        if let Some(b) = target.background {
            p *= self.background[b.index()];
        }
        p
    }
}

/// Per-head accuracy on a labelled set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeadAccuracy {
    pub shape: f64,
    pub shape_color: f64,
    pub background: f64,
}

impl HeadAccuracy {
    pub fn weakest(&self) -> (&'static str, f64) {
        [("shape", self.shape), ("shape_color", self.shape_color), ("background", self.background)]
            .into_iter()
            .fold(("shape", f64::INFINITY), |a, b| if b.1 < a.1 { b } else { a })
    }
}

/// Three-headed convolutional attribute classifier.
#[derive(Debug, Clone)]
pub struct AttrClassifier {
    canvas: ImageDims,
    config: ClassifierConfig,
    params: ParamStore,
    conv1: Conv2d,
    conv2: Conv2d,
    conv3: Conv2d,
    fc1: Linear,
    fc2: Linear,
    /// Held-out accuracy measured when the classifier was trained.
    pub heldout: Option<HeadAccuracy>,
}

struct Tape {
    c1: ConvCache,
    a1: Act,
    c2: ConvCache,
    a2: Act,
    c3: ConvCache,
    a3: Act,
    flat: Mat,
    h: Mat,
    hs: Mat,
}

fn flatten(x: &Act) -> Mat {
    let hw = x.hw();
    let mut m = Mat::zeros(x.b, x.c * hw);
    for c in 0..x.c {
        for b in 0..x.b {
            m.row_mut(b)[c * hw..(c + 1) * hw].copy_from_slice(&x.data[(c * x.b + b) * hw..][..hw]);
        }
    }
    m
}

fn unflatten(m: &Mat, like: &Act) -> Act {
    let hw = like.hw();
    let mut x = Act::like(like);
    for c in 0..x.c {
        for b in 0..x.b {
            x.data[(c * x.b + b) * hw..][..hw].copy_from_slice(&m.row(b)[c * hw..(c + 1) * hw]);
        }
    }
    x
}

fn softmax(z: &[f32]) -> Vec<f64> {
    let max = z.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|&v| f64::from(v - max).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn labels(c: &Caption) -> Result<[usize; 3]> {
    match (c.shape, c.shape_color, c.background) {
        (Some(s), Some(k), Some(b)) => Ok([s.index(), k.index(), b.index()]),
        _ => Err(invalid("classifier training needs fully specified captions")),
    }
}

impl AttrClassifier {
    pub fn new(canvas: ImageDims, config: ClassifierConfig) -> Result<Self> {
        if !canvas.height.is_multiple_of(4) || !canvas.width.is_multiple_of(4) {
            return Err(invalid(format!("classifier canvas {canvas} must be divisible by 4")));
        }
        let mut r = rng::rng_for(config.seed, "classifier-init");
        let mut ps = ParamStore::new();
        let w = config.width;
        let conv1 = Conv2d::new(&mut ps, "clf.conv1", canvas.channels, w, 3, false, &mut r);
        let conv2 = Conv2d::new(&mut ps, "clf.conv2", w, 2 * w, 3, false, &mut r);
        let conv3 = Conv2d::new(&mut ps, "clf.conv3", 2 * w, 2 * w, 3, false, &mut r);
        let flat = 2 * w * canvas.pixels() / 16;
        let fc1 = Linear::new(&mut ps, "clf.fc1", flat, config.hidden, None, &mut r);
        let fc2 = Linear::new(&mut ps, "clf.fc2", config.hidden, LOGITS, None, &mut r);
        Ok(Self { canvas, config, params: ps, conv1, conv2, conv3, fc1, fc2, heldout: None })
    }

    pub fn from_params(canvas: ImageDims, config: ClassifierConfig, params: ParamStore, heldout: Option<HeadAccuracy>) -> Result<Self> {
        let mut c = Self::new(canvas, config)?;
        if c.params.len() != params.len() || c.params.iter().zip(params.iter()).any(|(a, b)| a.0 != b.0 || a.1.shape != b.1.shape) {
            return Err(invalid("classifier parameters do not match the architecture"));
        }
        c.params = params;
        c.heldout = heldout;
        Ok(c)
    }

    pub fn canvas(&self) -> ImageDims {
        self.canvas
    }

    pub fn config(&self) -> &ClassifierConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    fn forward(&self, x: &Batch) -> (Mat, Tape) {
        let ps = &self.params;
        let (h1, c1) = self.conv1.forward(ps, &Act::from_batch(x));
        let a1 = Act { data: silu(&h1.data), ..Act::like(&h1) };
        let (h2, c2) = self.conv2.forward(ps, &avg_pool2(&a1));
        let a2 = Act { data: silu(&h2.data), ..Act::like(&h2) };
        let (h3, c3) = self.conv3.forward(ps, &avg_pool2(&a2));
        let a3 = Act { data: silu(&h3.data), ..Act::like(&h3) };
        let flat = flatten(&a3);
        let h = self.fc1.forward(ps, &flat);
        let hs = Mat { data: silu(&h.data), ..h.clone() };
        let logits = self.fc2.forward(ps, &hs);
        (logits, Tape { c1, a1: h1, c2, a2: h2, c3, a3: h3, flat, h, hs })
    }

    fn backward(&self, grads: &mut Grads, tape: &Tape, dlogits: &Mat) {
        let ps = &self.params;
        let dhs = self.fc2.backward(ps, grads, &tape.hs, dlogits);
        let dh = Mat { data: silu_backward(&tape.h.data, &dhs.data), ..dhs.clone() };
        let dflat = self.fc1.backward(ps, grads, &tape.flat, &dh);
        let da3 = unflatten(&dflat, &tape.a3);
        let dh3 = Act { data: silu_backward(&tape.a3.data, &da3.data), ..Act::like(&da3) };
        let dp2 = self.conv3.backward(ps, grads, &tape.c3, &dh3, true).unwrap();
        let da2 = avg_pool2_backward(&dp2);
        let dh2 = Act { data: silu_backward(&tape.a2.data, &da2.data), ..Act::like(&da2) };
        let dp1 = self.conv2.backward(ps, grads, &tape.c2, &dh2, true).unwrap();
        let da1 = avg_pool2_backward(&dp1);
        let dh1 = Act { data: silu_backward(&tape.a1.data, &da1.data), ..Act::like(&da1) };
        self.conv1.backward(ps, grads, &tape.c1, &dh1, false);
    }

    fn split(logits: &[f32]) -> HeadProbs {
        let (s, rest) = logits.split_at(Shape::COUNT);
        let (c, b) = rest.split_at(ShapeColor::COUNT);
        HeadProbs { shape: softmax(s), shape_color: softmax(c), background: softmax(b) }
    }

    fn split_probs(logits: &[f32]) -> Vec<f64> {
        let p = Self::split(logits);
        p.shape.into_iter().chain(p.shape_color).chain(p.background).collect()
    }

    /// Head probabilities; images are clamped to `[−1, 1]` first.
    pub fn predict(&self, images: &[Image]) -> Result<Vec<HeadProbs>> {
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(CHUNK) {
            for img in chunk {
                if img.dims() != self.canvas {
                    return Err(Error::ShapeMismatch { expected: self.canvas.to_string(), got: img.dims().to_string() });
                }
            }
            let clamped: Vec<Image> = chunk.iter().map(Image::clamped).collect();
            let (logits, _) = self.forward(&Batch::from_images(&clamped)?);
            out.extend((0..logits.rows).map(|r| Self::split(logits.row(r))));
        }
        Ok(out)
    }

    pub fn accuracy(&self, data: &[(Image, Caption)]) -> Result<HeadAccuracy> {
        let images: Vec<Image> = data.iter().map(|(i, _)| i.clone()).collect();
        let probs = self.predict(&images)?;
        let mut hits = [0usize; 3];
        for (p, (_, cap)) in probs.iter().zip(data) {
            let l = labels(cap)?;
            for (h, hit) in hits.iter_mut().enumerate() {
                if HeadProbs::argmax(p.head(h)) == l[h] {
                    *hit += 1;
                }
            }
        }
        let n = data.len().max(1) as f64;
        Ok(HeadAccuracy { shape: hits[0] as f64 / n, shape_color: hits[1] as f64 / n, background: hits[2] as f64 / n })
    }

    /// Errors naming the weakest head when any head misses the gate.
    pub fn check_gate(&self, heldout: &[(Image, Caption)]) -> Result<HeadAccuracy> {
        let acc = self.accuracy(heldout)?;
        let (head, accuracy) = acc.weakest();
        if accuracy < ACCURACY_GATE {
            return Err(Error::GateUnmet { head, accuracy, required: ACCURACY_GATE });
        }
        Ok(acc)
    }
}

/// Probability the classifier assigns to the target attributes (clip-proxy).
pub fn target_fidelity(clf: &AttrClassifier, image: &Image, target: &Caption) -> Result<f64> {
    Ok(clf.predict(std::slice::from_ref(image))?[0].probability_of(target))
}

/// Train with softmax cross-entropy on every head, then apply the accuracy gate on `heldout`.
pub fn train_attr_classifier(
    train: &[(Image, SceneSpec)],
    heldout: &[(Image, SceneSpec)],
    config: &ClassifierConfig,
) -> Result<AttrClassifier> {
    let first = train.first().ok_or_else(|| invalid("classifier training set is empty"))?;
    let canvas = first.0.dims();
    let mut clf = AttrClassifier::new(canvas, config.clone())?;
    let mut opt = Adam::new(&clf.params, AdamConfig::default());
    let mut grads = Grads::zeros_like(&clf.params);
    let mut r = rng::rng_for(config.seed, "classifier-train");
    for step in 0..config.steps {
        grads.zero();
        let mut loss = 0.0f64;
        for start in (0..config.batch_size).step_by(CHUNK) {
            let k = CHUNK.min(config.batch_size - start);
            let mut x = Batch::zeros(canvas, 0);
            let mut ys = Vec::with_capacity(k);
            for _ in 0..k {
                let (img, spec) = &train[r.gen_range(0..train.len())];
                let sigma = r.gen_range(0.0..=config.noise_augment.max(0.0));
                let noise = rng::normal_vec(&mut r, img.data().len());
                let noisy = Image::from_vec(canvas, img.data().iter().zip(noise).map(|(v, n)| v + sigma * n).collect())?;
                x.push(&noisy.clamped());
                ys.push(labels(&spec.caption())?);
            }
            let (logits, tape) = clf.forward(&x);
            let mut d = Mat::zeros(logits.rows, LOGITS);
            for (i, y) in ys.iter().enumerate() {
                let probs = AttrClassifier::split_probs(logits.row(i));
                let mut off = 0;
                for (h, &(_, count)) in HEADS.iter().enumerate() {
                    for c in 0..count {
                        let p = probs[off + c];
                        let target = if c == y[h] { 1.0 } else { 0.0 };
                        if c == y[h] {
                            loss -= p.max(1e-12).ln();
                        }
                        d.row_mut(i)[off + c] = ((p - target) / config.batch_size as f64) as f32;
                    }
                    off += count;
                }
            }
            clf.backward(&mut grads, &tape, &d);
        }
        if !loss.is_finite() || !grads.all_finite() {
            return Err(Error::Diverged { step, detail: "classifier loss".into() });
        }
        opt.step(&mut clf.params, &grads, config.lr);
    }
    let labelled: Vec<(Image, Caption)> = heldout.iter().map(|(i, s)| (i.clone(), s.caption())).collect();
    let acc = clf.check_gate(&labelled)?;
    info!("classifier held-out accuracy {acc:?}");
    clf.heldout = Some(acc);
    Ok(clf)
}
