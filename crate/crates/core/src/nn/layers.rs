use super::gemm::{gemm, View};
use super::{Act, Grads, Init, Mat, ParamId, ParamStore};
use crate::rng::Rng;

/// Square convolution, stride 1, "same" padding; `k` is 1 or 3.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

#[derive(Debug, Clone)]
pub struct ConvCache {
    cols: Vec<f32>,
    b: usize,
    h: usize,
    w: usize,
}

impl Conv2d {
    pub fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, k: usize, zero_init: bool, rng: &mut Rng) -> Self {
        assert!(k == 1 || k == 3, "only 1x1 and 3x3 kernels are supported");
        let fan_in = cin * k * k;
        let init = if zero_init { Init::Zeros } else { Init::Fan { fan_in, gain: 1.0 } };
        let weight = ps.add(format!("{name}.weight"), &[cout, cin, k, k], init, rng);
        let bias = ps.add(format!("{name}.bias"), &[cout], Init::Zeros, rng);
        Self { weight, bias, cin, cout, k }
    }

    fn cols(&self, x: &Act) -> Vec<f32> {
        if self.k == 1 {
            return x.data.clone();
        }
        im2col3(x)
    }

    fn apply(&self, ps: &ParamStore, x: &Act, cols: &[f32]) -> Act {
        let n = x.n();
        let mut data = Vec::with_capacity(self.cout * n);
        for &b in ps.get(self.bias) {
            data.resize(data.len() + n, b);
        }
        let mut out = Act { c: self.cout, b: x.b, h: x.h, w: x.w, data };
        let kk = self.cin * self.k * self.k;
        gemm(self.cout, kk, n, 1.0, View::rm(ps.get(self.weight), kk), View::rm(cols, n), 1.0, &mut out.data);
        out
    }

    pub fn forward(&self, ps: &ParamStore, x: &Act) -> (Act, ConvCache) {
        debug_assert_eq!(x.c, self.cin);
        let cols = self.cols(x);
        let out = self.apply(ps, x, &cols);
        (out, ConvCache { cols, b: x.b, h: x.h, w: x.w })
    }

    pub fn infer(&self, ps: &ParamStore, x: &Act) -> Act {
        if self.k == 1 {
            return self.apply(ps, x, &x.data);
        }
        let cols = im2col3(x);
        self.apply(ps, x, &cols)
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, cache: &ConvCache, dy: &Act, need_dx: bool) -> Option<Act> {
        let n = dy.n();
        let kk = self.cin * self.k * self.k;
        {
            let gb = grads.get_mut(self.bias);
            for (o, chunk) in dy.data.chunks(n).enumerate() {
                gb[o] += chunk.iter().sum::<f32>();
            }
        }
        gemm(self.cout, n, kk, 1.0, View::rm(&dy.data, n), View::rm_t(&cache.cols, n), 1.0, grads.get_mut(self.weight));
        if !need_dx {
            return None;
        }
        let mut dcols = vec![0.0; kk * n];
        gemm(kk, self.cout, n, 1.0, View::rm_t(ps.get(self.weight), kk), View::rm(&dy.data, n), 0.0, &mut dcols);
        if self.k == 1 {
            return Some(Act { c: self.cin, b: cache.b, h: cache.h, w: cache.w, data: dcols });
        }
        let mut dx = Act::zeros(self.cin, cache.b, cache.h, cache.w);
        col2im3(&dcols, &mut dx);
        Some(dx)
    }
}

/// Rows ordered `(channel, ky, kx)`, columns ordered `(batch, y, x)`.
fn im2col3(x: &Act) -> Vec<f32> {
    let (h, w, n) = (x.h, x.w, x.n());
    let mut cols = Vec::with_capacity(x.c * 9 * n);
    for ci in 0..x.c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                for bi in 0..x.b {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            cols.resize(cols.len() + w, 0.0);
                            continue;
                        }
                        let s = &src[(bi * h + sy - 1) * w..][..w];
                        match kx {
                            0 => {
                                cols.push(0.0);
                                cols.extend_from_slice(&s[..w - 1]);
                            }
                            1 => cols.extend_from_slice(s),
                            _ => {
                                cols.extend_from_slice(&s[1..]);
                                cols.push(0.0);
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im3(dcols: &[f32], dx: &mut Act) {
    let (h, w, n, b) = (dx.h, dx.w, dx.n(), dx.b);
    for ci in 0..dx.c {
        let dst = &mut dx.data[ci * n..(ci + 1) * n];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &dcols[((ci * 3 + ky) * 3 + kx) * n..][..n];
                let (x0, x1) = (1usize.saturating_sub(kx), (w + 1 - kx).min(w));
                for bi in 0..b {
                    for y in 0..h {
                        let sy = y + ky;
                        if sy < 1 || sy > h {
                            continue;
                        }
                        let sy = sy - 1;
                        let s = &row[(bi * h + y) * w..][..w];
                        let d = &mut dst[(bi * h + sy) * w..][..w];
                        for xx in x0..x1 {
                            d[xx + kx - 1] += s[xx];
                        }
                    }
                }
            }
        }
    }
}

/// Group normalisation without affine parameters.
#[derive(Debug, Clone, Copy)]
pub struct GroupNorm {
    pub groups: usize,
    pub eps: f32,
}

#[derive(Debug, Clone)]
pub struct GroupNormCache {
    xhat: Act,
    rstd: Vec<f32>,
}

impl GroupNormCache {
    pub fn normalized(&self) -> &Act {
        &self.xhat
    }
}

impl GroupNorm {
    pub fn new(groups: usize) -> Self {
        Self { groups, eps: 1e-5 }
    }

    pub fn forward(&self, x: &Act) -> GroupNormCache {
        assert_eq!(x.c % self.groups, 0, "channels {} not divisible into {} groups", x.c, self.groups);
        let cpg = x.c / self.groups;
        let hw = x.hw();
        let m = (cpg * hw) as f64;
        let mut xhat = Act::like(x);
        let mut rstd = vec![0.0; x.b * self.groups];
        for bi in 0..x.b {
            for g in 0..self.groups {
                let seg = |c: usize| (c * x.b + bi) * hw;
                let (mut s, mut s2) = (0.0f64, 0.0f64);
                for c in g * cpg..(g + 1) * cpg {
                    for &v in &x.data[seg(c)..seg(c) + hw] {
                        s += f64::from(v);
                        s2 += f64::from(v) * f64::from(v);
                    }
                }
                let mean = s / m;
                let var = (s2 / m - mean * mean).max(0.0);
                let r = 1.0 / (var + f64::from(self.eps)).sqrt();
                rstd[bi * self.groups + g] = r as f32;
                let (mean, r) = (mean as f32, r as f32);
                for c in g * cpg..(g + 1) * cpg {
                    let o = seg(c);
                    for i in o..o + hw {
                        xhat.data[i] = (x.data[i] - mean) * r;
                    }
                }
            }
        }
        GroupNormCache { xhat, rstd }
    }

    pub fn backward(&self, cache: &GroupNormCache, dy: &Act) -> Act {
        let xhat = &cache.xhat;
        let cpg = xhat.c / self.groups;
        let hw = xhat.hw();
        let m = (cpg * hw) as f32;
        let mut dx = Act::like(xhat);
        for bi in 0..xhat.b {
            for g in 0..self.groups {
                let seg = |c: usize| (c * xhat.b + bi) * hw;
                let (mut s1, mut s2) = (0.0f32, 0.0f32);
                for c in g * cpg..(g + 1) * cpg {
                    let o = seg(c);
                    for i in o..o + hw {
                        s1 += dy.data[i];
                        s2 += dy.data[i] * xhat.data[i];
                    }
                }
                let r = cache.rstd[bi * self.groups + g];
                let (a, b) = (s1 / m, s2 / m);
                for c in g * cpg..(g + 1) * cpg {
                    let o = seg(c);
                    for i in o..o + hw {
                        dx.data[i] = r * (dy.data[i] - a - xhat.data[i] * b);
                    }
                }
            }
        }
        dx
    }
}

/// Per-channel `γ·x + β`.
#[derive(Debug, Clone)]
pub struct ChannelAffine {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelAffine {
    pub fn new(ps: &mut ParamStore, name: &str, channels: usize, rng: &mut Rng) -> Self {
        let gamma = ps.add(format!("{name}.gamma"), &[channels], Init::Ones, rng);
        let beta = ps.add(format!("{name}.beta"), &[channels], Init::Zeros, rng);
        Self { gamma, beta }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Act) -> Act {
        let (g, b) = (ps.get(self.gamma), ps.get(self.beta));
        let n = x.n();
        let mut out = x.clone();
        for (c, chunk) in out.data.chunks_mut(n).enumerate() {
            for v in chunk {
                *v = *v * g[c] + b[c];
            }
        }
        out
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, x: &Act, dy: &Act) -> Act {
        let g = ps.get(self.gamma);
        let n = x.n();
        let mut dg = vec![0.0; x.c];
        let mut db = vec![0.0; x.c];
        let mut dx = dy.clone();
        for c in 0..x.c {
            let (xs, ds) = (&x.data[c * n..(c + 1) * n], &dy.data[c * n..(c + 1) * n]);
            dg[c] = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
            db[c] = ds.iter().sum();
            for v in &mut dx.data[c * n..(c + 1) * n] {
                *v *= g[c];
            }
        }
        for (a, b) in grads.get_mut(self.gamma).iter_mut().zip(dg) {
            *a += b;
        }
        for (a, b) in grads.get_mut(self.beta).iter_mut().zip(db) {
            *a += b;
        }
        dx
    }
}

/// Per-sample feature-wise modulation `x·(1 + scale) + shift`; `ss` is
/// `B × 2C` with scales in the first `C` columns.
pub struct Modulation;

impl Modulation {
    pub fn forward(x: &Act, ss: &Mat) -> Act {
        debug_assert_eq!(ss.cols, 2 * x.c);
        let hw = x.hw();
        let mut out = x.clone();
        for c in 0..x.c {
            for bi in 0..x.b {
                let (s, t) = (1.0 + ss.row(bi)[c], ss.row(bi)[x.c + c]);
                for v in &mut out.data[(c * x.b + bi) * hw..][..hw] {
                    *v = *v * s + t;
                }
            }
        }
        out
    }

    pub fn backward(x: &Act, ss: &Mat, dy: &Act) -> (Act, Mat) {
        let hw = x.hw();
        let mut dx = dy.clone();
        let mut dss = Mat::zeros(ss.rows, ss.cols);
        for c in 0..x.c {
            for bi in 0..x.b {
                let o = (c * x.b + bi) * hw;
                let (xs, ds) = (&x.data[o..o + hw], &dy.data[o..o + hw]);
                dss.row_mut(bi)[c] = xs.iter().zip(ds).map(|(a, b)| a * b).sum();
                dss.row_mut(bi)[x.c + c] = ds.iter().sum();
                let s = 1.0 + ss.row(bi)[c];
                for v in &mut dx.data[o..o + hw] {
                    *v *= s;
                }
            }
        }
        (dx, dss)
    }
}

/// Dense layer on row vectors: `y = x·Wᵀ + b`, `W` is `out × in`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub din: usize,
    pub dout: usize,
}

impl Linear {
    pub fn new(ps: &mut ParamStore, name: &str, din: usize, dout: usize, init: Option<Init>, rng: &mut Rng) -> Self {
        let init = init.unwrap_or(Init::Fan { fan_in: din, gain: 1.0 });
        let weight = ps.add(format!("{name}.weight"), &[dout, din], init, rng);
        let bias = ps.add(format!("{name}.bias"), &[dout], Init::Zeros, rng);
        Self { weight, bias, din, dout }
    }

    pub fn forward(&self, ps: &ParamStore, x: &Mat) -> Mat {
        debug_assert_eq!(x.cols, self.din);
        let mut out = Mat::zeros(x.rows, self.dout);
        let bias = ps.get(self.bias);
        for r in 0..x.rows {
            out.row_mut(r).copy_from_slice(bias);
        }
        gemm(x.rows, self.din, self.dout, 1.0, View::rm(&x.data, self.din), View::rm_t(ps.get(self.weight), self.din), 1.0, &mut out.data);
        out
    }

    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, x: &Mat, dy: &Mat) -> Mat {
        {
            let gb = grads.get_mut(self.bias);
            for r in 0..dy.rows {
                for (a, b) in gb.iter_mut().zip(dy.row(r)) {
                    *a += b;
                }
            }
        }
        gemm(self.dout, x.rows, self.din, 1.0, View::rm_t(&dy.data, self.dout), View::rm(&x.data, self.din), 1.0, grads.get_mut(self.weight));
        let mut dx = Mat::zeros(x.rows, self.din);
        gemm(x.rows, self.dout, self.din, 1.0, View::rm(&dy.data, self.dout), View::rm(ps.get(self.weight), self.din), 0.0, &mut dx.data);
        dx
    }
}

#[inline]
fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn silu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|&v| v * sigmoid(v)).collect()
}

pub fn silu_backward(x: &[f32], dy: &[f32]) -> Vec<f32> {
    x.iter()
        .zip(dy)
        .map(|(&v, &d)| {
            let s = sigmoid(v);
            d * (s + v * s * (1.0 - s))
        })
        .collect()
}

pub fn avg_pool2(x: &Act) -> Act {
    assert!(x.h.is_multiple_of(2) && x.w.is_multiple_of(2), "pooling needs even spatial dims");
    let (h2, w2) = (x.h / 2, x.w / 2);
    let mut out = Act::zeros(x.c, x.b, h2, w2);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.hw()..][..x.hw()];
        let dst = &mut out.data[cb * h2 * w2..][..h2 * w2];
        for y in 0..h2 {
            for xx in 0..w2 {
                let i = 2 * y * x.w + 2 * xx;
                dst[y * w2 + xx] = 0.25 * (src[i] + src[i + 1] + src[i + x.w] + src[i + x.w + 1]);
            }
        }
    }
    out
}

pub fn avg_pool2_backward(dy: &Act) -> Act {
    let (h, w) = (dy.h * 2, dy.w * 2);
    let mut dx = Act::zeros(dy.c, dy.b, h, w);
    for cb in 0..dy.c * dy.b {
        let src = &dy.data[cb * dy.hw()..][..dy.hw()];
        let dst = &mut dx.data[cb * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = 0.25 * src[(y / 2) * dy.w + xx / 2];
            }
        }
    }
    dx
}

pub fn upsample2(x: &Act) -> Act {
    let (h, w) = (x.h * 2, x.w * 2);
    let mut out = Act::zeros(x.c, x.b, h, w);
    for cb in 0..x.c * x.b {
        let src = &x.data[cb * x.hw()..][..x.hw()];
        let dst = &mut out.data[cb * h * w..][..h * w];
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward(dy: &Act) -> Act {
    let (h2, w2) = (dy.h / 2, dy.w / 2);
    let mut dx = Act::zeros(dy.c, dy.b, h2, w2);
    for cb in 0..dy.c * dy.b {
        let src = &dy.data[cb * dy.hw()..][..dy.hw()];
        let dst = &mut dx.data[cb * h2 * w2..][..h2 * w2];
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w2 + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}
