//! Conditional encoder–decoder with skip connections.
//!
//! Two per-sample vectors condition the network: a time input (sinusoidal
//! features of `t`, or a learned vector in the translator) that goes through
//! a small MLP, and a condition vector added to the MLP output. The summed
//! embedding drives every residual block's group-norm modulation.

use serde::{Deserialize, Serialize};

use super::layers::{avg_pool2, avg_pool2_backward, silu, silu_backward, upsample2, upsample2_backward};
use super::{Act, ChannelAffine, Conv2d, ConvCache, GroupNorm, GroupNormCache, Grads, Init, Linear, Mat, Modulation, ParamStore};
use crate::rng::Rng;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    pub in_channels: usize,
    pub base_width: usize,
    /// Width multiplier per resolution level; the number of levels is its length.
    pub channel_mults: Vec<usize>,
    pub emb_dim: usize,
    pub time_features: usize,
    pub groups: usize,
}

impl UNetConfig {
    pub fn levels(&self) -> usize {
        self.channel_mults.len()
    }

    fn width(&self, level: usize) -> usize {
        self.base_width * self.channel_mults[level]
    }

    /// Spatial dims must halve cleanly at every level.
    pub fn supports(&self, height: usize, width: usize) -> bool {
        let f = 1usize << (self.levels() - 1);
        height.is_multiple_of(f) && width.is_multiple_of(f)
    }
}

#[derive(Debug, Clone)]
struct ResBlock {
    norm1: GroupNorm,
    affine1: ChannelAffine,
    conv1: Conv2d,
    emb: Linear,
    norm2: GroupNorm,
    conv2: Conv2d,
    skip: Option<Conv2d>,
}

#[derive(Debug)]
struct ResBlockTape {
    n1: GroupNormCache,
    a1: Act,
    c1: ConvCache,
    ss: Mat,
    n2: GroupNormCache,
    m: Act,
    c2: ConvCache,
    skip: Option<ConvCache>,
}

impl ResBlock {
    fn new(ps: &mut ParamStore, name: &str, cin: usize, cout: usize, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        let norm1 = GroupNorm::new(cfg.groups);
        let affine1 = ChannelAffine::new(ps, &format!("{name}.norm1"), cin, rng);
        let conv1 = Conv2d::new(ps, &format!("{name}.conv1"), cin, cout, 3, false, rng);
        let emb = Linear::new(ps, &format!("{name}.emb"), cfg.emb_dim, 2 * cout, Some(Init::Fan { fan_in: cfg.emb_dim, gain: 0.5 }), rng);
        let norm2 = GroupNorm::new(cfg.groups);
        let conv2 = Conv2d::new(ps, &format!("{name}.conv2"), cout, cout, 3, false, rng);
        let skip = (cin != cout).then(|| Conv2d::new(ps, &format!("{name}.skip"), cin, cout, 1, false, rng));
        Self { norm1, affine1, conv1, emb, norm2, conv2, skip }
    }

    fn forward(&self, ps: &ParamStore, x: &Act, e: &Mat) -> (Act, ResBlockTape) {
        let n1 = self.norm1.forward(x);
        let a1 = self.affine1.forward(ps, n1.normalized());
        let s1 = Act { data: silu(&a1.data), ..Act::like(&a1) };
        let (h1, c1) = self.conv1.forward(ps, &s1);
        let ss = self.emb.forward(ps, e);
        let n2 = self.norm2.forward(&h1);
        let m = Modulation::forward(n2.normalized(), &ss);
        let s2 = Act { data: silu(&m.data), ..Act::like(&m) };
        let (mut out, c2) = self.conv2.forward(ps, &s2);
        let skip = match &self.skip {
            Some(conv) => {
                let (sx, sc) = conv.forward(ps, x);
                out.add_assign(&sx);
                Some(sc)
            }
            None => {
                out.add_assign(x);
                None
            }
        };
        (out, ResBlockTape { n1, a1, c1, ss, n2, m, c2, skip })
    }

    /// Returns `(dx, d_emb)`.
    fn backward(&self, ps: &ParamStore, grads: &mut Grads, tape: &ResBlockTape, e: &Mat, dout: &Act) -> (Act, Mat) {
        let ds2 = self.conv2.backward(ps, grads, &tape.c2, dout, true).unwrap();
        let dm = Act { data: silu_backward(&tape.m.data, &ds2.data), ..Act::like(&ds2) };
        let (dn2, dss) = Modulation::backward(tape.n2.normalized(), &tape.ss, &dm);
        let dh1 = self.norm2.backward(&tape.n2, &dn2);
        let de = self.emb.backward(ps, grads, e, &dss);
        let ds1 = self.conv1.backward(ps, grads, &tape.c1, &dh1, true).unwrap();
        let da1 = Act { data: silu_backward(&tape.a1.data, &ds1.data), ..Act::like(&ds1) };
        let dn1 = self.affine1.backward(ps, grads, tape.n1.normalized(), &da1);
        let mut dx = self.norm1.backward(&tape.n1, &dn1);
        match (&self.skip, &tape.skip) {
            (Some(conv), Some(cache)) => dx.add_assign(&conv.backward(ps, grads, cache, dout, true).unwrap()),
            _ => dx.add_assign(dout),
        }
        (dx, de)
    }
}

#[derive(Debug, Clone)]
pub struct UNet {
    cfg: UNetConfig,
    time1: Linear,
    time2: Linear,
    conv_in: Conv2d,
    down: Vec<ResBlock>,
    mid: ResBlock,
    up: Vec<ResBlock>,
    out_norm: GroupNorm,
    out_affine: ChannelAffine,
    conv_out: Conv2d,
}

/// Everything the backward pass needs from one forward pass.
#[derive(Debug)]
pub struct UNetTape {
    time_in: Mat,
    t1: Mat,
    t1s: Mat,
    emb: Mat,
    e: Mat,
    c_in: ConvCache,
    down: Vec<ResBlockTape>,
    mid: ResBlockTape,
    up: Vec<ResBlockTape>,
    skip_widths: Vec<usize>,
    up_in_widths: Vec<usize>,
    out_n: GroupNormCache,
    out_a: Act,
    c_out: ConvCache,
}

/// Gradients with respect to the two conditioning inputs.
#[derive(Debug, Clone)]
pub struct UNetGrads {
    pub time_in: Mat,
    pub cond_in: Mat,
}

impl UNet {
    /// Registers all parameters under `prefix` in `ps`.
    pub fn new(ps: &mut ParamStore, prefix: &str, cfg: &UNetConfig, rng: &mut Rng) -> Self {
        assert!(cfg.levels() >= 1);
        let p = |s: &str| format!("{prefix}.{s}");
        let time1 = Linear::new(ps, &p("time1"), cfg.time_features, cfg.emb_dim, None, rng);
        let time2 = Linear::new(ps, &p("time2"), cfg.emb_dim, cfg.emb_dim, None, rng);
        let conv_in = Conv2d::new(ps, &p("conv_in"), cfg.in_channels, cfg.base_width, 3, false, rng);
        let mut down = Vec::new();
        let mut cin = cfg.base_width;
        for l in 0..cfg.levels() {
            down.push(ResBlock::new(ps, &p(&format!("down{l}")), cin, cfg.width(l), cfg, rng));
            cin = cfg.width(l);
        }
        let top = cfg.width(cfg.levels() - 1);
        let mid = ResBlock::new(ps, &p("mid"), top, top, cfg, rng);
        let mut up = Vec::new();
        for l in 0..cfg.levels() {
            let from_below = if l + 1 < cfg.levels() { cfg.width(l + 1) } else { top };
            up.push(ResBlock::new(ps, &p(&format!("up{l}")), from_below + cfg.width(l), cfg.width(l), cfg, rng));
        }
        let out_affine = ChannelAffine::new(ps, &p("out_norm"), cfg.width(0), rng);
        let conv_out = Conv2d::new(ps, &p("conv_out"), cfg.width(0), cfg.in_channels, 3, true, rng);
        Self {
            cfg: cfg.clone(),
            time1,
            time2,
            conv_in,
            down,
            mid,
            up,
            out_norm: GroupNorm::new(cfg.groups),
            out_affine,
            conv_out,
        }
    }

    pub fn config(&self) -> &UNetConfig {
        &self.cfg
    }

    pub fn forward(&self, ps: &ParamStore, x: &Act, time_in: &Mat, cond_in: &Mat) -> (Act, UNetTape) {
        debug_assert_eq!(time_in.rows, x.b);
        debug_assert_eq!(cond_in.rows, x.b);
        let t1 = self.time1.forward(ps, time_in);
        let t1s = Mat { data: silu(&t1.data), ..t1.clone() };
        let mut emb = self.time2.forward(ps, &t1s);
        emb.add_assign(cond_in);
        let e = Mat { data: silu(&emb.data), ..emb.clone() };

        let (mut h, c_in) = self.conv_in.forward(ps, x);
        let levels = self.cfg.levels();
        let mut skips = Vec::with_capacity(levels);
        let mut down = Vec::with_capacity(levels);
        for (l, block) in self.down.iter().enumerate() {
            let (o, tape) = block.forward(ps, &h, &e);
            down.push(tape);
            h = if l + 1 < levels { avg_pool2(&o) } else { o.clone() };
            skips.push(o);
        }
        let (mut h, mid) = self.mid.forward(ps, &h, &e);
        let mut up = Vec::with_capacity(levels);
        let mut skip_widths = vec![0; levels];
        let mut up_in_widths = vec![0; levels];
        for l in (0..levels).rev() {
            up_in_widths[l] = h.c;
            skip_widths[l] = skips[l].c;
            let cat = h.concat_channels(&skips[l]);
            let (o, tape) = self.up[l].forward(ps, &cat, &e);
            up.push(tape);
            h = if l > 0 { upsample2(&o) } else { o };
        }
        up.reverse();
        let out_n = self.out_norm.forward(&h);
        let out_a = self.out_affine.forward(ps, out_n.normalized());
        let s = Act { data: silu(&out_a.data), ..Act::like(&out_a) };
        let (out, c_out) = self.conv_out.forward(ps, &s);
        let tape = UNetTape {
            time_in: time_in.clone(),
            t1,
            t1s,
            emb,
            e,
            c_in,
            down,
            mid,
            up,
            skip_widths,
            up_in_widths,
            out_n,
            out_a,
            c_out,
        };
        (out, tape)
    }

    pub fn infer(&self, ps: &ParamStore, x: &Act, time_in: &Mat, cond_in: &Mat) -> Act {
        self.forward(ps, x, time_in, cond_in).0
    }

    /// Accumulates parameter gradients; returns gradients of the conditioning inputs.
    pub fn backward(&self, ps: &ParamStore, grads: &mut Grads, tape: &UNetTape, dout: &Act) -> UNetGrads {
        let levels = self.cfg.levels();
        let ds = self.conv_out.backward(ps, grads, &tape.c_out, dout, true).unwrap();
        let da = Act { data: silu_backward(&tape.out_a.data, &ds.data), ..Act::like(&ds) };
        let dn = self.out_affine.backward(ps, grads, tape.out_n.normalized(), &da);
        let mut dh = self.out_norm.backward(&tape.out_n, &dn);
        let mut de = Mat::zeros(tape.e.rows, tape.e.cols);
        let mut dskips: Vec<Option<Act>> = vec![None; levels];
        for l in 0..levels {
            if l > 0 {
                dh = upsample2_backward(&dh);
            }
            let (dcat, de_l) = self.up[l].backward(ps, grads, &tape.up[l], &tape.e, &dh);
            de.add_assign(&de_l);
            let (dprev, dskip) = dcat.split_channels(tape.up_in_widths[l]);
            debug_assert_eq!(dskip.c, tape.skip_widths[l]);
            dskips[l] = Some(dskip);
            dh = dprev;
        }
        let (mut dh, de_mid) = self.mid.backward(ps, grads, &tape.mid, &tape.e, &dh);
        de.add_assign(&de_mid);
        for l in (0..levels).rev() {
            if l + 1 < levels {
                dh = avg_pool2_backward(&dh);
            }
            dh.add_assign(dskips[l].as_ref().unwrap());
            let (dx, de_l) = self.down[l].backward(ps, grads, &tape.down[l], &tape.e, &dh);
            de.add_assign(&de_l);
            dh = dx;
        }
        self.conv_in.backward(ps, grads, &tape.c_in, &dh, false);

        let demb = Mat { data: silu_backward(&tape.emb.data, &de.data), ..de.clone() };
        let dt1s = self.time2.backward(ps, grads, &tape.t1s, &demb);
        let dt1 = Mat { data: silu_backward(&tape.t1.data, &dt1s.data), ..dt1s.clone() };
        let dtime = self.time1.backward(ps, grads, &tape.time_in, &dt1);
        UNetGrads { time_in: dtime, cond_in: demb }
    }
}
