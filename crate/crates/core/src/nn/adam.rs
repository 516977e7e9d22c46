use super::{Grads, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AdamConfig {
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction; the learning rate is supplied per step.
#[derive(Debug, Clone)]
pub struct Adam {
    cfg: AdamConfig,
    m: Vec<Vec<f32>>,
    v: Vec<Vec<f32>>,
    t: u32,
}

impl Adam {
    pub fn new(ps: &ParamStore, cfg: AdamConfig) -> Self {
        let m: Vec<Vec<f32>> = ps.iter().map(|(_, t)| vec![0.0; t.data.len()]).collect();
        Self { cfg, v: m.clone(), m, t: 0 }
    }

    pub fn steps(&self) -> u32 {
        self.t
    }

    pub fn step(&mut self, ps: &mut ParamStore, grads: &Grads, lr: f32) {
        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.cfg;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        for (k, g) in grads.slices().enumerate() {
            let p = ps.get_mut(super::ParamId(k));
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}
