use serde::{Deserialize, Serialize};

/// Continuous-time noise schedule: `alpha(t)` is the signal fraction
/// `ᾱ(t)` of `z_t = √ᾱ·z + √(1-ᾱ)·ε`, and `weight(t)` the loss weighting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseSchedule {
    pub kind: ScheduleKind,
    pub weighting: Weighting,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ScheduleKind {
    /// `ᾱ(t) = f(t) / f(0)`, `f(t) = cos²((t + s) / (1 + s) · π/2)`.
    Cosine { s: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Weighting {
    Constant { value: f64 },
    /// `w(t) = 1 - ᾱ(t)`.
    OneMinusAlpha,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        Self::cosine()
    }
}

impl NoiseSchedule {
    pub const fn cosine() -> Self {
        Self { kind: ScheduleKind::Cosine { s: 0.008 }, weighting: Weighting::Constant { value: 1.0 } }
    }

    pub fn with_weighting(mut self, weighting: Weighting) -> Self {
        self.weighting = weighting;
        self
    }

    pub fn alpha(&self, t: f64) -> f64 {
        match self.kind {
            ScheduleKind::Cosine { s } => {
                let f = |t: f64| ((t + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2).cos().powi(2);
                (f(t.clamp(0.0, 1.0)) / f(0.0)).clamp(0.0, 1.0)
            }
        }
    }

    pub fn weight(&self, t: f64) -> f64 {
        match self.weighting {
            Weighting::Constant { value } => value.max(0.0),
            Weighting::OneMinusAlpha => 1.0 - self.alpha(t),
        }
    }

    /// `(√ᾱ, √(1-ᾱ))` at `t`.
    pub fn coefficients(&self, t: f64) -> (f64, f64) {
        let a = self.alpha(t);
        (a.sqrt(), (1.0 - a).sqrt())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cosine_alpha_limits_and_monotonicity() {
        let s = NoiseSchedule::cosine();
        assert!((s.alpha(1e-9) - 1.0).abs() < 1e-6);
        assert!(s.alpha(1.0 - 1e-9) < 1e-6);
        let mut prev = s.alpha(1e-6);
        for i in 1..1000 {
            let a = s.alpha(i as f64 / 1000.0);
            assert!(a < prev && a > 0.0 && a < 1.0);
            prev = a;
        }
    }

    #[test]
    fn weights_are_nonnegative() {
        for w in [Weighting::Constant { value: 1.0 }, Weighting::OneMinusAlpha] {
            let s = NoiseSchedule::cosine().with_weighting(w);
            assert!((0..=100).all(|i| s.weight(i as f64 / 100.0) >= 0.0));
        }
        assert_eq!(NoiseSchedule::cosine().weight(0.3), 1.0);
    }
}
