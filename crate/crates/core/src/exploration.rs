//! External exploration noise for the noise-driven baselines.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::RngStream;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GaussianNoiseSpec {
    /// Action-noise standard deviation.
    pub action_std: f64,
    /// Target-policy smoothing standard deviation.
    pub target_std: f64,
    /// Smoothing noise is clipped to `[-target_clip, target_clip]`.
    pub target_clip: f64,
}

impl Default for GaussianNoiseSpec {
    fn default() -> Self {
        Self { action_std: 0.5, target_std: 0.2, target_clip: 1.0 }
    }
}

impl GaussianNoiseSpec {
    pub fn silent() -> Self {
        Self { action_std: 0.0, target_std: 0.0, target_clip: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.action_std >= 0.0 && self.target_std >= 0.0 && self.target_clip > 0.0) {
            return Err(Error::Config(format!("invalid gaussian noise spec {self:?}")));
        }
        Ok(())
    }
}

pub fn gaussian_action_noise(spec: &GaussianNoiseSpec, dim: usize, rng: &mut RngStream) -> Vec<f64> {
    if spec.action_std == 0.0 {
        return vec![0.0; dim];
    }
    (0..dim).map(|_| rng.normal(spec.action_std)).collect()
}

pub fn target_smoothing_noise(spec: &GaussianNoiseSpec, dim: usize, rng: &mut RngStream) -> Vec<f64> {
    if spec.target_std == 0.0 {
        return vec![0.0; dim];
    }
    let c = spec.target_clip;
    (0..dim).map(|_| rng.normal(spec.target_std).clamp(-c, c)).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OuParams {
    pub theta: f64,
    pub mu: f64,
    pub sigma: f64,
    pub dt: f64,
}

impl Default for OuParams {
    fn default() -> Self {
        Self { theta: 0.15, mu: 0.0, sigma: 0.5, dt: 0.01 }
    }
}

/// Discretized Ornstein-Uhlenbeck process, one independent component per
/// action dimension.
#[derive(Clone, Debug, PartialEq)]
pub struct OuState {
    pub params: OuParams,
    pub value: Vec<f64>,
    pub diverged: bool,
}

impl OuState {
    pub fn new(params: OuParams, dim: usize) -> Result<Self> {
        if !(params.dt > 0.0) {
            return Err(Error::Config(format!("OU time step must be > 0, got {}", params.dt)));
        }
        Ok(Self { params, value: vec![params.mu; dim], diverged: false })
    }

    pub fn reset(&mut self) {
        self.value.iter_mut().for_each(|v| *v = self.params.mu);
        self.diverged = false;
    }

    /// `X <- X + theta (mu - X) dt + sigma sqrt(dt) eps`
    pub fn step(&mut self, rng: &mut RngStream) -> &[f64] {
        let OuParams { theta, mu, sigma, dt } = self.params;
        let sd = sigma * dt.sqrt();
        for x in self.value.iter_mut() {
            let eps = rng.standard_normal();
            *x += theta * (mu - *x) * dt + sd * eps;
            if !x.is_finite() {
                self.diverged = true;
            }
        }
        &self.value
    }
}

pub fn ou_step(state: &mut OuState, rng: &mut RngStream) -> Result<Vec<f64>> {
    let v = state.step(rng).to_vec();
    if state.diverged {
        return Err(Error::Numeric("OU process diverged".into()));
    }
    Ok(v)
}

/// Which external noise, if any, a behaviour policy adds to its actions.
#[derive(Clone, Debug, PartialEq)]
pub enum ActionNoise {
    None,
    Gaussian { std: f64 },
    Ou(OuState),
}

impl ActionNoise {
    pub fn sample(&mut self, dim: usize, rng: &mut RngStream) -> Result<Option<Vec<f64>>> {
        match self {
            ActionNoise::None => Ok(None),
            ActionNoise::Gaussian { std } => {
                let spec = GaussianNoiseSpec { action_std: *std, ..GaussianNoiseSpec::default() };
                Ok(Some(gaussian_action_noise(&spec, dim, rng)))
            }
            ActionNoise::Ou(s) => ou_step(s, rng).map(Some),
        }
    }

    pub fn episode_reset(&mut self) {
        if let ActionNoise::Ou(s) = self {
            s.reset();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn silent_specs_give_zeros() {
        let mut rng = RngStream::new(1);
        let spec = GaussianNoiseSpec::silent();
        assert_eq!(gaussian_action_noise(&spec, 2, &mut rng), vec![0.0, 0.0]);
        assert_eq!(target_smoothing_noise(&spec, 2, &mut rng), vec![0.0, 0.0]);
    }

    #[test]
    fn smoothing_noise_is_clipped() {
        let mut rng = RngStream::new(2);
        let spec = GaussianNoiseSpec { action_std: 0.0, target_std: 3.0, target_clip: 1.0 };
        for _ in 0..1000 {
            assert!(target_smoothing_noise(&spec, 2, &mut rng).iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn gaussian_noise_reproducible() {
        let spec = GaussianNoiseSpec::default();
        let a = gaussian_action_noise(&spec, 4, &mut RngStream::new(5));
        let b = gaussian_action_noise(&spec, 4, &mut RngStream::new(5));
        assert_eq!(a, b);
    }

    #[test]
    fn ou_without_drift_or_noise_is_constant() {
        let mut s = OuState::new(OuParams { theta: 0.0, mu: 0.0, sigma: 0.0, dt: 0.1 }, 2).unwrap();
        s.value = vec![0.3, -0.7];
        let mut rng = RngStream::new(1);
        for _ in 0..10 {
            s.step(&mut rng);
        }
        assert_eq!(s.value, vec![0.3, -0.7]);
    }

    #[test]
    fn ou_deterministic_decay() {
        let mut s = OuState::new(OuParams { theta: 5.0, mu: 0.0, sigma: 0.0, dt: 0.1 }, 1).unwrap();
        s.value = vec![1.0];
        s.step(&mut RngStream::new(1));
        assert!((s.value[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn ou_rejects_nonpositive_dt() {
        assert!(OuState::new(OuParams { dt: 0.0, ..OuParams::default() }, 1).is_err());
    }

    #[test]
    fn ou_divergence_is_flagged() {
        // theta*dt = 3 -> |1 - theta dt| = 2, grows without bound
        let mut s = OuState::new(OuParams { theta: 30.0, mu: 0.0, sigma: 1.0, dt: 0.1 }, 1).unwrap();
        let mut rng = RngStream::new(3);
        let mut failed = false;
        for _ in 0..5000 {
            if ou_step(&mut s, &mut rng).is_err() {
                failed = true;
                break;
            }
        }
        assert!(failed && s.diverged);
    }
}
