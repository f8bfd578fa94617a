//! Policy variants: the chaotic reservoir readout, the plain and noisy MLP
//! baselines, and the random-vector layer that stands in for a maximally
//! chaotic reservoir.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neural::{MlpParams, ParamSet, ReadoutParams};
use crate::numkit::RngStream;
use crate::reservoir::{step_into, ReservoirParams};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActorKind {
    CbrlReservoir,
    MlpPlain,
    MlpNoisy,
    RandomLayer,
}

impl ActorKind {
    pub const ALL: [ActorKind; 4] =
        [ActorKind::CbrlReservoir, ActorKind::MlpPlain, ActorKind::MlpNoisy, ActorKind::RandomLayer];

    /// Whether transitions carry an internal state vector `x`.
    pub fn has_state(self) -> bool {
        matches!(self, ActorKind::CbrlReservoir | ActorKind::RandomLayer)
    }

    pub fn uses_readout(self) -> bool {
        self.has_state()
    }

    pub fn name(self) -> &'static str {
        match self {
            ActorKind::CbrlReservoir => "cbrl-reservoir",
            ActorKind::MlpPlain => "mlp-plain",
            ActorKind::MlpNoisy => "mlp-noisy",
            ActorKind::RandomLayer => "random-layer",
        }
    }
}

impl std::str::FromStr for ActorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ActorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown actor kind {s:?}")))
    }
}

/// Trainable policy parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "type")]
pub enum Policy {
    Readout(ReadoutParams),
    Mlp(MlpParams),
}

impl Policy {
    /// Deterministic action; `x` is ignored by MLP policies.
    pub fn action(&self, x: Option<&[f64]>, u: &[f64]) -> Result<Vec<f64>> {
        match self {
            Policy::Readout(r) => {
                let x = x.ok_or_else(|| Error::Dimension("readout policy needs a state vector".into()))?;
                r.forward(x, u)
            }
            Policy::Mlp(m) => m.output(u),
        }
    }

    pub fn action_dim(&self) -> usize {
        match self {
            Policy::Readout(r) => r.outputs(),
            Policy::Mlp(m) => m.output_dim(),
        }
    }

    pub fn zeros_like(&self) -> Policy {
        match self {
            Policy::Readout(r) => Policy::Readout(ReadoutParams::zeros(r.outputs(), r.state_dim, r.input_dim)),
            Policy::Mlp(m) => Policy::Mlp(m.zeros_like()),
        }
    }

    pub fn readout(&self) -> Option<&ReadoutParams> {
        match self {
            Policy::Readout(r) => Some(r),
            Policy::Mlp(_) => None,
        }
    }
}

impl ParamSet for Policy {
    fn param_slices(&self) -> Vec<&[f64]> {
        match self {
            Policy::Readout(r) => r.param_slices(),
            Policy::Mlp(m) => m.param_slices(),
        }
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        match self {
            Policy::Readout(r) => r.param_slices_mut(),
            Policy::Mlp(m) => m.param_slices_mut(),
        }
    }
}

pub fn clamp_action(a: &mut [f64]) {
    a.iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
}

/// Reservoir readout action. No noise is ever added.
pub fn act_cbrl(readout: &ReadoutParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    readout.forward(x, u)
}

/// MLP action plus optional noise, clamped to `[-1, 1]`.
pub fn act_mlp(params: &MlpParams, u: &[f64], noise: Option<&[f64]>) -> Result<Vec<f64>> {
    let mut a = params.output(u)?;
    if let Some(n) = noise {
        crate::error::check_len("action noise", n.len(), a.len())?;
        a.iter_mut().zip(n).for_each(|(ai, ni)| *ai += ni);
    }
    clamp_action(&mut a);
    Ok(a)
}

pub fn draw_random_layer(size: usize, scale: f64, rng: &mut RngStream) -> Vec<f64> {
    if scale == 0.0 {
        return vec![0.0; size];
    }
    (0..size).map(|_| rng.uniform(-scale, scale)).collect()
}

/// Fresh uniform layer in `[-s, s]`, then the readout on `[layer; u]`.
pub fn act_random_layer(
    readout: &ReadoutParams,
    rng: &mut RngStream,
    u: &[f64],
    scale: f64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let layer = draw_random_layer(readout.state_dim, scale, rng);
    let a = readout.forward(&layer, u)?;
    Ok((a, layer))
}

/// The non-trainable internal state that an actor carries through an
/// episode: reservoir activations or the current random layer.
#[derive(Clone, Debug)]
pub enum InternalState<'a> {
    Stateless,
    Reservoir { params: &'a ReservoirParams, g: f64, x: Vec<f64>, scratch: Vec<f64> },
    RandomLayer { scale: f64, x: Vec<f64> },
}

impl<'a> InternalState<'a> {
    pub fn reservoir(params: &'a ReservoirParams, g: f64) -> Self {
        let n = params.size();
        InternalState::Reservoir { params, g, x: vec![0.0; n], scratch: vec![0.0; n] }
    }

    pub fn random_layer(size: usize, scale: f64) -> Self {
        InternalState::RandomLayer { scale, x: vec![0.0; size] }
    }

    /// Episode boundary: the reservoir returns to the zero state.
    pub fn reset(&mut self) {
        match self {
            InternalState::Stateless => {}
            InternalState::Reservoir { x, .. } | InternalState::RandomLayer { x, .. } => {
                x.iter_mut().for_each(|v| *v = 0.0)
            }
        }
    }

    /// Feed the newest observation and return the resulting state `x_t`.
    pub fn advance(&mut self, u: &[f64], rng: &mut RngStream) -> Result<Option<&[f64]>> {
        match self {
            InternalState::Stateless => Ok(None),
            InternalState::Reservoir { params, g, x, scratch } => {
                step_into(params, *g, x, u, scratch)?;
                std::mem::swap(x, scratch);
                Ok(Some(x.as_slice()))
            }
            InternalState::RandomLayer { scale, x } => {
                let size = x.len();
                *x = draw_random_layer(size, *scale, rng);
                Ok(Some(x.as_slice()))
            }
        }
    }

    pub fn current(&self) -> Option<&[f64]> {
        match self {
            InternalState::Stateless => None,
            InternalState::Reservoir { x, .. } | InternalState::RandomLayer { x, .. } => Some(x),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::{Activation, Layer};
    use crate::numkit::DenseMatrix;

    #[test]
    fn zero_readout_gives_zero_action() {
        let r = ReadoutParams::zeros(2, 8, 5);
        assert_eq!(act_cbrl(&r, &[0.4; 8], &[0.5; 5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn cbrl_action_is_deterministic() {
        let r = ReadoutParams::init_uniform(2, 8, 5, &mut RngStream::new(3));
        let x = [0.1, -0.2, 0.3, 0.9, -0.9, 0.0, 0.5, 0.25];
        let u = [0.2, 0.8, 0.4, 0.6, 0.95];
        assert_eq!(act_cbrl(&r, &x, &u).unwrap(), act_cbrl(&r, &x, &u).unwrap());
        assert_eq!(act_cbrl(&r, &x, &u).unwrap(), r.forward(&x, &u).unwrap());
    }

    #[test]
    fn zero_mlp_gives_zero_action() {
        let m = MlpParams::init(&[5, 256, 2], Activation::Tanh, Activation::Tanh, &mut RngStream::new(1)).zeros_like();
        assert_eq!(act_mlp(&m, &[0.5; 5], None).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn noise_then_clamp() {
        // single linear-tanh layer producing (0.9, 0): bias atanh(0.9)
        let mut layer = Layer::zeros(5, 2, Activation::Tanh);
        layer.bias[0] = 0.9f64.atanh();
        let m = MlpParams::new(vec![layer]).unwrap();
        let a = act_mlp(&m, &[0.0; 5], Some(&[0.3, 0.0])).unwrap();
        assert_eq!(a, vec![1.0, 0.0]);
        let a = act_mlp(&m, &[0.0; 5], Some(&[-2.5, -1.5])).unwrap();
        assert_eq!(a, vec![-1.0, -1.0]);
    }

    #[test]
    fn zero_noise_matches_noise_free() {
        let m = MlpParams::init(&[5, 16, 2], Activation::Tanh, Activation::Tanh, &mut RngStream::new(2));
        let u = [0.1, 0.9, 0.3, 0.7, 0.8];
        assert_eq!(act_mlp(&m, &u, Some(&[0.0, 0.0])).unwrap(), act_mlp(&m, &u, None).unwrap());
    }

    #[test]
    fn random_layer_scale_zero_uses_bypass_only() {
        let mut r = ReadoutParams::zeros(2, 4, 5);
        r.weights = DenseMatrix::from_fn(2, 9, |i, j| (i + j) as f64 * 0.1);
        let u = [0.2, 0.8, 0.4, 0.6, 0.9];
        let (a, layer) = act_random_layer(&r, &mut RngStream::new(1), &u, 0.0).unwrap();
        assert_eq!(layer, vec![0.0; 4]);
        assert_eq!(a, r.forward(&[0.0; 4], &u).unwrap());
    }

    #[test]
    fn random_layer_reproducible_and_bounded() {
        let r = ReadoutParams::zeros(2, 16, 5);
        let run = || {
            let mut rng = RngStream::new(9);
            (0..5).map(|_| act_random_layer(&r, &mut rng, &[0.0; 5], 1.0).unwrap().1).collect::<Vec<_>>()
        };
        let a = run();
        assert_eq!(a, run());
        assert!(a.iter().flatten().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn actor_kind_names_round_trip() {
        for k in ActorKind::ALL {
            assert_eq!(k.name().parse::<ActorKind>().unwrap(), k);
        }
        assert!("bogus".parse::<ActorKind>().is_err());
    }
}
