//! Small fixed-architecture networks with hand-written backpropagation.
//!
//! Weight matrices are stored `out x in`. Everything that Adam or Polyak
//! averaging touches implements [`ParamSet`], which exposes parameters as a
//! fixed sequence of flat slices.

use serde::{Deserialize, Serialize};

use crate::error::{check_len, Error, Result};
use crate::numkit::{axpy, dot, DenseMatrix, RngStream};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
    Linear,
}

impl Activation {
    #[inline]
    fn apply(self, v: f64) -> f64 {
        match self {
            Activation::Relu => v.max(0.0),
            Activation::Tanh => v.tanh(),
            Activation::Linear => v,
        }
    }

    /// Derivative expressed through the post-activation value.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

/// Anything with trainable parameters laid out as a fixed list of slices.
pub trait ParamSet {
    fn param_slices(&self) -> Vec<&[f64]>;
    fn param_slices_mut(&mut self) -> Vec<&mut [f64]>;

    fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    fn flat_params(&self) -> Vec<f64> {
        self.param_slices().concat()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: Vec<f64>,
    pub activation: Activation,
}

impl Layer {
    pub fn zeros(inputs: usize, outputs: usize, activation: Activation) -> Self {
        Self { weights: DenseMatrix::zeros(outputs, inputs), bias: vec![0.0; outputs], activation }
    }

    /// Uniform in `±1/sqrt(fan_in)` for weights and biases alike.
    pub fn init_uniform(inputs: usize, outputs: usize, activation: Activation, rng: &mut RngStream) -> Self {
        let bound = 1.0 / (inputs as f64).sqrt();
        let weights = DenseMatrix::from_fn(outputs, inputs, |_, _| rng.uniform(-bound, bound));
        let bias = (0..outputs).map(|_| rng.uniform(-bound, bound)).collect();
        Self { weights, bias, activation }
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }
}

/// Which part of the input gradient a backward pass should produce.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum InputGrad {
    None,
    All,
    /// Only the last `k` input components.
    Tail(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

/// Post-activation values of every layer; entry 0 is the input.
#[derive(Clone, Debug, Default)]
pub struct MlpCache {
    values: Vec<Vec<f64>>,
}

impl MlpCache {
    pub fn output(&self) -> &[f64] {
        self.values.last().map(|v| v.as_slice()).unwrap_or(&[])
    }
}

impl MlpParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Dimension("an MLP needs at least one layer".into()));
        }
        for w in layers.windows(2) {
            if w[0].outputs() != w[1].inputs() {
                return Err(Error::Dimension(format!(
                    "layer output {} does not feed layer input {}",
                    w[0].outputs(),
                    w[1].inputs()
                )));
            }
        }
        for l in &layers {
            check_len("layer bias", l.bias.len(), l.outputs())?;
        }
        Ok(Self { layers })
    }

    /// `sizes = [in, h1, ..., out]`; hidden layers use `hidden`, the last
    /// layer uses `output`.
    pub fn init(sizes: &[usize], hidden: Activation, output: Activation, rng: &mut RngStream) -> Self {
        assert!(sizes.len() >= 2);
        let last = sizes.len() - 2;
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| Layer::init_uniform(w[0], w[1], if i == last { output } else { hidden }, rng))
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.outputs()).unwrap_or(0)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            layers: self
                .layers
                .iter()
                .map(|l| Layer::zeros(l.inputs(), l.outputs(), l.activation))
                .collect(),
        }
    }

    pub fn forward(&self, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        let mut cache = MlpCache::default();
        self.forward_into(input, &mut cache)?;
        Ok((cache.output().to_vec(), cache))
    }

    /// Forward pass reusing the buffers of `cache`.
    pub fn forward_into(&self, input: &[f64], cache: &mut MlpCache) -> Result<()> {
        check_len("mlp input", input.len(), self.input_dim())?;
        cache.values.resize_with(self.layers.len() + 1, Vec::new);
        cache.values[0].clear();
        cache.values[0].extend_from_slice(input);
        for (i, layer) in self.layers.iter().enumerate() {
            let (done, rest) = cache.values.split_at_mut(i + 1);
            let x = &done[i];
            let y = &mut rest[0];
            y.clear();
            y.extend((0..layer.outputs()).map(|j| {
                layer.activation.apply(layer.bias[j] + dot(layer.weights.row(j), x))
            }));
        }
        Ok(())
    }

    pub fn output(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward(input)?.0)
    }

    /// Gradients of a scalar loss given `dL/d(output)`.
    pub fn backward(&self, cache: &MlpCache, output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
        let mut grads = self.zeros_like();
        let input_grad = self.backward_accumulate(cache, output_grad, Some(&mut grads), InputGrad::All)?;
        Ok((grads, input_grad))
    }

    /// Adds parameter gradients into `grads` (when given) and returns the
    /// requested part of the gradient with respect to the input.
    pub fn backward_accumulate(
        &self,
        cache: &MlpCache,
        output_grad: &[f64],
        mut grads: Option<&mut MlpParams>,
        input_grad: InputGrad,
    ) -> Result<Vec<f64>> {
        if cache.values.len() != self.layers.len() + 1 {
            return Err(Error::Dimension("cache was not produced by this network".into()));
        }
        check_len("output gradient", output_grad.len(), self.output_dim())?;
        let mut upstream = output_grad.to_vec();
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let x = &cache.values[i];
            let y = &cache.values[i + 1];
            check_len("cached activation", y.len(), layer.outputs())?;
            check_len("cached input", x.len(), layer.inputs())?;
            let delta: Vec<f64> = upstream
                .iter()
                .zip(y)
                .map(|(&g, &yj)| g * layer.activation.derivative_from_output(yj))
                .collect();
            if let Some(g) = grads.as_deref_mut() {
                let gl = &mut g.layers[i];
                for (j, &d) in delta.iter().enumerate() {
                    if d != 0.0 {
                        axpy(d, x, gl.weights.row_mut(j));
                        gl.bias[j] += d;
                    }
                }
            }
            let from = match (i, input_grad) {
                (0, InputGrad::None) => return Ok(Vec::new()),
                (0, InputGrad::Tail(k)) => layer.inputs().saturating_sub(k),
                _ => 0,
            };
            let mut down = vec![0.0; layer.inputs() - from];
            for (j, &d) in delta.iter().enumerate() {
                if d != 0.0 {
                    axpy(d, &layer.weights.row(j)[from..], &mut down);
                }
            }
            upstream = down;
        }
        Ok(upstream)
    }
}

impl ParamSet for MlpParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weights.as_slice(), l.bias.as_slice()])
            .collect()
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weights.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }
}

/// Linear readout with tanh output over `[x; u]`, no bias.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReadoutParams {
    pub weights: DenseMatrix,
    pub state_dim: usize,
    pub input_dim: usize,
}

impl ReadoutParams {
    pub fn zeros(outputs: usize, state_dim: usize, input_dim: usize) -> Self {
        Self { weights: DenseMatrix::zeros(outputs, state_dim + input_dim), state_dim, input_dim }
    }

    pub fn init_uniform(outputs: usize, state_dim: usize, input_dim: usize, rng: &mut RngStream) -> Self {
        let fan_in = state_dim + input_dim;
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weights = DenseMatrix::from_fn(outputs, fan_in, |_, _| rng.uniform(-bound, bound));
        Self { weights, state_dim, input_dim }
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn check(&self, x: &[f64], u: &[f64]) -> Result<()> {
        check_len("readout state", x.len(), self.state_dim)?;
        check_len("readout input", u.len(), self.input_dim)
    }

    #[inline]
    fn pre_activation(&self, row: usize, x: &[f64], u: &[f64]) -> f64 {
        let w = self.weights.row(row);
        dot(&w[..self.state_dim], x) + dot(&w[self.state_dim..], u)
    }

    /// `tanh(W_out [x; u])`
    pub fn forward(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        self.check(x, u)?;
        Ok((0..self.outputs()).map(|r| self.pre_activation(r, x, u).tanh()).collect())
    }

    /// Weight gradient given `dL/d(action)`.
    pub fn backward(&self, x: &[f64], u: &[f64], action_grad: &[f64]) -> Result<DenseMatrix> {
        let mut g = DenseMatrix::zeros(self.weights.rows(), self.weights.cols());
        let z = self.forward(x, u)?;
        self.backward_accumulate(x, u, &z, action_grad, &mut g)?;
        Ok(g)
    }

    /// Accumulates into `grad`; `z` must be the forward output for `(x, u)`.
    pub fn backward_accumulate(
        &self,
        x: &[f64],
        u: &[f64],
        z: &[f64],
        action_grad: &[f64],
        grad: &mut DenseMatrix,
    ) -> Result<()> {
        self.check(x, u)?;
        check_len("action gradient", action_grad.len(), self.outputs())?;
        check_len("readout output", z.len(), self.outputs())?;
        for (r, (&g, &zr)) in action_grad.iter().zip(z).enumerate() {
            let d = g * (1.0 - zr * zr);
            if d == 0.0 {
                continue;
            }
            let row = grad.row_mut(r);
            let (rs, ru) = row.split_at_mut(self.state_dim);
            axpy(d, x, rs);
            axpy(d, u, ru);
        }
        Ok(())
    }
}

impl ParamSet for ReadoutParams {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.weights.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.weights.as_mut_slice()]
    }
}

pub fn readout_forward(p: &ReadoutParams, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
    p.forward(x, u)
}

pub fn readout_backward(p: &ReadoutParams, x: &[f64], u: &[f64], action_grad: &[f64]) -> Result<DenseMatrix> {
    p.backward(x, u, action_grad)
}

pub fn mlp_forward(p: &MlpParams, input: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
    p.forward(input)
}

pub fn mlp_backward(p: &MlpParams, cache: &MlpCache, output_grad: &[f64]) -> Result<(MlpParams, Vec<f64>)> {
    p.backward(cache, output_grad)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        Self { learning_rate, beta1: default_beta1(), beta2: default_beta2(), eps: default_eps() }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub config: AdamConfig,
    first: Vec<f64>,
    second: Vec<f64>,
    step: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, param_count: usize) -> Self {
        Self { config, first: vec![0.0; param_count], second: vec![0.0; param_count], step: 0 }
    }

    pub fn for_params<P: ParamSet + ?Sized>(config: AdamConfig, params: &P) -> Self {
        Self::new(config, params.param_count())
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One descent step. Non-finite gradients leave both parameters and
    /// state untouched.
    pub fn step<P, G>(&mut self, params: &mut P, grads: &G) -> Result<()>
    where
        P: ParamSet + ?Sized,
        G: ParamSet + ?Sized,
    {
        let gs = grads.param_slices();
        let total: usize = gs.iter().map(|s| s.len()).sum();
        if total != self.first.len() || params.param_count() != total {
            return Err(Error::Dimension(format!(
                "adam state holds {} parameters, gradient has {total}",
                self.first.len()
            )));
        }
        if gs.iter().any(|s| s.iter().any(|v| !v.is_finite())) {
            return Err(Error::Numeric("non-finite gradient".into()));
        }
        self.step += 1;
        let AdamConfig { learning_rate, beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.step as i32);
        let bc2 = 1.0 - beta2.powi(self.step as i32);
        let mut k = 0;
        for (ps, gs) in params.param_slices_mut().into_iter().zip(gs) {
            if ps.len() != gs.len() {
                return Err(Error::Dimension("parameter and gradient shapes differ".into()));
            }
            for (p, &g) in ps.iter_mut().zip(gs) {
                let m = &mut self.first[k];
                let v = &mut self.second[k];
                *m = beta1 * *m + (1.0 - beta1) * g;
                *v = beta2 * *v + (1.0 - beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= learning_rate * m_hat / (v_hat.sqrt() + eps);
                k += 1;
            }
        }
        Ok(())
    }
}

pub fn adam_step<P: ParamSet + ?Sized, G: ParamSet + ?Sized>(
    state: &mut AdamState,
    params: &mut P,
    grads: &G,
) -> Result<()> {
    state.step(params, grads)
}

/// `target <- tau * online + (1 - tau) * target`
pub fn polyak_blend<P: ParamSet + ?Sized>(target: &mut P, online: &P, tau: f64) {
    for (t, o) in target.param_slices_mut().into_iter().zip(online.param_slices()) {
        for (ti, &oi) in t.iter_mut().zip(o) {
            *ti = tau * oi + (1.0 - tau) * *ti;
        }
    }
}

impl ParamSet for DenseMatrix {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

impl ParamSet for Vec<f64> {
    fn param_slices(&self) -> Vec<&[f64]> {
        vec![self.as_slice()]
    }

    fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        vec![self.as_mut_slice()]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_identity(n: usize) -> MlpParams {
        MlpParams::new(vec![Layer {
            weights: DenseMatrix::identity(n),
            bias: vec![0.0; n],
            activation: Activation::Linear,
        }])
        .unwrap()
    }

    #[test]
    fn zero_network_outputs_zero() {
        let net = MlpParams::init(&[4, 8, 3], Activation::Relu, Activation::Linear, &mut RngStream::new(1)).zeros_like();
        assert_eq!(net.output(&[1.0, -2.0, 3.0, 0.5]).unwrap(), vec![0.0; 3]);
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let v = [0.3, -1.2, 4.0];
        assert_eq!(linear_identity(3).output(&v).unwrap(), v.to_vec());
    }

    #[test]
    fn input_length_is_checked() {
        assert!(matches!(linear_identity(3).forward(&[1.0]), Err(Error::Dimension(_))));
    }

    #[test]
    fn mismatched_layers_rejected() {
        let layers = vec![Layer::zeros(3, 4, Activation::Relu), Layer::zeros(5, 1, Activation::Linear)];
        assert!(MlpParams::new(layers).is_err());
    }

    #[test]
    fn zero_output_grad_gives_zero_gradients() {
        let net = MlpParams::init(&[3, 5, 2], Activation::Tanh, Activation::Tanh, &mut RngStream::new(2));
        let (_, cache) = net.forward(&[0.1, 0.2, 0.3]).unwrap();
        let (g, gi) = net.backward(&cache, &[0.0, 0.0]).unwrap();
        assert!(g.flat_params().iter().all(|&v| v == 0.0));
        assert!(gi.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn linear_input_grad_is_transpose_product() {
        let w = DenseMatrix::new(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 4.0]).unwrap();
        let net = MlpParams::new(vec![Layer { weights: w.clone(), bias: vec![0.0; 2], activation: Activation::Linear }]).unwrap();
        let (_, cache) = net.forward(&[1.0, 1.0, 1.0]).unwrap();
        let c = [0.7, -0.2];
        let (_, gi) = net.backward(&cache, &c).unwrap();
        let want = w.transpose_matvec(&c).unwrap();
        for (a, b) in gi.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn backward_rejects_foreign_cache() {
        let a = MlpParams::init(&[2, 3, 1], Activation::Relu, Activation::Linear, &mut RngStream::new(1));
        let b = MlpParams::init(&[2, 1], Activation::Relu, Activation::Linear, &mut RngStream::new(1));
        let (_, cache) = b.forward(&[1.0, 2.0]).unwrap();
        assert!(a.backward(&cache, &[1.0]).is_err());
    }

    #[test]
    fn readout_zero_weights_give_zero_action() {
        let r = ReadoutParams::zeros(2, 4, 5);
        assert_eq!(r.forward(&[0.3; 4], &[1.0; 5]).unwrap(), vec![0.0, 0.0]);
    }

    #[test]
    fn readout_selects_first_state_unit() {
        let mut r = ReadoutParams::zeros(2, 3, 2);
        r.weights.set(0, 0, 1.0);
        let z = r.forward(&[0.5, 0.9, -0.9], &[1.0, 1.0]).unwrap();
        assert!((z[0] - 0.5f64.tanh()).abs() < 1e-15);
        assert!((z[0] - 0.4621).abs() < 1e-4);
        assert_eq!(z[1], 0.0);
    }

    #[test]
    fn readout_scalar_gradient() {
        let r = ReadoutParams::zeros(1, 1, 0);
        let g = r.backward(&[0.8], &[], &[1.5]).unwrap();
        assert!((g.get(0, 0) - 1.5 * 0.8).abs() < 1e-15);
        let g0 = r.backward(&[0.8], &[], &[0.0]).unwrap();
        assert_eq!(g0.get(0, 0), 0.0);
    }

    #[test]
    fn readout_dimension_checks() {
        let r = ReadoutParams::zeros(2, 3, 2);
        assert!(r.forward(&[0.0; 2], &[0.0; 2]).is_err());
        assert!(r.forward(&[0.0; 3], &[0.0; 3]).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = vec![0.5, -1.0];
        let mut s = AdamState::for_params(AdamConfig::with_lr(0.1), &p);
        s.step(&mut p, &vec![0.0, 0.0]).unwrap();
        assert_eq!(p, vec![0.5, -1.0]);
        assert_eq!(s.step_count(), 1);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut p = vec![0.0];
        let mut s = AdamState::for_params(AdamConfig::with_lr(0.1), &p);
        s.step(&mut p, &vec![1.0]).unwrap();
        // m_hat = 1, v_hat = 1 -> -0.1 / (1 + 1e-8)
        assert!((p[0] + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut p = vec![1.0];
        let mut s = AdamState::for_params(AdamConfig::with_lr(0.1), &p);
        assert!(matches!(s.step(&mut p, &vec![f64::INFINITY]), Err(Error::Numeric(_))));
        assert_eq!(p, vec![1.0]);
        assert_eq!(s.step_count(), 0);
    }

    #[test]
    fn polyak_blend_is_linear() {
        let mut t = vec![0.0];
        polyak_blend(&mut t, &vec![1.0], 0.05);
        assert!((t[0] - 0.05).abs() < 1e-15);
        polyak_blend(&mut t, &vec![1.0], 1.0);
        assert_eq!(t[0], 1.0);
    }
}
