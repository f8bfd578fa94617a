//! TD3 with the modifications needed for a reservoir actor: transitions
//! carry the internal state `x`, and the actor is trained on stored states
//! rather than by re-running the reservoir.

use serde::{Deserialize, Serialize};

use crate::actors::{clamp_action, Policy};
use crate::error::{Error, Result};
use crate::neural::{AdamConfig, AdamState, InputGrad, MlpCache, MlpParams, ParamSet, polyak_blend};
use crate::numkit::{DenseMatrix, RngStream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Experience {
    pub u: Vec<f64>,
    pub x: Option<Vec<f64>>,
    pub a: Vec<f64>,
    pub r: f64,
    pub u_next: Vec<f64>,
    pub x_next: Option<Vec<f64>>,
    /// Absorbing transition: the target is the reward alone.
    pub terminal: bool,
}

/// FIFO replay memory.
#[derive(Clone, Debug)]
pub struct ReplayBuffer {
    capacity: usize,
    items: Vec<Experience>,
    head: usize,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        assert!(capacity > 0, "replay capacity must be positive");
        Self { capacity, items: Vec::new(), head: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn push(&mut self, e: Experience) {
        if self.items.len() < self.capacity {
            self.items.push(e);
        } else {
            self.items[self.head] = e;
            self.head = (self.head + 1) % self.capacity;
        }
    }

    /// Contents from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &Experience> {
        let (newer, older) = self.items.split_at(self.head);
        older.iter().chain(newer)
    }

    /// `n` uniform draws with replacement, or `None` while fewer than `n`
    /// transitions are stored.
    pub fn sample_indices(&self, n: usize, rng: &mut RngStream) -> Option<Vec<usize>> {
        if self.items.len() < n || n == 0 {
            return None;
        }
        Some((0..n).map(|_| rng.index(self.items.len())).collect())
    }

    pub fn sample(&self, n: usize, rng: &mut RngStream) -> Option<Vec<&Experience>> {
        self.sample_indices(n, rng).map(|idx| idx.into_iter().map(|i| &self.items[i]).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Td3Hyper {
    pub gamma: f64,
    pub tau: f64,
    pub policy_delay: u64,
    pub batch_size: usize,
    pub buffer_capacity: usize,
    pub critic_lr: f64,
    /// `None` picks the default for the actor kind.
    pub actor_lr: Option<f64>,
    pub critic_hidden: Vec<usize>,
    /// `None` picks the default for the actor kind.
    pub target_noise_std: Option<f64>,
    pub target_noise_clip: f64,
    /// Feed the internal state `x` to the critics as well.
    pub critic_sees_state: bool,
    /// Bootstrap through episode timeouts.
    pub bootstrap_on_timeout: bool,
}

impl Default for Td3Hyper {
    fn default() -> Self {
        Self {
            gamma: 0.95,
            tau: 0.05,
            policy_delay: 2,
            batch_size: 64,
            buffer_capacity: 1_000_000,
            critic_lr: 5e-4,
            actor_lr: None,
            critic_hidden: vec![32, 32],
            target_noise_std: None,
            target_noise_clip: 1.0,
            critic_sees_state: false,
            bootstrap_on_timeout: true,
        }
    }
}

impl Td3Hyper {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return bad("tau must lie in (0, 1]");
        }
        if self.policy_delay == 0 {
            return bad("policy_delay must be >= 1");
        }
        if self.batch_size == 0 || self.buffer_capacity == 0 {
            return bad("batch_size and buffer_capacity must be >= 1");
        }
        if !(self.critic_lr >= 0.0) || self.actor_lr.is_some_and(|v| !(v >= 0.0)) {
            return bad("learning rates must be >= 0");
        }
        if self.target_noise_std.is_some_and(|v| !(v >= 0.0)) || !(self.target_noise_clip > 0.0) {
            return bad("target noise std must be >= 0 and clip > 0");
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub update: u64,
    pub critic_loss: f64,
    pub actor_objective: Option<f64>,
}

/// Actor, twin critics, their targets and optimizer states.
#[derive(Clone, Debug)]
pub struct Td3Learner {
    pub hyper: Td3Hyper,
    pub actor: Policy,
    pub actor_target: Policy,
    pub critics: [MlpParams; 2],
    pub critic_targets: [MlpParams; 2],
    actor_opt: AdamState,
    critic_opts: [AdamState; 2],
    updates: u64,
    obs_dim: usize,
    state_dim: usize,
    action_dim: usize,
    // scratch
    critic_grads: [MlpParams; 2],
    cache: MlpCache,
    input: Vec<f64>,
}

impl Td3Learner {
    /// Critics are built here with ReLU hidden layers and a linear output.
    pub fn new(
        hyper: Td3Hyper,
        actor: Policy,
        actor_lr: f64,
        obs_dim: usize,
        state_dim: usize,
        rng: &mut RngStream,
    ) -> Result<Self> {
        hyper.validate()?;
        let action_dim = actor.action_dim();
        let critic_in = obs_dim + if hyper.critic_sees_state { state_dim } else { 0 } + action_dim;
        let mut sizes = vec![critic_in];
        sizes.extend(&hyper.critic_hidden);
        sizes.push(1);
        let c1 = MlpParams::init(&sizes, crate::neural::Activation::Relu, crate::neural::Activation::Linear, rng);
        let c2 = MlpParams::init(&sizes, crate::neural::Activation::Relu, crate::neural::Activation::Linear, rng);
        Self::from_parts(hyper, actor, [c1, c2], actor_lr, obs_dim, state_dim)
    }

    pub fn from_parts(
        hyper: Td3Hyper,
        actor: Policy,
        critics: [MlpParams; 2],
        actor_lr: f64,
        obs_dim: usize,
        state_dim: usize,
    ) -> Result<Self> {
        hyper.validate()?;
        let action_dim = actor.action_dim();
        let critic_in = obs_dim + if hyper.critic_sees_state { state_dim } else { 0 } + action_dim;
        for c in &critics {
            if c.input_dim() != critic_in || c.output_dim() != 1 {
                return Err(Error::Dimension(format!(
                    "critic must map {critic_in} inputs to 1 output, has {} -> {}",
                    c.input_dim(),
                    c.output_dim()
                )));
            }
        }
        let critic_cfg = AdamConfig::with_lr(hyper.critic_lr);
        Ok(Self {
            actor_opt: AdamState::for_params(AdamConfig::with_lr(actor_lr), &actor),
            critic_opts: [AdamState::for_params(critic_cfg, &critics[0]), AdamState::for_params(critic_cfg, &critics[1])],
            critic_grads: [critics[0].zeros_like(), critics[1].zeros_like()],
            actor_target: actor.clone(),
            critic_targets: critics.clone(),
            actor,
            critics,
            hyper,
            updates: 0,
            obs_dim,
            state_dim,
            action_dim,
            cache: MlpCache::default(),
            input: Vec::new(),
        })
    }

    pub fn updates(&self) -> u64 {
        self.updates
    }

    pub fn action_dim(&self) -> usize {
        self.action_dim
    }

    pub fn obs_dim(&self) -> usize {
        self.obs_dim
    }

    pub fn state_dim(&self) -> usize {
        self.state_dim
    }

    fn critic_input(&self, u: &[f64], x: Option<&[f64]>, a: &[f64], buf: &mut Vec<f64>) -> Result<()> {
        buf.clear();
        buf.extend_from_slice(u);
        if self.hyper.critic_sees_state {
            let x = x.ok_or_else(|| Error::Dimension("critic expects an internal state".into()))?;
            buf.extend_from_slice(x);
        }
        buf.extend_from_slice(a);
        Ok(())
    }

    pub fn q_value(&self, which: usize, u: &[f64], x: Option<&[f64]>, a: &[f64]) -> Result<f64> {
        let mut buf = Vec::new();
        self.critic_input(u, x, a, &mut buf)?;
        Ok(self.critics[which].output(&buf)?[0])
    }

    /// `T = r + gamma * min_j Q'_j(s', clamp(mu'(s') + eps))`, or `T = r`
    /// for absorbing transitions.
    pub fn critic_targets(&self, batch: &[&Experience], rng: &mut RngStream) -> Result<Vec<f64>> {
        let h = &self.hyper;
        let mut buf = Vec::with_capacity(self.obs_dim + self.state_dim + self.action_dim);
        let mut cache = MlpCache::default();
        let mut out = Vec::with_capacity(batch.len());
        for e in batch {
            if e.terminal || h.gamma == 0.0 {
                out.push(e.r);
                continue;
            }
            let mut a = self.actor_target.action(e.x_next.as_deref(), &e.u_next)?;
            let std = h.target_noise_std.unwrap_or(0.0);
            if std > 0.0 {
                let c = h.target_noise_clip;
                a.iter_mut().for_each(|v| *v += rng.normal(std).clamp(-c, c));
            }
            clamp_action(&mut a);
            self.critic_input(&e.u_next, e.x_next.as_deref(), &a, &mut buf)?;
            self.critic_targets[0].forward_into(&buf, &mut cache)?;
            let q1 = cache.output()[0];
            self.critic_targets[1].forward_into(&buf, &mut cache)?;
            let q2 = cache.output()[0];
            out.push(e.r + h.gamma * q1.min(q2));
        }
        Ok(out)
    }

    /// One Adam step per critic on the mean squared error to `targets`.
    /// Returns the pre-update loss of the first critic.
    pub fn update_critics(&mut self, batch: &[&Experience], targets: &[f64]) -> Result<f64> {
        crate::error::check_len("critic targets", targets.len(), batch.len())?;
        let n = batch.len() as f64;
        let mut first_loss = 0.0;
        let mut input = std::mem::take(&mut self.input);
        let mut cache = std::mem::take(&mut self.cache);
        for j in 0..2 {
            let grads = &mut self.critic_grads[j];
            grads.param_slices_mut().into_iter().for_each(|s| s.fill(0.0));
            let mut loss = 0.0;
            for (e, &t) in batch.iter().zip(targets) {
                input.clear();
                input.extend_from_slice(&e.u);
                if self.hyper.critic_sees_state {
                    let x = e.x.as_deref().ok_or_else(|| Error::Dimension("critic expects an internal state".into()))?;
                    input.extend_from_slice(x);
                }
                input.extend_from_slice(&e.a);
                self.critics[j].forward_into(&input, &mut cache)?;
                let diff = cache.output()[0] - t;
                loss += diff * diff / n;
                self.critics[j].backward_accumulate(&cache, &[2.0 * diff / n], Some(grads), InputGrad::None)?;
            }
            if !loss.is_finite() {
                return Err(Error::Numeric(format!("critic {} loss is not finite", j + 1)));
            }
            if j == 0 {
                first_loss = loss;
            }
            self.critic_opts[j].step(&mut self.critics[j], &self.critic_grads[j])?;
        }
        self.input = input;
        self.cache = cache;
        Ok(first_loss)
    }

    /// Gradient ascent on `mean Q1(s, mu(s))` with the critic held fixed.
    /// Returns the objective before the update.
    pub fn update_actor(&mut self, batch: &[&Experience]) -> Result<f64> {
        let (objective, grad) = self.actor_gradient(batch)?;
        if !objective.is_finite() {
            return Err(Error::Numeric("actor objective is not finite".into()));
        }
        // descent on -J
        let neg = negate(grad);
        self.actor_opt.step(&mut self.actor, &neg)?;
        Ok(objective)
    }

    /// `(J, dJ/dtheta)` for the current actor over a batch.
    pub fn actor_gradient(&self, batch: &[&Experience]) -> Result<(f64, Policy)> {
        let n = batch.len() as f64;
        let mut grad = self.actor.zeros_like();
        let mut objective = 0.0;
        let mut input = Vec::new();
        let mut critic_cache = MlpCache::default();
        let mut actor_cache = MlpCache::default();
        let ad = self.action_dim;
        for e in batch {
            let a = match &self.actor {
                Policy::Readout(r) => {
                    let x = e.x.as_deref().ok_or_else(|| Error::Dimension("readout actor needs stored state".into()))?;
                    r.forward(x, &e.u)?
                }
                Policy::Mlp(m) => {
                    m.forward_into(&e.u, &mut actor_cache)?;
                    actor_cache.output().to_vec()
                }
            };
            self.critic_input(&e.u, e.x.as_deref(), &a, &mut input)?;
            self.critics[0].forward_into(&input, &mut critic_cache)?;
            objective += critic_cache.output()[0] / n;
            let dq_da = self.critics[0].backward_accumulate(&critic_cache, &[1.0 / n], None, InputGrad::Tail(ad))?;
            match (&self.actor, &mut grad) {
                (Policy::Readout(r), Policy::Readout(g)) => {
                    let x = e.x.as_deref().unwrap_or(&[]);
                    r.backward_accumulate(x, &e.u, &a, &dq_da, &mut g.weights)?;
                }
                (Policy::Mlp(m), Policy::Mlp(g)) => {
                    m.backward_accumulate(&actor_cache, &dq_da, Some(g), InputGrad::None)?;
                }
                _ => unreachable!("gradient mirrors the actor variant"),
            }
        }
        Ok((objective, grad))
    }

    /// Blend every target network toward its online network.
    pub fn polyak(&mut self, tau: f64) {
        polyak_blend(&mut self.actor_target, &self.actor, tau);
        for j in 0..2 {
            polyak_blend(&mut self.critic_targets[j], &self.critics[j], tau);
        }
    }

    /// Sample, update critics, and on every `policy_delay`-th update also the
    /// actor and targets. `Ok(None)` while the buffer is smaller than a batch.
    pub fn train_step(&mut self, buffer: &ReplayBuffer, rng: &mut RngStream) -> Result<Option<StepMetrics>> {
        let Some(batch) = buffer.sample(self.hyper.batch_size, rng) else {
            return Ok(None);
        };
        let targets = self.critic_targets(&batch, rng)?;
        let critic_loss = self.update_critics(&batch, &targets)?;
        self.updates += 1;
        let mut actor_objective = None;
        if self.updates.is_multiple_of(self.hyper.policy_delay) {
            actor_objective = Some(self.update_actor(&batch)?);
            self.polyak(self.hyper.tau);
        }
        Ok(Some(StepMetrics { update: self.updates, critic_loss, actor_objective }))
    }

    /// FNV digest over all online and target parameters.
    pub fn param_digest(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |s: &[f64]| {
            for v in s {
                h ^= v.to_bits();
                h = h.wrapping_mul(0x0000_0100_0000_01B3);
            }
        };
        self.actor.param_slices().into_iter().for_each(&mut eat);
        self.actor_target.param_slices().into_iter().for_each(&mut eat);
        for c in self.critics.iter().chain(&self.critic_targets) {
            c.param_slices().into_iter().for_each(&mut eat);
        }
        h
    }
}

fn negate(mut p: Policy) -> Policy {
    p.param_slices_mut().into_iter().for_each(|s| s.iter_mut().for_each(|v| *v = -*v));
    p
}

pub fn push(buffer: &mut ReplayBuffer, e: Experience) {
    buffer.push(e)
}

pub fn sample<'a>(buffer: &'a ReplayBuffer, n: usize, rng: &mut RngStream) -> Option<Vec<&'a Experience>> {
    buffer.sample(n, rng)
}

/// Flat snapshot of a weight matrix with its shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ShapedArray {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl From<&DenseMatrix> for ShapedArray {
    fn from(m: &DenseMatrix) -> Self {
        Self { shape: vec![m.rows(), m.cols()], data: m.as_slice().to_vec() }
    }
}
