//! Training protocol: interleaved act/store/train loop, periodic frozen
//! test batteries, the success criterion, and multi-seed sweeps.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::actors::{clamp_action, ActorKind, InternalState, Policy};
use crate::analysis::{weight_stats, WeightStats};
use crate::envs::{self, GoalEnvConfig, Phase, Start, TerminalKind, TrajectoryRow, ACTION_DIM, OBS_DIM};
use crate::error::{Error, Result};
use crate::exploration::{ActionNoise, OuParams, OuState};
use crate::neural::{Activation, MlpParams, ReadoutParams};
use crate::numkit::RngStream;
use crate::parallel::map_indexed;
use crate::reservoir::{init_reservoir, ReservoirConfig, ReservoirParams};
use crate::td3::{Experience, ReplayBuffer, Td3Hyper, Td3Learner};

pub const TOOL_VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const CBRL_ACTOR_LR: f64 = 5e-4;
pub const MLP_ACTOR_LR: f64 = 1.6e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseKind {
    /// Gaussian for `mlp-noisy`, none otherwise.
    Auto,
    None,
    Gaussian,
    Ou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExplorationConfig {
    pub kind: NoiseKind,
    pub gaussian_std: f64,
    pub ou: OuParams,
    /// Keep adding action noise during test batteries.
    pub keep_in_test: bool,
}

impl Default for ExplorationConfig {
    fn default() -> Self {
        Self { kind: NoiseKind::Auto, gaussian_std: 0.5, ou: OuParams::default(), keep_in_test: false }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DumpConfig {
    pub trajectories: bool,
    pub reservoir: bool,
    /// Indices into the battery start list whose internal states are kept.
    pub reservoir_starts: Vec<usize>,
}

impl Default for DumpConfig {
    fn default() -> Self {
        // (10, 2) and (10, 18)
        Self { trajectories: false, reservoir: false, reservoir_starts: vec![3, 4] }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScenarioConfig {
    pub actor: ActorKind,
    pub reservoir: ReservoirConfig,
    /// Half-width of the uniform layer used by `random-layer`.
    pub random_scale: f64,
    pub mlp_hidden: usize,
    pub env: GoalEnvConfig,
    pub td3: Td3Hyper,
    pub exploration: ExplorationConfig,
    pub total_steps: u64,
    pub test_period: u64,
    pub seeds: Vec<u64>,
    pub dump: DumpConfig,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            actor: ActorKind::CbrlReservoir,
            reservoir: ReservoirConfig::default(),
            random_scale: 1.0,
            mlp_hidden: 256,
            env: GoalEnvConfig::default(),
            td3: Td3Hyper::default(),
            exploration: ExplorationConfig::default(),
            total_steps: 20_000,
            test_period: 2_000,
            seeds: (0..10).collect(),
            dump: DumpConfig::default(),
        }
    }
}

impl ScenarioConfig {
    pub fn goal_task(actor: ActorKind) -> Self {
        Self { actor, ..Self::default() }
    }

    /// Goal moves after step 20,001; 50,000 steps tested every 5,000.
    pub fn goal_change(actor: ActorKind) -> Self {
        let mut s = Self::goal_task(actor);
        s.env.change_step = 20_001;
        s.total_steps = 50_000;
        s.test_period = 5_000;
        s
    }

    /// Half of all observations after the first are blanked.
    pub fn flickering(actor: ActorKind, critic_sees_state: bool) -> Self {
        let mut s = Self::goal_task(actor);
        s.reservoir.g = 1.2;
        s.env.observe_prob = 0.5;
        s.td3.critic_sees_state = critic_sees_state;
        s.total_steps = 50_000;
        s.test_period = 5_000;
        s
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "goal" => Ok(Self::default()),
            "goal-change" => Ok(Self::goal_change(ActorKind::CbrlReservoir)),
            "flicker" => Ok(Self::flickering(ActorKind::CbrlReservoir, true)),
            _ => Err(Error::Config(format!("unknown preset {name:?} (goal, goal-change, flicker)"))),
        }
    }

    /// Fill every kind-dependent default and validate.
    pub fn resolve(&self) -> Result<Self> {
        let mut s = self.clone();
        let mlp = matches!(s.actor, ActorKind::MlpPlain | ActorKind::MlpNoisy);
        s.td3.actor_lr.get_or_insert(if mlp { MLP_ACTOR_LR } else { CBRL_ACTOR_LR });
        if s.exploration.kind == NoiseKind::Auto {
            s.exploration.kind = if s.actor == ActorKind::MlpNoisy { NoiseKind::Gaussian } else { NoiseKind::None };
        }
        s.td3.target_noise_std.get_or_insert(if s.actor == ActorKind::MlpNoisy { 0.2 } else { 0.0 });
        s.reservoir.inputs = OBS_DIM;
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.reservoir.validate()?;
        self.env.validate()?;
        self.td3.validate()?;
        if self.test_period == 0 {
            return bad("test_period must be >= 1".into());
        }
        if self.seeds.is_empty() {
            return bad("seed list must not be empty".into());
        }
        if self.td3.critic_sees_state && !self.actor.has_state() {
            return bad(format!("critic_sees_state needs a stateful actor, not {}", self.actor.name()));
        }
        if !(self.random_scale >= 0.0) || self.mlp_hidden == 0 {
            return bad("random_scale must be >= 0 and mlp_hidden >= 1".into());
        }
        if !(self.exploration.gaussian_std >= 0.0) || !(self.exploration.ou.dt > 0.0) {
            return bad("gaussian_std must be >= 0 and OU dt > 0".into());
        }
        if let Some(&i) = self.dump.reservoir_starts.iter().find(|&&i| i >= self.env.battery_starts().len()) {
            return bad(format!("reservoir dump start index {i} out of range"));
        }
        Ok(())
    }

    fn actor_lr(&self) -> f64 {
        self.td3.actor_lr.unwrap_or(CBRL_ACTOR_LR)
    }

    fn state_dim(&self) -> usize {
        if self.actor.has_state() {
            self.reservoir.size
        } else {
            0
        }
    }

    fn behaviour_noise(&self) -> Result<ActionNoise> {
        Ok(match self.exploration.kind {
            NoiseKind::Auto | NoiseKind::None => ActionNoise::None,
            NoiseKind::Gaussian => ActionNoise::Gaussian { std: self.exploration.gaussian_std },
            NoiseKind::Ou => ActionNoise::Ou(OuState::new(self.exploration.ou, ACTION_DIM)?),
        })
    }
}

/// Everything fixed at initialization that is not trained.
#[derive(Clone, Debug)]
pub struct Frozen {
    pub kind: ActorKind,
    pub reservoir: Option<ReservoirParams>,
    pub g: f64,
    pub random_scale: f64,
    /// Length of the internal state vector, 0 for stateless actors.
    pub state_size: usize,
}

impl Frozen {
    pub fn internal_state(&self) -> InternalState<'_> {
        match (self.kind, &self.reservoir) {
            (ActorKind::CbrlReservoir, Some(p)) => InternalState::reservoir(p, self.g),
            (ActorKind::RandomLayer, _) => InternalState::random_layer(self.state_size, self.random_scale),
            _ => InternalState::Stateless,
        }
    }
}

/// Build the initial policy, critics and non-trainable parts for a seed.
pub fn build_agent(sc: &ScenarioConfig, root: &RngStream) -> Result<(Td3Learner, Frozen)> {
    let init = root.derive("init");
    let n = sc.reservoir.size;
    let frozen = Frozen {
        kind: sc.actor,
        reservoir: match sc.actor {
            ActorKind::CbrlReservoir => Some(init_reservoir(&sc.reservoir, &mut init.derive("reservoir"))?),
            _ => None,
        },
        g: sc.reservoir.g,
        random_scale: sc.random_scale,
        state_size: sc.state_dim(),
    };
    let mut actor_rng = init.derive("actor");
    let actor = if sc.actor.uses_readout() {
        Policy::Readout(ReadoutParams::init_uniform(ACTION_DIM, n, OBS_DIM, &mut actor_rng))
    } else {
        Policy::Mlp(MlpParams::init(&[OBS_DIM, sc.mlp_hidden, ACTION_DIM], Activation::Tanh, Activation::Tanh, &mut actor_rng))
    };
    let learner = Td3Learner::new(sc.td3.clone(), actor, sc.actor_lr(), OBS_DIM, sc.state_dim(), &mut init.derive("critic"))?;
    Ok((learner, frozen))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatteryResult {
    pub step: u64,
    pub goal: [f64; 2],
    pub steps: Vec<u32>,
    pub reached: Vec<bool>,
    pub mean_steps: f64,
}

impl BatteryResult {
    pub fn all_reached(&self) -> bool {
        !self.reached.is_empty() && self.reached.iter().all(|&r| r)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReservoirTrace {
    pub battery_step: u64,
    pub start_index: usize,
    /// States from the reset state through the last step, time-ordered.
    pub states: Vec<Vec<f64>>,
}

#[derive(Clone, Debug, Default)]
pub struct BatteryOptions {
    pub trajectories: bool,
    pub reservoir_starts: Vec<usize>,
    /// Action noise kept on during the battery.
    pub noise: Option<ActionNoise>,
}

#[derive(Clone, Debug, Default)]
pub struct BatteryOutput {
    pub result: Option<BatteryResult>,
    pub trajectories: Vec<TrajectoryRow>,
    pub traces: Vec<ReservoirTrace>,
}

/// Deterministic episodes from every battery start with frozen parameters.
/// Failures count as the full episode cap.
pub fn run_test_battery(
    policy: &Policy,
    frozen: &Frozen,
    env: &GoalEnvConfig,
    battery_step: u64,
    rng: &mut RngStream,
    opts: &BatteryOptions,
) -> Result<BatteryOutput> {
    let goal = env.goal_at(battery_step);
    let starts = env.battery_starts();
    let mut internal = frozen.internal_state();
    let mut noise = opts.noise.clone();
    let mut out = BatteryOutput::default();
    let mut steps = Vec::with_capacity(starts.len());
    let mut reached = Vec::with_capacity(starts.len());
    for (si, &start) in starts.iter().enumerate() {
        let mut st = envs::reset(env, goal, Start::Fixed(start), rng);
        internal.reset();
        if let Some(n) = noise.as_mut() {
            n.episode_reset();
        }
        let keep = opts.reservoir_starts.contains(&si) && frozen.state_size > 0;
        let mut trace = Vec::new();
        if keep {
            trace.push(internal.current().map(<[f64]>::to_vec).unwrap_or_default());
        }
        let tag = format!("test{battery_step}-start{si}");
        let mut done = None;
        while done.is_none() {
            let u = envs::observe(env, &st, rng, Phase::Test);
            let x = internal.advance(&u, rng)?;
            if keep {
                trace.push(x.map(<[f64]>::to_vec).unwrap_or_default());
            }
            let mut a = policy.action(x, &u)?;
            if let Some(n) = noise.as_mut() {
                if let Some(eps) = n.sample(a.len(), rng)? {
                    a.iter_mut().zip(&eps).for_each(|(ai, e)| *ai += e);
                }
            }
            clamp_action(&mut a);
            let outcome = envs::step(env, &mut st, &a)?;
            if opts.trajectories {
                out.trajectories.push(TrajectoryRow {
                    episode: tag.clone(),
                    step: st.episode_step,
                    x: st.pos[0],
                    y: st.pos[1],
                    a_x: a[0],
                    a_y: a[1],
                    r: outcome.reward,
                });
            }
            done = outcome.terminal;
        }
        let ok = done == Some(TerminalKind::Goal);
        steps.push(if ok { st.episode_step } else { env.max_steps });
        reached.push(ok);
        if keep {
            out.traces.push(ReservoirTrace { battery_step, start_index: si, states: trace });
        }
    }
    let mean_steps = steps.iter().map(|&s| s as f64).sum::<f64>() / steps.len() as f64;
    out.result = Some(BatteryResult { step: battery_step, goal, steps, reached, mean_steps });
    Ok(out)
}

/// One row per completed training episode.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpisodeMetrics {
    pub step: u64,
    pub episode_return: f64,
    pub episode_length: u32,
    pub critic_loss: Option<f64>,
    pub actor_objective: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub tool_version: String,
    pub scenario: ScenarioConfig,
    pub seed: u64,
    pub batteries: Vec<BatteryResult>,
    pub episodes: Vec<EpisodeMetrics>,
    /// Numeric failure that stopped training early.
    pub failure: Option<String>,
    pub success: bool,
    /// Digest of the regenerated reservoir, when there is one.
    pub reservoir_fingerprint: Option<String>,
    pub policy: Policy,
    pub critics: Vec<MlpParams>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub trajectories: Vec<TrajectoryRow>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub reservoir_traces: Vec<ReservoirTrace>,
}

impl RunRecord {
    pub fn final_battery(&self) -> Option<&BatteryResult> {
        self.batteries.last()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(&mut f, self)?;
        f.flush()?;
        Ok(())
    }

    pub fn read_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Rebuild the frozen parts from the recorded seed and check the
    /// reservoir digest against the record.
    pub fn regenerate_frozen(&self) -> Result<Frozen> {
        let (_, frozen) = build_agent(&self.scenario, &RngStream::new(self.seed))?;
        let fp = frozen.reservoir.as_ref().map(ReservoirParams::fingerprint);
        if fp != self.reservoir_fingerprint {
            return Err(Error::Config("regenerated reservoir does not match the recorded fingerprint".into()));
        }
        Ok(frozen)
    }
}

/// True iff every start of the final battery reached the goal.
pub fn success_of(record: &RunRecord) -> bool {
    record.final_battery().is_some_and(BatteryResult::all_reached)
}

/// Random stream for the battery at `step` of the run with `seed`; flicker,
/// observation noise and kept action noise all draw from it.
pub fn battery_stream(seed: u64, step: u64) -> RngStream {
    RngStream::new(seed).derive("battery").derive_indexed("at", step)
}

/// Battery options implied by a resolved scenario.
pub fn battery_options(sc: &ScenarioConfig) -> Result<BatteryOptions> {
    Ok(BatteryOptions {
        trajectories: sc.dump.trajectories,
        reservoir_starts: if sc.dump.reservoir { sc.dump.reservoir_starts.clone() } else { Vec::new() },
        noise: if sc.exploration.keep_in_test { Some(sc.behaviour_noise()?) } else { None },
    })
}

/// Train one seed. Numeric failures end training and are kept in the
/// record; configuration errors are returned.
pub fn run_training(scenario: &ScenarioConfig, seed: u64) -> Result<RunRecord> {
    let sc = scenario.resolve()?;
    let root = RngStream::new(seed);
    let (mut learner, frozen) = build_agent(&sc, &root)?;
    let env = &sc.env;
    let opts = battery_options(&sc)?;
    let mut record = RunRecord {
        tool_version: TOOL_VERSION.to_string(),
        scenario: sc.clone(),
        seed,
        batteries: Vec::new(),
        episodes: Vec::new(),
        failure: None,
        success: false,
        reservoir_fingerprint: frozen.reservoir.as_ref().map(ReservoirParams::fingerprint),
        policy: learner.actor.clone(),
        critics: Vec::new(),
        trajectories: Vec::new(),
        reservoir_traces: Vec::new(),
    };
    let mut battery = |learner: &Td3Learner, step: u64, record: &mut RunRecord| -> Result<()> {
        let mut rng = battery_stream(seed, step);
        let out = run_test_battery(&learner.actor, &frozen, env, step, &mut rng, &opts)?;
        record.batteries.extend(out.result);
        record.trajectories.extend(out.trajectories);
        record.reservoir_traces.extend(out.traces);
        Ok(())
    };
    battery(&learner, 0, &mut record)?;

    if let Err(e) = train_loop(&sc, &root, &mut learner, &frozen, &mut record, &mut battery) {
        match e {
            Error::Numeric(msg) => record.failure = Some(msg),
            other => return Err(other),
        }
    }
    record.success = record.failure.is_none() && success_of(&record);
    record.policy = learner.actor.clone();
    record.critics = learner.critics.to_vec();
    Ok(record)
}

fn train_loop(
    sc: &ScenarioConfig,
    root: &RngStream,
    learner: &mut Td3Learner,
    frozen: &Frozen,
    record: &mut RunRecord,
    battery: &mut impl FnMut(&Td3Learner, u64, &mut RunRecord) -> Result<()>,
) -> Result<()> {
    let env = &sc.env;
    let mut env_rng = root.derive("env");
    let mut replay_rng = root.derive("replay");
    let mut noise_rng = root.derive("noise");
    let mut layer_rng = root.derive("layer");
    let mut noise = sc.behaviour_noise()?;
    let mut buffer = ReplayBuffer::new(sc.td3.buffer_capacity);
    let mut internal = frozen.internal_state();
    let stateful = sc.actor.has_state();
    let bootstrap = sc.td3.bootstrap_on_timeout;

    let mut st = envs::reset(env, env.goal_at(1), Start::Random, &mut env_rng);
    let mut u = envs::observe(env, &st, &mut env_rng, Phase::Train).to_vec();
    let mut x = internal.advance(&u, &mut layer_rng)?.map(<[f64]>::to_vec);
    let mut ep_return = 0.0;
    let mut last = None;

    for t in 1..=sc.total_steps {
        let mut a = learner.actor.action(x.as_deref(), &u)?;
        if let Some(eps) = noise.sample(a.len(), &mut noise_rng)? {
            a.iter_mut().zip(&eps).for_each(|(ai, e)| *ai += e);
        }
        clamp_action(&mut a);
        let outcome = envs::step(env, &mut st, &a)?;
        ep_return += outcome.reward;
        // the goal for the next step is in place before it is observed
        st.goal = env.goal_at(t + 1);
        let u_next = envs::observe(env, &st, &mut env_rng, Phase::Train).to_vec();
        let x_next = internal.advance(&u_next, &mut layer_rng)?.map(<[f64]>::to_vec);
        let absorbing = match outcome.terminal {
            Some(TerminalKind::Goal) => true,
            Some(TerminalKind::Timeout) => !bootstrap,
            None => false,
        };
        buffer.push(Experience {
            u: std::mem::take(&mut u),
            x: if stateful { x.take() } else { None },
            a,
            r: outcome.reward,
            u_next: u_next.clone(),
            x_next: if stateful { x_next.clone() } else { None },
            terminal: absorbing,
        });
        if let Some(m) = learner.train_step(&buffer, &mut replay_rng)? {
            last = Some(m);
        }
        if outcome.terminal.is_some() {
            record.episodes.push(EpisodeMetrics {
                step: t,
                episode_return: ep_return,
                episode_length: st.episode_step,
                critic_loss: last.map(|m| m.critic_loss),
                actor_objective: last.and_then(|m| m.actor_objective),
            });
            ep_return = 0.0;
            st = envs::reset(env, env.goal_at(t + 1), Start::Random, &mut env_rng);
            internal.reset();
            noise.episode_reset();
            u = envs::observe(env, &st, &mut env_rng, Phase::Train).to_vec();
            x = internal.advance(&u, &mut layer_rng)?.map(<[f64]>::to_vec);
        } else {
            u = u_next;
            x = x_next;
        }
        if t % sc.test_period == 0 {
            battery(learner, t, record)?;
        }
    }
    Ok(())
}

/// Per-seed digest kept by sweeps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub seed: u64,
    pub success: bool,
    pub final_mean_steps: f64,
    pub failure: Option<String>,
    pub weights: Option<WeightStats>,
}

impl RunSummary {
    pub fn of(record: &RunRecord) -> Self {
        Self {
            seed: record.seed,
            success: record.success,
            final_mean_steps: record.final_battery().map(|b| b.mean_steps).unwrap_or(f64::NAN),
            failure: record.failure.clone(),
            weights: record.policy.readout().map(weight_stats),
        }
    }
}

/// One grid point: axis values and the scenario they produce.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub axes: Vec<(String, f64)>,
    pub scenario: ScenarioConfig,
}

pub const GRID_NAMES: [&str; 7] = ["g", "lr-grid", "gauss-sigma", "ou", "random-scale", "rsv-size", "rsv-conn"];

fn steps(lo: f64, step: f64, count: usize) -> Vec<f64> {
    // integer multiples keep values like 0.3 exact to the printed digit
    (0..count).map(|i| ((lo + step * i as f64) * 1e9).round() / 1e9).collect()
}

fn doubling(lo: f64, count: usize) -> Vec<f64> {
    (0..count).map(|i| lo * 2f64.powi(i as i32)).collect()
}

/// Built-in grids over a scenario template.
pub fn builtin_grid(name: &str, template: &ScenarioConfig) -> Result<Vec<SweepCell>> {
    let cell = |axes: Vec<(&str, f64)>, f: &dyn Fn(&mut ScenarioConfig)| {
        let mut scenario = template.clone();
        f(&mut scenario);
        SweepCell { axes: axes.into_iter().map(|(k, v)| (k.to_string(), v)).collect(), scenario }
    };
    let cells = match name {
        "g" => steps(0.0, 0.2, 61)
            .into_iter()
            .map(|g| {
                cell(vec![("g", g)], &|s| {
                    s.actor = ActorKind::CbrlReservoir;
                    s.reservoir.g = g;
                })
            })
            .collect(),
        "lr-grid" => {
            let rates: Vec<f64> = (0..=10).map(|n| 1e-6 * 4f64.powi(n)).collect();
            let mut out = Vec::new();
            for &critic in &rates {
                for &actor in &rates {
                    out.push(cell(vec![("critic_lr", critic), ("actor_lr", actor)], &|s| {
                        s.td3.critic_lr = critic;
                        s.td3.actor_lr = Some(actor);
                    }));
                }
            }
            out
        }
        "gauss-sigma" => steps(0.0, 0.1, 11)
            .into_iter()
            .map(|sigma| {
                cell(vec![("sigma", sigma)], &|s| {
                    s.actor = ActorKind::MlpNoisy;
                    s.exploration.kind = NoiseKind::Gaussian;
                    s.exploration.gaussian_std = sigma;
                })
            })
            .collect(),
        "ou" => {
            let small = doubling(0.00005, 11);
            let large = doubling(0.1, 11);
            let sigmas = steps(0.0, 0.2, 6);
            let mut out = Vec::new();
            let mut push = |theta: f64, dt: f64, sigma: f64| {
                out.push(cell(vec![("theta", theta), ("sigma", sigma), ("dt", dt)], &|s| {
                    s.actor = ActorKind::MlpNoisy;
                    s.exploration.kind = NoiseKind::Ou;
                    s.exploration.ou = OuParams { theta, mu: 0.0, sigma, dt };
                }));
            };
            for &theta in small.iter().chain(&large) {
                for &sigma in &sigmas {
                    push(theta, 0.01, sigma);
                }
            }
            for &dt in small.iter().chain(&large) {
                for &sigma in &sigmas {
                    push(0.15, dt, sigma);
                }
            }
            out
        }
        "random-scale" => steps(0.0, 0.1, 21)
            .into_iter()
            .map(|scale| {
                cell(vec![("s", scale)], &|s| {
                    s.actor = ActorKind::RandomLayer;
                    s.random_scale = scale;
                })
            })
            .collect(),
        "rsv-size" => (0..=10)
            .map(|n| {
                let size = 16usize << n;
                cell(vec![("size", size as f64)], &|s| {
                    s.actor = ActorKind::CbrlReservoir;
                    s.reservoir.size = size;
                })
            })
            .collect(),
        "rsv-conn" => [0.01, 0.02, 0.05, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0]
            .into_iter()
            .map(|p| {
                cell(vec![("p", p)], &|s| {
                    s.actor = ActorKind::CbrlReservoir;
                    s.reservoir.connectivity = p;
                })
            })
            .collect(),
        other => {
            return Err(Error::Config(format!("unknown grid {other:?}; expected one of {}", GRID_NAMES.join(", "))))
        }
    };
    Ok(cells)
}

/// Grid over an explicit list of spectral-radius scales.
pub fn g_cells(template: &ScenarioConfig, gs: &[f64]) -> Vec<SweepCell> {
    gs.iter()
        .map(|&g| {
            let mut scenario = template.clone();
            scenario.reservoir.g = g;
            SweepCell { axes: vec![("g".into(), g)], scenario }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub axes: Vec<f64>,
    pub runs: Vec<RunSummary>,
    pub success_prob: f64,
    pub mean_steps: f64,
    /// Population standard deviation over seeds.
    pub std_steps: f64,
}

impl SweepRow {
    pub fn successes(&self) -> usize {
        self.runs.iter().filter(|r| r.success).count()
    }

    /// Seed-averaged readout statistics `(reservoir block, bypass block)`.
    pub fn mean_weights(&self) -> Option<(f64, f64)> {
        let w: Vec<&WeightStats> = self.runs.iter().filter_map(|r| r.weights.as_ref()).collect();
        if w.is_empty() {
            return None;
        }
        let n = w.len() as f64;
        Some((
            w.iter().map(|s| s.reservoir_mean()).sum::<f64>() / n,
            w.iter().map(|s| s.bypass_mean()).sum::<f64>() / n,
        ))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis_names: Vec<String>,
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.axis_names.iter().map(String::as_str).collect();
        header.extend(["seeds", "success_prob", "mean_steps", "std_steps"]);
        w.write_record(&header).map_err(csv_err)?;
        for row in &self.rows {
            let mut rec: Vec<String> = row.axes.iter().map(|v| v.to_string()).collect();
            rec.push(row.runs.len().to_string());
            rec.push(row.success_prob.to_string());
            rec.push(row.mean_steps.to_string());
            rec.push(row.std_steps.to_string());
            w.write_record(&rec).map_err(csv_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut buf = Vec::new();
        self.write_csv(&mut buf)?;
        String::from_utf8(buf).map_err(|e| Error::Io(e.to_string()))
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

/// Success probability, mean and population std of final battery means.
pub fn summarize_runs(axes: Vec<f64>, runs: Vec<RunSummary>) -> SweepRow {
    let n = runs.len().max(1) as f64;
    let success_prob = runs.iter().filter(|r| r.success).count() as f64 / n;
    let mean_steps = runs.iter().map(|r| r.final_mean_steps).sum::<f64>() / n;
    let var = runs.iter().map(|r| (r.final_mean_steps - mean_steps).powi(2)).sum::<f64>() / n;
    SweepRow { axes, runs, success_prob, mean_steps, std_steps: var.sqrt() }
}

#[derive(Clone, Debug, Default)]
pub struct SweepOptions {
    /// 0 = all cores.
    pub workers: usize,
    /// Completed (cell, seed) summaries are cached here and reused.
    pub cache_dir: Option<PathBuf>,
}

fn fnv64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Cache key: resolved scenario (seed list excluded) plus the seed.
pub fn run_key(scenario: &ScenarioConfig, seed: u64) -> Result<String> {
    let mut s = scenario.resolve()?;
    s.seeds.clear();
    let text = serde_json::to_string(&(s, seed, TOOL_VERSION))?;
    Ok(format!("{:016x}", fnv64(text.as_bytes())))
}

/// Run every (cell, seed) pair, possibly in parallel, and aggregate.
/// A configuration error in any cell aborts the sweep; numeric failures are
/// recorded as unsuccessful runs.
pub fn run_sweep(cells: &[SweepCell], seeds: &[u64], opts: &SweepOptions) -> Result<SweepTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Err(Error::Config("sweep needs at least one cell and one seed".into()));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();
    let results = map_indexed(jobs.len(), opts.workers, |j| {
        let (c, seed) = jobs[j];
        run_cached(&cells[c].scenario, seed, opts.cache_dir.as_deref())
    });
    let mut by_cell: BTreeMap<usize, Vec<RunSummary>> = BTreeMap::new();
    for ((c, _), r) in jobs.iter().zip(results) {
        by_cell.entry(*c).or_default().push(r?);
    }
    let axis_names = cells[0].axes.iter().map(|(k, _)| k.clone()).collect();
    let rows = by_cell
        .into_iter()
        .map(|(c, runs)| summarize_runs(cells[c].axes.iter().map(|(_, v)| *v).collect(), runs))
        .collect();
    Ok(SweepTable { axis_names, rows })
}

fn run_cached(scenario: &ScenarioConfig, seed: u64, cache: Option<&Path>) -> Result<RunSummary> {
    let path = match cache {
        Some(dir) => Some(dir.join(format!("{}.json", run_key(scenario, seed)?))),
        None => None,
    };
    if let Some(p) = &path {
        if let Ok(text) = std::fs::read_to_string(p) {
            if let Ok(summary) = serde_json::from_str::<RunSummary>(&text) {
                return Ok(summary);
            }
        }
    }
    let summary = RunSummary::of(&run_training(scenario, seed)?);
    if let Some(p) = &path {
        // write-then-rename so an interrupted sweep never leaves a torn entry
        let tmp = p.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(&summary)?)?;
        std::fs::rename(&tmp, p)?;
    }
    Ok(summary)
}
